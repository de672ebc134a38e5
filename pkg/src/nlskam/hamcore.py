"""Sparse exact-arithmetic algebra of Fourier-monomial Hamiltonians.

A monomial is ``c * ||u||^{2n} * u_{l_1}^{s_1} ... u_{l_q}^{s_q}`` where the
``u_k`` are the 2*pi-normalized Fourier coefficients of a function on the
circle, ``s_j = +1`` selects ``u_{l_j}`` and ``s_j = -1`` its conjugate, and
``n`` is the power of the squared L2 norm (the "mass") carried as a separate
exponent. Every stored monomial has zero mass (``sum s_j = 0``) and zero
momentum (``sum s_j l_j = 0``). Coefficients are exact Gaussian rationals.

Conventions (fixed here, used by every module):

* gradient(H, u)_k  = dH/d(conj(u_k))            (Wirtinger derivative)
* real L2 gradient  = 2 * gradient(H, u)          (= d/dRe + i d/dIm)
* Hamiltonian flow  : du/dt = -2i * gradient(H,u), so H = Z2 with
  Z2 = (1/2) sum k^2 |u_k|^2 generates u_k(t) = exp(-i k^2 t) u_k(0)
* Poisson bracket   : {F,G} = -2i sum_k (dF/du_k dG/dconj(u_k)
                                         - dF/dconj(u_k) dG/du_k)
  so that dF/dt = {F,H} along the flow of H, and {Z2, m} = i Omega_m m
  with Omega_m = sum_j s_j l_j^2 the divisor of the monomial m.

Real-valued Hamiltonians are exactly the ones closed under conjugation:
flipping every sign s -> -s maps a key to its conjugate key, whose
coefficient must be the complex conjugate.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

__all__ = [
    "InvariantError",
    "CutoffError",
    "GaussianRational",
    "Monomial",
    "Hamiltonian",
    "State",
    "canonicalize_pairs",
    "canonicalize",
    "insert",
    "evaluate",
    "gradient",
    "gradient_split",
    "l2_gradient",
    "poisson_bracket",
    "majorant_norm",
]


class InvariantError(ValueError):
    """A structural invariant (zero mass, zero momentum, ...) is violated."""


class CutoffError(ValueError):
    """A monomial refers to a mode outside the state's cutoff."""


# ---------------------------------------------------------------------------
# exact coefficients
# ---------------------------------------------------------------------------


class GaussianRational:
    """Exact complex number with rational real and imaginary parts.

    Supports the ring operations, conjugation and division, and hashes by
    value so it can be compared against plain ints/Fractions.
    """

    __slots__ = ("re", "im")

    def __init__(self, re=0, im=0):
        if isinstance(re, GaussianRational):
            assert im == 0
            self.re, self.im = re.re, re.im
            return
        self.re = Fraction(re)
        self.im = Fraction(im)

    # -- constructors ------------------------------------------------------

    @staticmethod
    def i(scale=1):
        return GaussianRational(0, scale)

    @staticmethod
    def coerce(x) -> "GaussianRational":
        if isinstance(x, GaussianRational):
            return x
        return GaussianRational(x)

    # -- ring operations ----------------------------------------------------

    def __add__(self, other):
        o = GaussianRational.coerce(other)
        return GaussianRational(self.re + o.re, self.im + o.im)

    __radd__ = __add__

    def __sub__(self, other):
        o = GaussianRational.coerce(other)
        return GaussianRational(self.re - o.re, self.im - o.im)

    def __rsub__(self, other):
        return GaussianRational.coerce(other) - self

    def __mul__(self, other):
        o = GaussianRational.coerce(other)
        return GaussianRational(
            self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = GaussianRational.coerce(other)
        d = o.re * o.re + o.im * o.im
        if d == 0:
            raise ZeroDivisionError("division by zero GaussianRational")
        return GaussianRational(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )

    def __rtruediv__(self, other):
        return GaussianRational.coerce(other) / self

    def __neg__(self):
        return GaussianRational(-self.re, -self.im)

    def conjugate(self):
        return GaussianRational(self.re, -self.im)

    # -- queries -------------------------------------------------------------

    def __bool__(self):
        return bool(self.re) or bool(self.im)

    def __eq__(self, other):
        try:
            o = GaussianRational.coerce(other)
        except (TypeError, ValueError):
            return NotImplemented
        return self.re == o.re and self.im == o.im

    def __hash__(self):
        if self.im == 0:
            return hash(self.re)
        return hash((self.re, self.im))

    def is_real(self):
        return self.im == 0

    def abs2(self) -> Fraction:
        return self.re * self.re + self.im * self.im

    def __abs__(self) -> float:
        return math.sqrt(float(self.abs2()))

    def __complex__(self):
        return complex(float(self.re), float(self.im))

    # -- text ------------------------------------------------------------------

    def __repr__(self):
        return f"GaussianRational({self})"

    def __str__(self):
        if self.im == 0:
            return str(self.re)
        sign = "+" if self.im >= 0 else "-"
        return f"{self.re}{sign}{abs(self.im)}i"

    @staticmethod
    def from_str(s: str) -> "GaussianRational":
        s = s.strip().replace(" ", "")
        if s.endswith("i"):
            body = s[:-1]
            # split at the sign separating real and imaginary parts
            for pos in range(len(body) - 1, 0, -1):
                if body[pos] in "+-" and body[pos - 1] not in "+-/":
                    return GaussianRational(
                        Fraction(body[:pos]),
                        Fraction(body[pos + 1 :]) * (1 if body[pos] == "+" else -1),
                    )
            return GaussianRational(0, Fraction(body))
        return GaussianRational(Fraction(s))


QQ_ZERO = GaussianRational(0)
QQ_ONE = GaussianRational(1)
QQ_I = GaussianRational(0, 1)


# ---------------------------------------------------------------------------
# monomials
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _pair(m: int, s: int) -> tuple:
    # interned (mode, sign) pairs keep large expansions compact in memory
    return (m, s)


@lru_cache(maxsize=None)
def _qq_int(n: int) -> GaussianRational:
    return GaussianRational(n)


def canonicalize_pairs(pairs) -> tuple:
    """Sort (mode, sign) pairs descending by (|mode|, mode, sign).

    Idempotent and permutation invariant; equal multisets map to the same
    tuple, which is used as the storage key.
    """
    return tuple(
        sorted(
            (_pair(int(m), int(s)) for m, s in pairs),
            key=lambda p: (abs(p[0]), p[0], p[1]),
            reverse=True,
        )
    )


@dataclass(frozen=True)
class Monomial:
    """One canonical term: coeff * mass^mass_power * prod u_{mode}^{sign}."""

    pairs: tuple
    mass_power: int = 0
    coeff: GaussianRational = field(default_factory=lambda: QQ_ONE)

    def key(self):
        return (self.pairs, self.mass_power)

    @property
    def degree(self) -> int:
        return len(self.pairs) + 2 * self.mass_power

    def total_mass(self) -> int:
        return sum(s for _, s in self.pairs)

    def total_momentum(self) -> int:
        return sum(m * s for m, s in self.pairs)

    def validate(self):
        for m, s in self.pairs:
            if s not in (-1, 1):
                raise InvariantError(f"sign {s} is not +-1")
        if self.mass_power < 0:
            raise InvariantError("negative mass power")
        if self.total_mass() != 0:
            raise InvariantError(f"nonzero mass {self.total_mass()} in {self.pairs}")
        if self.total_momentum() != 0:
            raise InvariantError(
                f"nonzero momentum {self.total_momentum()} in {self.pairs}"
            )

    def l1_star(self) -> int:
        """Largest |mode| (0 for a pure mass term)."""
        return abs(self.pairs[0][0]) if self.pairs else 0

    def l3_star(self) -> int:
        """Third largest |mode|; 1 by convention when fewer than 3 factors."""
        return abs(self.pairs[2][0]) if len(self.pairs) >= 3 else 1

    def conjugate(self) -> "Monomial":
        flipped = canonicalize_pairs((m, -s) for m, s in self.pairs)
        return Monomial(flipped, self.mass_power, self.coeff.conjugate())

    def __neg__(self):
        return Monomial(self.pairs, self.mass_power, -self.coeff)


def canonicalize(pairs, mass_power=0, coeff=1) -> Monomial:
    """Build the canonical monomial for a raw list of (mode, sign) pairs."""
    return Monomial(
        canonicalize_pairs(pairs), int(mass_power), GaussianRational.coerce(coeff)
    )


@lru_cache(maxsize=None)
def _mode_counts(pairs):
    """mode -> (number of +1 occurrences, number of -1 occurrences)."""
    counts = {}
    for m, s in pairs:
        plus, minus = counts.get(m, (0, 0))
        if s > 0:
            counts[m] = (plus + 1, minus)
        else:
            counts[m] = (plus, minus + 1)
    return counts


def divisor_of_pairs(pairs) -> int:
    return sum(s * m * m for m, s in pairs)


def is_fully_paired(pairs) -> bool:
    """True when the factors form a product of actions |u_m|^2."""
    return all(p == q for p, q in _mode_counts(pairs).values())


# ---------------------------------------------------------------------------
# Hamiltonians
# ---------------------------------------------------------------------------


class Hamiltonian:
    """Sparse Hamiltonian: canonical (pairs, mass_power) -> coefficient.

    Zero coefficients are never stored. Instances should be treated as
    immutable once handed out; every public operation returns a fresh one.
    """

    __slots__ = ("_terms", "degree_bound", "meta", "_compiled")

    def __init__(self, terms=None, degree_bound=None, meta=None):
        self._terms = dict(terms) if terms else {}
        self.degree_bound = degree_bound
        self.meta = dict(meta) if meta else {}
        self._compiled = {}

    # -- construction -------------------------------------------------------

    @staticmethod
    def from_monomials(monomials, degree_bound=None, validate=True) -> "Hamiltonian":
        h = Hamiltonian(degree_bound=degree_bound)
        for mono in monomials:
            h._accumulate(mono, validate=validate)
        return h

    def _accumulate(self, mono: Monomial, validate=True):
        if validate:
            mono.validate()
        if self.degree_bound is not None and mono.degree > self.degree_bound:
            self.meta["truncated_terms"] = self.meta.get("truncated_terms", 0) + 1
            return
        key = mono.key()
        new = self._terms.get(key, QQ_ZERO) + mono.coeff
        if new:
            self._terms[key] = new
        else:
            self._terms.pop(key, None)

    def _accumulate_raw(self, key, coeff):
        new = self._terms.get(key, QQ_ZERO) + coeff
        if new:
            self._terms[key] = new
        else:
            self._terms.pop(key, None)

    # -- views ----------------------------------------------------------------

    def terms(self):
        """Iterate Monomial objects (stable order of insertion)."""
        for (pairs, n), c in self._terms.items():
            yield Monomial(pairs, n, c)

    def items(self):
        return self._terms.items()

    def coeff(self, pairs, mass_power=0) -> GaussianRational:
        return self._terms.get((canonicalize_pairs(pairs), mass_power), QQ_ZERO)

    def __len__(self):
        return len(self._terms)

    def __bool__(self):
        return bool(self._terms)

    def __eq__(self, other):
        if not isinstance(other, Hamiltonian):
            return NotImplemented
        return self._terms == other._terms

    def __repr__(self):
        return f"<Hamiltonian {len(self)} terms, degree_bound={self.degree_bound}>"

    def degrees(self):
        return sorted({len(p) + 2 * n for p, n in self._terms})

    def max_mode(self) -> int:
        return max((abs(m) for p, _ in self._terms for m, _ in p), default=0)

    def part_of_degree(self, d) -> "Hamiltonian":
        return Hamiltonian(
            {k: c for k, c in self._terms.items() if len(k[0]) + 2 * k[1] == d}
        )

    def filter(self, predicate) -> "Hamiltonian":
        """Sub-Hamiltonian of the terms whose Monomial satisfies predicate."""
        return Hamiltonian(
            {k: c for k, c in self._terms.items() if predicate(Monomial(k[0], k[1], c))}
        )

    # -- algebra ---------------------------------------------------------------

    def __add__(self, other):
        h = Hamiltonian(self._terms, degree_bound=self.degree_bound)
        for key, c in other._terms.items():
            h._accumulate_raw(key, c)
        return h

    def __sub__(self, other):
        h = Hamiltonian(self._terms, degree_bound=self.degree_bound)
        for key, c in other._terms.items():
            h._accumulate_raw(key, -c)
        return h

    def __neg__(self):
        return self.scale(-1)

    def scale(self, factor) -> "Hamiltonian":
        f = GaussianRational.coerce(factor)
        if not f:
            return Hamiltonian(degree_bound=self.degree_bound)
        return Hamiltonian(
            {k: c * f for k, c in self._terms.items()}, degree_bound=self.degree_bound
        )

    def conjugate(self) -> "Hamiltonian":
        h = Hamiltonian(degree_bound=self.degree_bound)
        for (pairs, n), c in self._terms.items():
            key = (canonicalize_pairs((m, -s) for m, s in pairs), n)
            h._accumulate_raw(key, c.conjugate())
        return h

    def is_real(self) -> bool:
        """Closure under conjugation, i.e. the evaluation is real-valued."""
        for (pairs, n), c in self._terms.items():
            key = (canonicalize_pairs((m, -s) for m, s in pairs), n)
            if self._terms.get(key, QQ_ZERO) != c.conjugate():
                return False
        return True

    def truncated(self, degree_bound) -> "Hamiltonian":
        kept = {
            k: c
            for k, c in self._terms.items()
            if len(k[0]) + 2 * k[1] <= degree_bound
        }
        h = Hamiltonian(kept, degree_bound=degree_bound)
        dropped = len(self._terms) - len(kept)
        if dropped:
            h.meta["truncated_terms"] = dropped
        return h

    def expand_mass(self, K) -> "Hamiltonian":
        """Replace every mass^n factor by the expanded (sum |u_k|^2)^n at cutoff K.

        The result carries mass_power 0 everywhere; used to compare
        mass-carrying and fully expanded representations exactly.
        """
        modes = list(range(-K, K + 1))
        h = Hamiltonian()
        for (pairs, n), c in self._terms.items():
            if n == 0:
                h._accumulate_raw((pairs, 0), c)
                continue
            for combo in itertools.combinations_with_replacement(modes, n):
                mult = _multinomial(combo)
                extra = []
                for m in combo:
                    extra.append((m, 1))
                    extra.append((m, -1))
                key = (canonicalize_pairs(list(pairs) + extra), 0)
                h._accumulate_raw(key, c * mult)
        return h

    def rescale_amplitude(self, eps, normalization: int = 4) -> "Hamiltonian":
        """eps^-normalization * H(eps u): degree-d coefficients pick up
        eps^(d - normalization), exact for rational eps."""
        eps = Fraction(eps)
        out = Hamiltonian(degree_bound=self.degree_bound)
        for (pairs, n), c in self._terms.items():
            d = len(pairs) + 2 * n
            out._accumulate_raw((pairs, n), c * eps ** (d - normalization))
        return out

    # -- serialization -----------------------------------------------------------

    def sorted_terms(self):
        return sorted(self._terms.items(), key=lambda kv: (kv[0][1], kv[0][0]))

    def to_dict(self) -> dict:
        return {
            "degree_bound": self.degree_bound,
            "terms": [
                {"pairs": [[m, s] for m, s in pairs], "massPower": n, "coeff": str(c)}
                for (pairs, n), c in self.sorted_terms()
            ],
        }

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("sort_keys", True)
        return json.dumps(self.to_dict(), **kwargs)

    @staticmethod
    def from_dict(d) -> "Hamiltonian":
        h = Hamiltonian(degree_bound=d.get("degree_bound"))
        for t in d["terms"]:
            h._accumulate(
                canonicalize(
                    [(m, s) for m, s in t["pairs"]],
                    t.get("massPower", 0),
                    GaussianRational.from_str(t["coeff"]),
                )
            )
        return h

    @staticmethod
    def from_json(s) -> "Hamiltonian":
        return Hamiltonian.from_dict(json.loads(s))

    # -- numerics ------------------------------------------------------------------

    def compiled(self, K) -> "CompiledHamiltonian":
        comp = self._compiled.get(K)
        if comp is None:
            comp = CompiledHamiltonian(self, K)
            self._compiled[K] = comp
        return comp


def _multinomial(combo) -> int:
    """n! / prod (multiplicities!) for a sorted value combination."""
    n = len(combo)
    result = math.factorial(n)
    i = 0
    while i < n:
        j = i
        while j < n and combo[j] == combo[i]:
            j += 1
        result //= math.factorial(j - i)
        i = j
    return result


def insert(h: Hamiltonian, monomial: Monomial) -> Hamiltonian:
    """Return h with the monomial's coefficient merged in.

    Raises InvariantError when the monomial violates zero mass or zero
    momentum. Cancelling an existing coefficient removes the key.
    """
    monomial.validate()
    out = Hamiltonian(h._terms, degree_bound=h.degree_bound, meta=h.meta)
    out._accumulate(monomial)
    return out


# ---------------------------------------------------------------------------
# states and numeric evaluation
# ---------------------------------------------------------------------------


@dataclass
class State:
    """Truncated Fourier vector: amplitudes u_k for |k| <= cutoff."""

    cutoff: int
    data: np.ndarray

    @staticmethod
    def zeros(K) -> "State":
        return State(K, np.zeros(2 * K + 1, dtype=complex))

    @staticmethod
    def from_modes(K, modes: dict) -> "State":
        st = State.zeros(K)
        for k, v in modes.items():
            st[k] = v
        return st

    @staticmethod
    def random(K, rng, norm=1.0, support=None) -> "State":
        """Random state with the given L2 norm, optionally supported in |k| <= support."""
        s = support if support is not None else K
        st = State.zeros(K)
        vals = rng.normal(size=2 * s + 1) + 1j * rng.normal(size=2 * s + 1)
        vals *= norm / np.linalg.norm(vals)
        st.data[K - s : K + s + 1] = vals
        return st

    def __getitem__(self, k):
        return self.data[self.cutoff + k]

    def __setitem__(self, k, v):
        self.data[self.cutoff + k] = v

    @property
    def mass(self) -> float:
        return float(np.sum(np.abs(self.data) ** 2))

    def copy(self) -> "State":
        return State(self.cutoff, self.data.copy())

    def modes(self):
        return range(-self.cutoff, self.cutoff + 1)


def _pack_rows(rows, conj, coeffs, mpow, width):
    if not rows:
        return (
            np.zeros((0, max(width, 1)), dtype=np.int64),
            np.zeros((0, max(width, 1)), dtype=bool),
            np.zeros(0, dtype=complex),
            np.zeros(0, dtype=np.int64),
        )
    return (
        np.array(rows, dtype=np.int64),
        np.array(conj, dtype=bool),
        np.array(coeffs, dtype=complex),
        np.array(mpow, dtype=np.int64),
    )


class CompiledHamiltonian:
    """Index-array form of a Hamiltonian for fast numpy evaluation.

    Each term becomes a row of mode indices (padded with a slot that always
    reads value 1), a conjugation mask, a complex coefficient and a mass
    power. The gradient d/dconj(u_k) is precompiled the same way, one row
    per (term, conjugated slot).
    """

    def __init__(self, h: Hamiltonian, K: int):
        self.K = K
        if h.max_mode() > K:
            raise CutoffError(f"mode {h.max_mode()} outside cutoff {K}")
        width = max((len(pairs) for (pairs, _n), _c in h.items()), default=0)
        self._width = width
        pad = 2 * K + 1  # index of the constant-1 slot
        self._pad = pad
        rows, conj, coeffs, mpow = [], [], [], []
        self._const = QQ_ZERO
        self._items = list(h.items())
        for (pairs, n), c in self._items:
            if not pairs and n == 0:
                self._const = self._const + c
                continue
            idx = [m + K for m, _ in pairs]
            cj = [s < 0 for _, s in pairs]
            rows.append(idx + [pad] * (width - len(idx)))
            conj.append(cj + [False] * (width - len(idx)))
            coeffs.append(complex(c))
            mpow.append(n)
        self.rows, self.conj, self.coeffs, self.mpow = _pack_rows(
            rows, conj, coeffs, mpow, width
        )
        self._grad = None
        self.any_mass = bool(np.any(self.mpow))

    def _ensure_gradient(self):
        # one row per (term, conjugated slot); built on first gradient call
        if self._grad is not None:
            return
        K, width, pad = self.K, self._width, self._pad
        g_rows, g_conj, g_coeffs, g_mpow, g_target = [], [], [], [], []
        for (pairs, n), c in self._items:
            if not pairs:
                continue
            idx = [m + K for m, _ in pairs]
            cj = [s < 0 for _, s in pairs]
            for j, (m, s) in enumerate(pairs):
                if s < 0:
                    rest_idx = [idx[t] for t in range(len(pairs)) if t != j]
                    rest_cj = [cj[t] for t in range(len(pairs)) if t != j]
                    g_rows.append(rest_idx + [pad] * (width - len(rest_idx)))
                    g_conj.append(rest_cj + [False] * (width - len(rest_cj)))
                    g_coeffs.append(complex(c))
                    g_mpow.append(n)
                    g_target.append(m + K)
        self._grad = _pack_rows(g_rows, g_conj, g_coeffs, g_mpow, width) + (
            np.array(g_target, dtype=np.int64),
        )
        if np.any(self._grad[3]):
            self.any_mass = True

    def _extended(self, state: State):
        x = np.empty(2 * self.K + 2, dtype=complex)
        x[: 2 * self.K + 1] = state.data
        x[-1] = 1.0
        return x

    def _row_values(self, x, rows, conj, coeffs, mpow, mass):
        if len(coeffs) == 0:
            return np.zeros(0, dtype=complex)
        vals = x[rows]
        np.conjugate(vals, where=conj, out=vals)
        prod = vals.prod(axis=1) * coeffs
        if self.any_mass:
            prod = prod * mass**mpow
        return prod

    def value(self, state: State) -> complex:
        x = self._extended(state)
        mass = state.mass
        prod = self._row_values(x, self.rows, self.conj, self.coeffs, self.mpow, mass)
        return complex(self._const) + complex(prod.sum())

    def wirtinger_gradient(self, state: State) -> np.ndarray:
        """dH/dconj(u_k) as a complex vector over |k| <= K (v-part plus mass part)."""
        mu, v = self.gradient_split(state)
        return mu * state.data + v

    def gradient_split(self, state: State):
        """(dH/dmass, v-part) with gradient = (dH/dmass) * u + v."""
        self._ensure_gradient()
        g_rows, g_conj, g_coeffs, g_mpow, g_target = self._grad
        x = self._extended(state)
        mass = state.mass
        v = np.zeros(2 * self.K + 1, dtype=complex)
        prod = self._row_values(x, g_rows, g_conj, g_coeffs, g_mpow, mass)
        np.add.at(v, g_target, prod)
        mu = 0.0 + 0.0j
        if self.any_mass:
            sel = self.mpow > 0
            if np.any(sel):
                vals = x[self.rows[sel]]
                np.conjugate(vals, where=self.conj[sel], out=vals)
                mp = self.mpow[sel]
                mu = complex(
                    (vals.prod(axis=1) * self.coeffs[sel] * mp * mass ** (mp - 1)).sum()
                )
        return mu, v


def evaluate(h: Hamiltonian, state: State, imag_tol=1e-9) -> float:
    """Numeric value of h at the state; must come out real.

    Raises CutoffError when h has modes beyond the state cutoff, and
    ValueError when the imaginary residue exceeds imag_tol relative to the
    magnitude (which indicates a Hamiltonian not closed under conjugation).
    """
    val = h.compiled(state.cutoff).value(state)
    scale = max(1.0, abs(val))
    if abs(val.imag) > imag_tol * scale:
        raise ValueError(f"evaluation has imaginary residue {val.imag:g}")
    return float(val.real)


def evaluate_complex(h: Hamiltonian, state: State) -> complex:
    return h.compiled(state.cutoff).value(state)


def gradient(h: Hamiltonian, state: State) -> np.ndarray:
    """Wirtinger gradient dH/dconj(u_k), as a complex vector."""
    return h.compiled(state.cutoff).wirtinger_gradient(state)


def gradient_split(h: Hamiltonian, state: State):
    """(mass derivative, v-part): gradient = mu * u + v, with mu = dH/dmass.

    The real L2 vector field of the paper-style split is then
    2*mu*u + 2*v = l2_gradient.
    """
    return h.compiled(state.cutoff).gradient_split(state)


def l2_gradient(h: Hamiltonian, state: State) -> np.ndarray:
    """Real L2 gradient, 2 * dH/dconj(u_k) (equals d/dRe + i d/dIm)."""
    return 2.0 * gradient(h, state)


# ---------------------------------------------------------------------------
# Poisson bracket
# ---------------------------------------------------------------------------

_MINUS_2I = GaussianRational(0, -2)


def _degree_buckets(h: Hamiltonian):
    buckets = {}
    for (pairs, n), c in h.items():
        if not pairs:
            continue  # constants and pure mass powers bracket to zero
        buckets.setdefault(len(pairs) + 2 * n, []).append(
            ((pairs, n), c, _mode_counts(pairs))
        )
    return buckets


def poisson_bracket(a: Hamiltonian, b: Hamiltonian, degree_bound=None) -> Hamiltonian:
    """{a, b} with the convention dF/dt = {F, H} along the flow of H.

    Mass factors are transparent: they commute with every zero-mass
    monomial, so only the Fourier factors contract. When degree_bound is
    given, products beyond it are dropped and counted in result.meta.
    """
    out = Hamiltonian(degree_bound=degree_bound)
    buckets_a = _degree_buckets(a)
    buckets_b = _degree_buckets(b)
    truncated = 0
    for deg_a, items_a in buckets_a.items():
        for deg_b, items_b in buckets_b.items():
            if degree_bound is not None and deg_a + deg_b - 2 > degree_bound:
                truncated += len(items_a) * len(items_b)
                continue
            for (pa, na), ca, counts_a in items_a:
                for (pb, nb), cb, counts_b in items_b:
                    common = counts_a.keys() & counts_b.keys()
                    if not common:
                        continue
                    cacb = None
                    for mode in common:
                        ap, am = counts_a[mode]
                        bp, bm = counts_b[mode]
                        weight = ap * bm - am * bp
                        if weight == 0:
                            continue
                        if cacb is None:
                            cacb = _MINUS_2I * ca * cb
                        merged = list(pa) + list(pb)
                        merged.remove((mode, 1))
                        merged.remove((mode, -1))
                        key = (canonicalize_pairs(merged), na + nb)
                        out._accumulate_raw(key, cacb * weight)
    if truncated:
        out.meta["truncated_terms"] = truncated
    return out


# ---------------------------------------------------------------------------
# majorant norm
# ---------------------------------------------------------------------------


def majorant_norm(h: Hamiltonian, weight=None, mass_weight=1.0) -> float:
    """sum over terms of |coeff| * prod_j weight(mode_j) * mass_weight^n.

    A crude size functional: monotone under term removal and subadditive.
    weight defaults to 1 for every mode and must be positive.
    """
    if weight is None:
        weight = lambda m: 1.0
    total = 0.0
    for (pairs, n), c in h.items():
        w = mass_weight**n
        for m, _ in pairs:
            wm = float(weight(m))
            if wm <= 0:
                raise ValueError("weights must be positive")
            w *= wm
        total += abs(c) * w
    return total

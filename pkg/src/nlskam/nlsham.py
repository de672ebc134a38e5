"""NLS Hamiltonian construction and its Wick-renormalized building blocks.

The Hamiltonian of i u_t + u_xx = f(|u|^2) u on the circle is

    H(u) = Z2(u) + sum_{q >= 2} a_{2q} ||u||_{L^{2q}}^{2q},
    Z2   = (1/2) sum_k k^2 |u_k|^2,      a_{2q} = f^{(q-1)}(0) / (2 q!),

with the L^{2q} norms normalized by dx/(2pi). Each ||u||_{L^{2q}}^{2q}
expands into the zero-mass, zero-momentum monomials of 2q Fourier factors;
the canonical coefficient of a monomial with plus-multiset A and
minus-multiset B is multinomial(A) * multinomial(B).

Wick ordering rewrites |u|^{2p} against powers of the mass, yielding blocks
W_{2p} = integral of :|u|^{2p}: dx/(2pi) whose fully expanded Fourier
coefficients have every same-mode (+,-) pairing over-paired (a third factor
at that mode), together with the composition

    ||u||_{L^{2p}}^{2p} = sum_{0<=q<=p, q != 1} mass^{p-q} (p!/q!) C(p,q) W_{2q}.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

from .hamcore import (
    GaussianRational,
    Hamiltonian,
    State,
    canonicalize_pairs,
    evaluate,
    _multinomial,
    _pair,
    _qq_int,
)

__all__ = [
    "NonlinearitySpec",
    "WickBlock",
    "OverpairingReport",
    "taylor_coefficients",
    "expand_lp_norm",
    "kinetic_hamiltonian",
    "build_nls_hamiltonian",
    "wick_hamiltonian",
    "wick_identity_residual",
    "wick_identity_defect",
    "newton_sum",
    "is_over_paired",
    "overpairing_report",
]


@dataclass(frozen=True)
class NonlinearitySpec:
    """Finite Taylor data of the nonlinearity: f^{(m)}(0) for m = 1, 2, ...

    f(0) = 0 is implied (no constant entry); derivatives beyond the stored
    list are zero, so f is the polynomial determined by the data. With
    require_cubic (the default) a vanishing f'(0) is rejected.
    """

    taylor: tuple
    require_cubic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "taylor", tuple(Fraction(t) for t in self.taylor))
        if self.require_cubic and (not self.taylor or self.taylor[0] == 0):
            raise ValueError("f'(0) must be nonzero (cubic term present)")

    @staticmethod
    def cubic() -> "NonlinearitySpec":
        return NonlinearitySpec((Fraction(1),))

    @staticmethod
    def from_strings(strings, **kwargs) -> "NonlinearitySpec":
        if not strings:
            raise ValueError("empty Taylor data for the nonlinearity")
        return NonlinearitySpec(tuple(Fraction(s) for s in strings), **kwargs)

    def derivative(self, m: int) -> Fraction:
        """f^{(m)}(0) for m >= 1."""
        if m < 1:
            raise ValueError("derivative order must be >= 1")
        if m - 1 < len(self.taylor):
            return self.taylor[m - 1]
        return Fraction(0)

    def f_values(self, z):
        """Evaluate f at a numpy array z (used by the split-step integrator)."""
        total = 0.0 * z
        for m in range(len(self.taylor), 0, -1):
            total = (total + float(self.taylor[m - 1]) / math.factorial(m)) * z
        return total

    def max_power(self) -> int:
        """Degree of f as a polynomial in z = |u|^2."""
        degree = 0
        for m, d in enumerate(self.taylor, start=1):
            if d != 0:
                degree = m
        return degree


def taylor_coefficients(spec: NonlinearitySpec, qmax: int) -> dict:
    """a_{2q} = f^{(q-1)}(0) / (2 q!) for 2 <= q <= qmax, exact."""
    if qmax < 2:
        raise ValueError("qmax must be >= 2")
    return {
        q: spec.derivative(q - 1) / (2 * math.factorial(q)) for q in range(2, qmax + 1)
    }


def kinetic_hamiltonian(K: int) -> Hamiltonian:
    """Z2 = (1/2) sum_{|k| <= K} k^2 |u_k|^2."""
    h = Hamiltonian()
    for k in range(-K, K + 1):
        if k == 0:
            continue
        key = (canonicalize_pairs([(k, 1), (k, -1)]), 0)
        h._accumulate_raw(key, GaussianRational(Fraction(k * k, 2)))
    return h


def _multisets_by_sum(q: int, K: int) -> dict:
    """sum -> list of (sorted value tuple, multinomial) over q-multisets of [-K..K]."""
    out = {}
    for combo in itertools.combinations_with_replacement(range(-K, K + 1), q):
        out.setdefault(sum(combo), []).append((combo, _multinomial(combo)))
    return out


@lru_cache(maxsize=16)
def expand_lp_norm(q: int, K: int) -> Hamiltonian:
    """||u||_{L^{2q}}^{2q} at cutoff K as an exact Hamiltonian.

    q = 0 gives the constant 1, q = 1 the expanded mass sum |u_k|^2.
    Cached: treat the result as read-only.
    """
    if q < 0 or K < 1:
        raise ValueError("need q >= 0 and K >= 1")
    h = Hamiltonian()
    if q == 0:
        h._accumulate_raw(((), 0), _qq_int(1))
        return h
    groups = _multisets_by_sum(q, K)
    for _, entries in groups.items():
        for plus, mplus in entries:
            plus_pairs = [_pair(v, 1) for v in plus]
            for minus, mminus in entries:
                pairs = plus_pairs + [_pair(v, -1) for v in minus]
                key = (canonicalize_pairs(pairs), 0)
                h._accumulate_raw(key, _qq_int(mplus * mminus))
    return h


def build_nls_hamiltonian(spec: NonlinearitySpec, K: int, rmax: int) -> Hamiltonian:
    """Z2 + sum_{q=2}^{rmax} a_{2q} ||u||_{L^{2q}}^{2q}, truncated to modes <= K."""
    if rmax < 2:
        raise ValueError("rmax must be >= 2")
    h = kinetic_hamiltonian(K)
    for q, a in taylor_coefficients(spec, rmax).items():
        if a == 0:
            continue
        h = h + expand_lp_norm(q, K).scale(a)
    h.degree_bound = 2 * rmax
    return h


def newton_sum(p: int, K: int) -> Hamiltonian:
    """sum_{|k| <= K} |u_k|^{2p}."""
    if p < 1:
        raise ValueError("p must be >= 1")
    h = Hamiltonian()
    for k in range(-K, K + 1):
        pairs = [(k, 1)] * p + [(k, -1)] * p
        h._accumulate_raw((canonicalize_pairs(pairs), 0), _qq_int(1))
    return h


# ---------------------------------------------------------------------------
# Wick blocks
# ---------------------------------------------------------------------------


def _mass_bump(h: Hamiltonian, dn: int) -> Hamiltonian:
    out = Hamiltonian()
    for (pairs, n), c in h.items():
        out._accumulate_raw((pairs, n + dn), c)
    return out


def _wick_weight(p: int, q: int) -> Fraction:
    return Fraction(math.factorial(p), math.factorial(q)) * math.comb(p, q)


class WickBlock:
    """Wick block of order p at cutoff K.

    hamiltonian holds the mass-power form; table (built lazily) holds the
    fully expanded Fourier coefficients in ordered-tuple normalization,
    i.e. the canonical coefficient times prod(multiplicities!)/(2p)!,
    which is the reading under which |W^{l,sigma}| <= 2^p p! holds.
    """

    def __init__(self, p: int, K: int, hamiltonian: Hamiltonian):
        self.p = p
        self.K = K
        self.hamiltonian = hamiltonian
        self._table = None

    def __repr__(self):
        return f"<WickBlock p={self.p} K={self.K} terms={len(self.hamiltonian)}>"

    @property
    def table(self) -> dict:
        if self._table is None:
            expanded = self.hamiltonian.expand_mass(self.K)
            table = {
                pairs: c * _ordered_normalization(pairs)
                for (pairs, _n), c in expanded.items()
                if pairs
            }
            const = expanded.coeff((), 0)
            if const:
                table[()] = const
            self._table = table
        return self._table

    def coefficient_bound(self) -> Fraction:
        return Fraction(2**self.p * math.factorial(self.p))

    def table_violations(self):
        """Keys whose |coefficient| exceeds 2^p p! (expected: none)."""
        bound2 = self.coefficient_bound() ** 2
        return [k for k, c in self.table.items() if c.abs2() > bound2]

    def max_table_coeff(self):
        if not self.table:
            return None, Fraction(0)
        key = max(self.table, key=lambda k: self.table[k].abs2())
        c = self.table[key]
        assert c.is_real()
        return key, abs(c.re)

    def to_dict(self) -> dict:
        return {"p": self.p, "K": self.K, "hamiltonian": self.hamiltonian.to_dict()}


def _ordered_normalization(pairs) -> Fraction:
    """prod(multiplicities!) / (len(pairs))! for the pair multiset."""
    num = 1
    counts = {}
    for pr in pairs:
        counts[pr] = counts.get(pr, 0) + 1
    for c in counts.values():
        num *= math.factorial(c)
    return Fraction(num, math.factorial(len(pairs)))


@lru_cache(maxsize=8)
def wick_hamiltonian(p: int, K: int) -> WickBlock:
    """W_{2p} = integral of :|u|^{2p}: dx/(2pi) at cutoff K.

    W_{2p} = sum_{q=0}^{p} (-1)^{p-q} (p!/q!) C(p,q) mass^{p-q} ||u||_{2q}^{2q};
    the cached blocks are shared, treat them as read-only.
    """
    if p < 0:
        raise ValueError("p must be >= 0")
    ham = Hamiltonian()
    for q in range(0, p + 1):
        sign = -1 if (p - q) % 2 else 1
        w = GaussianRational(_wick_weight(p, q) * sign)
        for (pairs, n), c in expand_lp_norm(q, K).items():
            ham._accumulate_raw((pairs, n + p - q), c * w)
    return WickBlock(p=p, K=K, hamiltonian=ham)


def wick_identity_residual(p: int, K: int, state: State) -> float:
    """|lhs - rhs| of the Wick composition identity, evaluated numerically."""
    if p < 2:
        raise ValueError("p must be >= 2")
    lhs = evaluate(expand_lp_norm(p, K), state)
    mass = state.mass
    rhs = 0.0
    for q in range(0, p + 1):
        if q == 1:
            continue
        rhs += float(_wick_weight(p, q)) * mass ** (p - q) * evaluate(
            wick_hamiltonian(q, K).hamiltonian, state
        )
    return abs(lhs - rhs)


def wick_identity_defect(p: int, K: int) -> Hamiltonian:
    """Exact symbolic difference lhs - rhs, fully mass-expanded at cutoff K.

    Empty when the composition identity holds, which it does for every p.
    """
    diff = expand_lp_norm(p, K)
    for q in range(0, p + 1):
        if q == 1:
            continue
        part = _mass_bump(wick_hamiltonian(q, K).hamiltonian, p - q)
        diff = diff - part.scale(_wick_weight(p, q))
    return diff.expand_mass(K)


# ---------------------------------------------------------------------------
# over-pairing
# ---------------------------------------------------------------------------


def is_over_paired(pairs) -> bool:
    """True unless some mode occurs exactly once with + and once with -.

    A (+,-) pairing at a mode is over-paired when a third factor carries the
    same mode; a mode carrying only one sign is no pairing at all.
    """
    counts = {}
    for m, s in pairs:
        plus, minus = counts.get(m, (0, 0))
        counts[m] = (plus + 1, minus) if s > 0 else (plus, minus + 1)
    for plus, minus in counts.values():
        if plus >= 1 and minus >= 1 and plus + minus == 2:
            return False
    return True


@dataclass
class OverpairingReport:
    p: int
    K: int
    checked: int
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "K": self.K,
            "checked": self.checked,
            "passed": self.passed,
            "failures": [[list(pr) for pr in key] for key in self.failures[:32]],
            "failureCount": len(self.failures),
        }


def overpairing_report(block: WickBlock) -> OverpairingReport:
    """Scan every expanded monomial of the block for a bare (+,-) pairing."""
    failures = [pairs for pairs in block.table if not is_over_paired(pairs)]
    return OverpairingReport(
        p=block.p, K=block.K, checked=len(block.table), failures=failures
    )

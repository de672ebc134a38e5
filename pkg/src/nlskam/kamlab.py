"""Action-angle openings, projection classes, frequency maps and KAM diagnostics.

Opening a site set S rewrites u_k = (xi_k + y_k)^(1/2) e^(i theta_k) for
k in S. Powers (xi + y)^(h/2) expand as binomial series in y/xi, truncated
at the configured order in y for odd h (even h terminates exactly); the
half-integer xi exponents are carried symbolically as twice-exponents.

Frequencies are twice the y-derivatives of the opened Hamiltonian at the
torus (the doubling matches the flow convention of hamcore, under which
the quadratic model (1/2)(eps^-2 k^2 + 2 xi_k) y_k has frequency
eps^-2 k^2 + 2 xi_k), decomposed as

    omega_j = eps^-2 j^2 + 2 [j in S] xi_j + eps lambda_j(xi)

with lambda_j an exact polynomial in xi when the opened Hamiltonian is
exact. The subtraction template (the 2 in front of xi_j) is configurable.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .hamcore import (
    GaussianRational,
    Hamiltonian,
    State,
    canonicalize_pairs,
    _mode_counts,
    _multinomial,
)

__all__ = [
    "SingularOpeningError",
    "OpeningSpec",
    "AAMonomial",
    "AAHamiltonian",
    "TbrParams",
    "FrequencyMap",
    "open_sites",
    "project",
    "evaluate_aa",
    "reference_opened_quadratic",
    "frequency_map",
    "lambda_lipschitz_matrix",
    "LipschitzReport",
    "twist_margin",
    "twist_check",
    "SamplingConfig",
    "small_divisor_bad_measure",
    "sparsity_functional",
    "sparsity_trend",
    "aa_poisson_bracket",
    "aa_to_numeric",
    "aa_bnf_step",
    "aa_majorant",
]


class SingularOpeningError(ValueError):
    """Opening with xi = 0 at a site that needs half-integer powers."""


@dataclass(frozen=True)
class OpeningSpec:
    """Sites to open, their xi values and the y truncation order.

    When a radius r is given the xi are validated against the window
    (r^{2 nu}, 2 r^{2 nu}).
    """

    sites: tuple
    xi: tuple
    y_order: int = 2
    r: Fraction | None = None
    nu: Fraction = Fraction(3, 4)

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(int(s) for s in self.sites))
        object.__setattr__(self, "xi", tuple(Fraction(x) for x in self.xi))
        if len(set(self.sites)) != len(self.sites):
            raise ValueError("duplicate sites")
        if len(self.xi) != len(self.sites):
            raise ValueError("xi must align with sites")
        if self.y_order < 2:
            raise ValueError("y_order must be >= 2")
        if any(x < 0 for x in self.xi):
            raise ValueError("xi must be nonnegative")
        if self.r is not None:
            lo = float(self.r) ** (2 * float(self.nu))
            for x in self.xi:
                if not (lo < float(x) < 2 * lo):
                    raise ValueError(f"xi {x} outside window ({lo}, {2*lo})")

    @staticmethod
    def make(sites, xi, **kw) -> "OpeningSpec":
        if isinstance(xi, dict):
            xi = tuple(xi[s] for s in sites)
        return OpeningSpec(tuple(sites), tuple(xi), **kw)

    def xi_of(self, site) -> Fraction:
        return self.xi[self.sites.index(site)]

    def merged(self, other: "OpeningSpec") -> "OpeningSpec":
        if set(self.sites) & set(other.sites):
            raise ValueError("chained openings must use disjoint sites")
        return OpeningSpec(
            self.sites + other.sites,
            self.xi + other.xi,
            y_order=min(self.y_order, other.y_order),
            r=other.r if other.r is not None else self.r,
            nu=self.nu,
        )


@dataclass(frozen=True)
class AAMonomial:
    """coeff * prod xi^(xi2/2) y^m e^(i k.theta) * exterior * mass^mass_power."""

    sites: tuple
    k: tuple
    m: tuple
    xi2: tuple
    ext: tuple
    mass_power: int
    coeff: object

    @property
    def ext_degree(self) -> int:
        return len(self.ext)

    @property
    def action_weight(self) -> int:
        return sum(self.m)

    @property
    def degree(self) -> int:
        return 2 * sum(self.m) + len(self.ext) + 2 * self.mass_power

    def total_mass(self) -> int:
        return sum(self.k) + sum(s for _, s in self.ext)

    def total_momentum(self) -> int:
        return sum(kj * site for kj, site in zip(self.k, self.sites)) + sum(
            s * m for m, s in self.ext
        )

    def is_integrable(self) -> bool:
        return all(kj == 0 for kj in self.k) and all(
            p == q for p, q in _mode_counts(self.ext).values()
        )


class AAHamiltonian:
    """Sparse mixed action-angle Hamiltonian over a fixed opened site set."""

    __slots__ = ("spec", "_terms", "meta")

    def __init__(self, spec: OpeningSpec, terms=None, meta=None):
        self.spec = spec
        self._terms = dict(terms) if terms else {}
        self.meta = dict(meta) if meta else {}

    def _accumulate(self, key, coeff):
        cur = self._terms.get(key)
        new = coeff if cur is None else cur + coeff
        if new:
            self._terms[key] = new
        else:
            self._terms.pop(key, None)

    def items(self):
        return self._terms.items()

    def terms(self):
        for (k, m, xi2, ext, n), c in self._terms.items():
            yield AAMonomial(self.spec.sites, k, m, xi2, ext, n, c)

    def __len__(self):
        return len(self._terms)

    def __bool__(self):
        return bool(self._terms)

    def __eq__(self, other):
        return (
            isinstance(other, AAHamiltonian)
            and self.spec.sites == other.spec.sites
            and self._terms == other._terms
        )

    def __add__(self, other):
        out = AAHamiltonian(self.spec, self._terms)
        for key, c in other._terms.items():
            out._accumulate(key, c)
        return out

    def __sub__(self, other):
        out = AAHamiltonian(self.spec, self._terms)
        for key, c in other._terms.items():
            out._accumulate(key, -c)
        return out

    def scale(self, f) -> "AAHamiltonian":
        return AAHamiltonian(self.spec, {k: c * f for k, c in self._terms.items()})

    def filter(self, predicate) -> "AAHamiltonian":
        sites = self.spec.sites
        return AAHamiltonian(
            self.spec,
            {
                key: c
                for key, c in self._terms.items()
                if predicate(AAMonomial(sites, *key, c))
            },
        )

    def coeff(self, k, m, xi2, ext, mass_power=0):
        return self._terms.get(
            (tuple(k), tuple(m), tuple(xi2), canonicalize_pairs(ext), mass_power)
        )

    def to_dict(self) -> dict:
        return {
            "sites": list(self.spec.sites),
            "xi": [str(x) for x in self.spec.xi],
            "yOrder": self.spec.y_order,
            "terms": [
                {
                    "k": list(k),
                    "m": list(m),
                    "xi2": list(x2),
                    "ext": [[mm, ss] for mm, ss in ext],
                    "massPower": n,
                    "coeff": str(c),
                }
                for (k, m, x2, ext, n), c in sorted(
                    self._terms.items(), key=lambda kv: repr(kv[0])
                )
            ],
        }


def _binom_series(h: int, t: int) -> Fraction:
    """Binomial coefficient C(h/2, t), exact."""
    num = Fraction(1)
    half = Fraction(h, 2)
    for i in range(t):
        num *= half - i
    return num / math.factorial(t)


def _scale(coeff, frac: Fraction):
    if isinstance(coeff, GaussianRational):
        return coeff * GaussianRational(frac)
    return coeff * float(frac)


def open_sites(h, spec: OpeningSpec) -> AAHamiltonian:
    """Switch the spec's sites to action-angle variables.

    Accepts a plain Hamiltonian or an already opened AAHamiltonian whose
    sites are disjoint from the new ones (chaining). Conservation holds
    term by term: sum k_i + sum sigma = 0 and sum k_i i + sum sigma l = 0.
    """
    if isinstance(h, AAHamiltonian):
        merged = h.spec.merged(spec)
        out = AAHamiltonian(merged)
        for (k0, m0, xi20, ext, n), c in h.items():
            for k1, m1, xi21, ext1, mult in _open_pairs(ext, spec):
                key = (
                    k0 + k1,
                    m0 + m1,
                    xi20 + xi21,
                    ext1,
                    n,
                )
                out._accumulate(key, _scale(c, mult))
        return out
    out = AAHamiltonian(spec)
    for (pairs, n), c in h.items():
        for k1, m1, xi21, ext1, mult in _open_pairs(pairs, spec):
            out._accumulate((k1, m1, xi21, ext1, n), _scale(c, mult))
    return out


def _open_pairs(pairs, spec: OpeningSpec):
    """Expand the spec-site factors of a pair multiset.

    Yields (k, m, xi2, exterior, multiplier) tuples covering the truncated
    binomial expansion of every opened site.
    """
    site_index = {s: i for i, s in enumerate(spec.sites)}
    ns = len(spec.sites)
    plus = [0] * ns
    minus = [0] * ns
    ext = []
    for mode, sign in pairs:
        i = site_index.get(mode)
        if i is None:
            ext.append((mode, sign))
        elif sign > 0:
            plus[i] += 1
        else:
            minus[i] += 1
    ext_t = canonicalize_pairs(ext)
    k = tuple(p - q for p, q in zip(plus, minus))
    per_site = []
    for i in range(ns):
        h_i = plus[i] + minus[i]
        if h_i == 0:
            per_site.append([(0, 0, Fraction(1))])
            continue
        if h_i % 2 and spec.xi[i] == 0:
            raise SingularOpeningError(
                f"site {spec.sites[i]} needs xi > 0 for the half-integer expansion"
            )
        t_max = h_i // 2 if h_i % 2 == 0 else spec.y_order
        entries = []
        for t in range(0, min(t_max, spec.y_order) + 1):
            b = _binom_series(h_i, t)
            if b == 0:
                break
            entries.append((t, h_i - 2 * t, b))
        per_site.append(entries)
    for combo in itertools.product(*per_site):
        m = tuple(e[0] for e in combo)
        xi2 = tuple(e[1] for e in combo)
        mult = Fraction(1)
        for e in combo:
            mult *= e[2]
        yield k, m, xi2, ext_t, mult


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TbrParams:
    """Selection of the 'to be removed' class before opening new_site."""

    new_site: int
    ext_degree_max: int = 3
    action_power_max: int = 10000


def _class_predicate(cls: str, tbr: TbrParams | None):
    if cls == "int":
        return lambda t: t.is_integrable()
    if cls == "ajet":
        return lambda t: (
            not t.is_integrable() and t.action_weight <= 2 and t.ext_degree <= 3
        )
    if cls == "nor":
        return lambda t: t.is_integrable() and 2 * t.action_weight + t.ext_degree <= 4
    if cls == "rem":
        ajet = _class_predicate("ajet", None)
        nor = _class_predicate("nor", None)
        return lambda t: not ajet(t) and not nor(t)
    if cls == "tbr":
        if tbr is None:
            raise ValueError("tbr projection requires TbrParams")

        def pred(t):
            if t.is_integrable():
                return False
            at_new = sum(1 for m, _ in t.ext if m == tbr.new_site)
            others = t.ext_degree - at_new
            return others <= tbr.ext_degree_max and at_new <= tbr.action_power_max

        return pred
    raise ValueError(f"unknown projection class {cls!r}")


def project(aah: AAHamiltonian, cls: str, tbr: TbrParams | None = None) -> AAHamiltonian:
    """Term-wise projection onto one of int / ajet / nor / rem / tbr.

    nor + ajet + rem is a partition of the identity; int and ajet are
    disjoint by construction.
    """
    return aah.filter(_class_predicate(cls, tbr))


# ---------------------------------------------------------------------------
# numeric evaluation of opened Hamiltonians
# ---------------------------------------------------------------------------


def evaluate_aa(
    aah: AAHamiltonian,
    y: dict,
    theta: dict,
    ext_state: State | None = None,
    mass: float | None = None,
) -> complex:
    """Substitute numbers: xi from the spec, (y, theta) per site, exterior u.

    mass defaults to sum(xi + y) + exterior mass, the value of the full
    squared L2 norm in the opened coordinates.
    """
    sites = aah.spec.sites
    xi = [float(x) for x in aah.spec.xi]
    yv = [float(y.get(s, 0.0)) for s in sites]
    th = [float(theta.get(s, 0.0)) for s in sites]
    if mass is None:
        mass = sum(x + v for x, v in zip(xi, yv))
        if ext_state is not None:
            mass += ext_state.mass
    total = 0.0 + 0.0j
    for (k, m, xi2, ext, n), c in aah.items():
        val = complex(c)
        for i in range(len(sites)):
            if xi2[i]:
                val *= xi[i] ** (xi2[i] / 2.0)
            if m[i]:
                val *= yv[i] ** m[i]
            if k[i]:
                val *= np.exp(1j * k[i] * th[i])
        for mode, sign in ext:
            u = ext_state[mode]
            val *= u if sign > 0 else np.conj(u)
        if n:
            val *= mass**n
        total += val
    return total


# ---------------------------------------------------------------------------
# frequency maps
# ---------------------------------------------------------------------------


def _poly_mul_const(poly: dict, c: Fraction) -> dict:
    return {e: v * c for e, v in poly.items()}


def _poly_add(a: dict, b: dict) -> dict:
    out = dict(a)
    for e, v in b.items():
        nv = out.get(e, Fraction(0)) + v
        if nv:
            out[e] = nv
        else:
            out.pop(e, None)
    return out


def _mass0_power(ns: int, n: int) -> dict:
    """(xi_1 + ... + xi_ns)^n as an exponent-tuple polynomial."""
    out = {}
    for combo in itertools.combinations_with_replacement(range(ns), n):
        e = [0] * ns
        for i in combo:
            e[i] += 1
        out[tuple(e)] = out.get(tuple(e), Fraction(0)) + _multinomial(combo)
    return out


def _poly_eval(poly: dict, xi_vals) -> float:
    total = 0.0
    for e, c in poly.items():
        term = float(c)
        for i, p in enumerate(e):
            if p:
                term *= xi_vals[i] ** p
        total += term
    return total


def _poly_eval_vec(poly: dict, xi_mat: np.ndarray) -> np.ndarray:
    total = np.zeros(xi_mat.shape[0])
    for e, c in poly.items():
        term = np.full(xi_mat.shape[0], float(c))
        for i, p in enumerate(e):
            if p:
                term = term * xi_mat[:, i] ** p
        total += term
    return total


def _poly_dxi(poly: dict, i: int) -> dict:
    out = {}
    for e, c in poly.items():
        if e[i] == 0:
            continue
        ne = list(e)
        ne[i] -= 1
        out[tuple(ne)] = c * e[i]
    return out


@dataclass
class FrequencyMap:
    """omega_j(xi) = base_j + 2 [j in S] xi_j * (template) + eps lambda_j(xi).

    omega_poly maps each covered index j to an exponent-tuple polynomial in
    the site parameters; lambda_poly is the exact residual after removing
    the template part. Everything is exact (Fractions) when extracted from
    an exact opened Hamiltonian.
    """

    sites: tuple
    window: tuple
    eps: Fraction
    xi: tuple
    omega_poly: dict
    lambda_poly: dict
    base: dict
    xi_factor: Fraction = Fraction(2)

    def covered(self):
        return tuple(self.omega_poly.keys())

    def _xi_values(self, xi=None):
        if xi is None:
            return [float(x) for x in self.xi]
        if isinstance(xi, dict):
            return [float(xi[s]) for s in self.sites]
        return [float(x) for x in xi]

    def omega(self, j, xi=None) -> float:
        return _poly_eval(self.omega_poly[j], self._xi_values(xi))

    def lambda_value(self, j, xi=None) -> float:
        return _poly_eval(self.lambda_poly[j], self._xi_values(xi))

    def lambda_dxi(self, j, site, xi=None) -> float:
        i = self.sites.index(site)
        return _poly_eval(_poly_dxi(self.lambda_poly[j], i), self._xi_values(xi))

    def omega_matrix(self, js, xi_mat: np.ndarray) -> np.ndarray:
        return np.stack([_poly_eval_vec(self.omega_poly[j], xi_mat) for j in js])

    def decomposition_residual(self, j, xi=None) -> float:
        """omega - (base + xi_factor * 1_S xi + eps lambda); zero by construction."""
        vals = self._xi_values(xi)
        om = _poly_eval(self.omega_poly[j], vals)
        lam = _poly_eval(self.lambda_poly[j], vals)
        back = float(self.base[j]) + float(self.eps) * lam
        if j in self.sites:
            back += float(self.xi_factor) * vals[self.sites.index(j)]
        return om - back

    @staticmethod
    def synthetic(
        sites, window, base: dict, eps=Fraction(1), xi=None, lambda_poly=None,
        xi_factor=Fraction(2),
    ) -> "FrequencyMap":
        sites = tuple(sites)
        ns = len(sites)
        xi = tuple(Fraction(x) for x in (xi or (Fraction(0),) * ns))
        omega_poly = {}
        lam = {}
        for j in tuple(sites) + tuple(w for w in window if w not in sites):
            poly = {(0,) * ns: Fraction(base[j])}
            if j in sites:
                e = [0] * ns
                e[sites.index(j)] = 1
                poly = _poly_add(poly, {tuple(e): xi_factor})
            lp = (lambda_poly or {}).get(j, {})
            if lp:
                poly = _poly_add(poly, _poly_mul_const(lp, Fraction(eps)))
            omega_poly[j] = poly
            lam[j] = dict(lp)
        return FrequencyMap(
            sites=sites,
            window=tuple(window),
            eps=Fraction(eps),
            xi=xi,
            omega_poly=omega_poly,
            lambda_poly=lam,
            base={j: Fraction(base[j]) for j in omega_poly},
            xi_factor=Fraction(xi_factor),
        )

    def to_dict(self) -> dict:
        return {
            "sites": list(self.sites),
            "window": list(self.window),
            "eps": str(self.eps),
            "xiFactor": str(self.xi_factor),
            "omega": {str(j): self.omega(j) for j in self.covered()},
            "lambda": {str(j): self.lambda_value(j) for j in self.covered()},
        }


def reference_opened_quadratic(spec: OpeningSpec, eps: Fraction, window) -> AAHamiltonian:
    """The literal quadratic model (1/2) sum_S (eps^-2 k^2 + 2 xi_k) y_k
    + (1/2) sum_{S^c} eps^-2 k^2 |u_k|^2, with xi symbolic."""
    eps = Fraction(eps)
    out = AAHamiltonian(spec)
    ns = len(spec.sites)
    zero = (0,) * ns
    for i, s in enumerate(spec.sites):
        m = tuple(1 if t == i else 0 for t in range(ns))
        out._accumulate(
            (zero, m, zero, (), 0), GaussianRational(Fraction(s * s, 2) / eps**2)
        )
        xi2 = tuple(2 if t == i else 0 for t in range(ns))
        out._accumulate((zero, m, xi2, (), 0), GaussianRational(1))
    for k in window:
        if k in spec.sites or k == 0:
            continue
        ext = canonicalize_pairs([(k, 1), (k, -1)])
        out._accumulate(
            (zero, zero, zero, ext, 0), GaussianRational(Fraction(k * k, 2) / eps**2)
        )
    return out


def frequency_map(
    aah: AAHamiltonian,
    eps: Fraction,
    window,
    xi_factor: Fraction = Fraction(2),
    base: dict | None = None,
) -> FrequencyMap:
    """Extract omega_j as twice the y_j-coefficient (j in S) or twice the
    |u_j|^2 coefficient (j exterior), then split off the template.

    Raises when a requested index has no quadratic data at all and no
    default base.
    """
    eps = Fraction(eps)
    sites = aah.spec.sites
    ns = len(sites)
    window = tuple(window)
    omega_poly = {}
    zero = (0,) * ns
    for j in tuple(sites) + tuple(w for w in window if w not in sites):
        omega_poly[j] = {}
    for (k, m, xi2, ext, n), c in aah.items():
        if any(k):
            continue
        if not isinstance(c, GaussianRational):
            raise TypeError("frequency extraction needs exact coefficients")
        if not c.is_real():
            raise ValueError("quadratic data must have real coefficients")
        if any(x % 2 for x in xi2):
            raise ValueError("half-integer xi power in quadratic data")
        exps = tuple(x // 2 for x in xi2)

        def _with_mass(value: Fraction, extra_power: int) -> dict:
            if extra_power == 0:
                return {exps: value}
            return {
                tuple(a + b for a, b in zip(exps, e2)): value * w
                for e2, w in _mass0_power(ns, extra_power).items()
            }

        if not ext and sum(m) == 1:
            target = sites[m.index(1)]
            omega_poly[target] = _poly_add(omega_poly[target], _with_mass(2 * c.re, n))
        elif m == zero and len(ext) == 2 and ext[0][0] == ext[1][0]:
            mode = ext[0][0]
            if ext[0][1] + ext[1][1] == 0 and mode in omega_poly:
                omega_poly[mode] = _poly_add(
                    omega_poly[mode], _with_mass(2 * c.re, n)
                )
        elif m == zero and not ext and n >= 1:
            # mass^n depends on every y_j and |u_j|^2 through the chain rule
            contribution = _with_mass(2 * c.re * n, n - 1)
            for target in omega_poly:
                omega_poly[target] = _poly_add(omega_poly[target], contribution)
    base_map = {}
    lambda_poly = {}
    for j, poly in omega_poly.items():
        bj = Fraction(base[j]) if base is not None else Fraction(j * j) / eps**2
        base_map[j] = bj
        resid = _poly_add(poly, {zero: -bj})
        if j in sites:
            e = [0] * ns
            e[sites.index(j)] = 1
            resid = _poly_add(resid, {tuple(e): -xi_factor})
        lambda_poly[j] = _poly_mul_const(resid, 1 / eps)
    return FrequencyMap(
        sites=sites,
        window=window,
        eps=eps,
        xi=aah.spec.xi,
        omega_poly=omega_poly,
        lambda_poly=lambda_poly,
        base=base_map,
        xi_factor=Fraction(xi_factor),
    )


# ---------------------------------------------------------------------------
# twist diagnostics
# ---------------------------------------------------------------------------


@dataclass
class LipschitzReport:
    js: tuple
    ks: tuple
    matrix: np.ndarray
    exact: np.ndarray
    max_fd_error: float
    fit_constant: float
    delta: float
    s0: float

    def to_dict(self) -> dict:
        return {
            "rows": list(self.js),
            "cols": list(self.ks),
            "matrix": [[float(v) for v in row] for row in self.matrix],
            "maxFdError": self.max_fd_error,
            "fitConstant": self.fit_constant,
            "delta": self.delta,
            "s0": self.s0,
        }


def _angle_bracket(x) -> float:
    return math.sqrt(1.0 + float(x) * float(x))


def lambda_lipschitz_matrix(
    fmap: FrequencyMap,
    xi0: dict | None = None,
    h: float = 1e-6,
    js=None,
    ks=None,
    scheme: str = "central",
    delta: float = 1.0,
    s0: float = 2.0,
) -> LipschitzReport:
    """Finite-difference estimates of |d lambda_j / d xi_k|.

    Also evaluates the exact polynomial derivative (lambda is polynomial in
    xi) and fits the constant against the decay shape
    (1 and <j>^-delta <k>^{2 s0} and <k>^-delta <j>^{2 s0}) or <j>^-delta.
    """
    js = tuple(js) if js is not None else fmap.covered()
    ks = tuple(ks) if ks is not None else fmap.sites
    xi_base = fmap._xi_values(xi0)
    mat = np.zeros((len(js), len(ks)))
    exact = np.zeros_like(mat)
    for col, k in enumerate(ks):
        i = fmap.sites.index(k)
        up = list(xi_base)
        dn = list(xi_base)
        up[i] += h
        dn[i] -= h
        for row, j in enumerate(js):
            if scheme == "central":
                d = (
                    _poly_eval(fmap.lambda_poly[j], up)
                    - _poly_eval(fmap.lambda_poly[j], dn)
                ) / (2 * h)
            elif scheme == "forward":
                d = (
                    _poly_eval(fmap.lambda_poly[j], up)
                    - _poly_eval(fmap.lambda_poly[j], xi_base)
                ) / h
            else:
                raise ValueError(f"unknown scheme {scheme!r}")
            mat[row, col] = abs(d)
            exact[row, col] = abs(
                _poly_eval(_poly_dxi(fmap.lambda_poly[j], i), xi_base)
            )
    fit = 0.0
    for row, j in enumerate(js):
        for col, k in enumerate(ks):
            bj, bk = _angle_bracket(j), _angle_bracket(k)
            shape = max(
                min(1.0, bj ** (-delta) * bk ** (2 * s0), bk ** (-delta) * bj ** (2 * s0)),
                bj ** (-delta),
            )
            fit = max(fit, mat[row, col] / shape)
    return LipschitzReport(
        js=js,
        ks=ks,
        matrix=mat,
        exact=exact,
        max_fd_error=float(np.max(np.abs(mat - exact))) if mat.size else 0.0,
        fit_constant=fit,
        delta=delta,
        s0=s0,
    )


def twist_margin(matrix: np.ndarray) -> float:
    """sup over columns k of sum_j |entry(j, k)|."""
    if matrix.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(matrix), axis=0)))


def twist_check(matrix: np.ndarray, eps: float):
    margin = twist_margin(matrix)
    return margin, float(eps) * margin < 1.0


# ---------------------------------------------------------------------------
# small-divisor sampling
# ---------------------------------------------------------------------------


@dataclass
class SamplingConfig:
    sites: tuple
    xi_min: float
    xi_max: float
    freq_map: FrequencyMap
    d: int = 0
    k_box: int = 3
    ext_modes: tuple = ()
    b_values: tuple = (-2, -1, 1, 2)
    b_l1_max: int = 4
    gamma: float = 1e-3
    alpha: float | None = None
    r: float = 0.1
    nu: float = 0.75
    samples: int = 100000
    seed: int = 0

    def alpha_d(self) -> float:
        return self.alpha if self.alpha is not None else self.d + 1

    def to_dict(self) -> dict:
        return {
            "sites": list(self.sites),
            "xiMin": self.xi_min,
            "xiMax": self.xi_max,
            "d": self.d,
            "kBox": self.k_box,
            "extModes": list(self.ext_modes),
            "bValues": list(self.b_values),
            "bL1Max": self.b_l1_max,
            "gamma": self.gamma,
            "alpha": self.alpha_d(),
            "r": self.r,
            "nu": self.nu,
            "samples": self.samples,
            "seed": self.seed,
        }


@dataclass
class SmallDivisorReport:
    bad_fraction: float
    ci_low: float
    ci_high: float
    worst: dict | None
    combos: int
    config: dict

    def to_dict(self) -> dict:
        return {
            "badFraction": self.bad_fraction,
            "ci95": [self.ci_low, self.ci_high],
            "worst": self.worst,
            "combos": self.combos,
            "config": self.config,
        }


def _wilson(successes: int, n: int):
    if n == 0:
        return 0.0, 0.0
    z = 1.96
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def _divisor_combos(cfg: SamplingConfig):
    """(k vector over sites, weight dict over exterior modes) combinations."""
    ns = len(cfg.sites)
    combos = set()
    k_range = range(-cfg.k_box, cfg.k_box + 1)
    ext_choices = [()]
    if cfg.d > 0:
        if not cfg.ext_modes:
            raise ValueError("d > 0 needs ext_modes")
        ext_choices = []
        for modes in itertools.combinations_with_replacement(cfg.ext_modes, cfg.d):
            for bs in itertools.product(cfg.b_values, repeat=cfg.d):
                if sum(abs(b) for b in bs) > cfg.b_l1_max:
                    continue
                w = {}
                for mode, b in zip(modes, bs):
                    w[mode] = w.get(mode, 0) + b
                ext_choices.append(tuple(sorted(w.items())))
        ext_choices = sorted(set(ext_choices))
    for kvec in itertools.product(k_range, repeat=ns):
        if all(v == 0 for v in kvec):
            continue
        for w in ext_choices:
            combos.add((kvec, w))
    return sorted(combos)


def small_divisor_bad_measure(cfg: SamplingConfig) -> SmallDivisorReport:
    """Monte Carlo fraction of xi (uniform in the window) where some divisor
    |k . omega_S + sum b omega_l| falls below gamma (r^{2 nu} / ||k||_inf^#S)^alpha.

    Deterministic for a fixed seed; the worst witness records the smallest
    margin divisor over the whole run.
    """
    if cfg.samples <= 0:
        raise ValueError("samples must be positive")
    if not (0 <= cfg.d <= 4):
        raise ValueError("d must be in 0..4")
    rng = np.random.default_rng(cfg.seed)
    ns = len(cfg.sites)
    xi_mat = rng.uniform(cfg.xi_min, cfg.xi_max, size=(cfg.samples, ns))
    combos = _divisor_combos(cfg)
    needed = sorted(
        set(cfg.sites) | {m for _, w in combos for m, _ in w}
    )
    omega_mat = cfg.freq_map.omega_matrix(needed, xi_mat)
    index = {j: i for i, j in enumerate(needed)}
    alpha = cfg.alpha_d()
    bad = np.zeros(cfg.samples, dtype=bool)
    worst = None
    worst_margin = math.inf
    for kvec, w in combos:
        vals = np.zeros(cfg.samples)
        for kj, site in zip(kvec, cfg.sites):
            if kj:
                vals += kj * omega_mat[index[site]]
        for mode, b in w:
            if b:
                vals += b * omega_mat[index[mode]]
        knorm = max(abs(v) for v in kvec)
        thresh = cfg.gamma * (cfg.r ** (2 * cfg.nu) / knorm**ns) ** alpha
        avals = np.abs(vals)
        bad |= avals < thresh
        i_min = int(np.argmin(avals))
        margin = avals[i_min] - thresh
        if margin < worst_margin:
            worst_margin = margin
            worst = {
                "k": list(kvec),
                "extWeights": {str(m): b for m, b in w},
                "value": float(avals[i_min]),
                "threshold": float(thresh),
                "xi": [float(v) for v in xi_mat[i_min]],
            }
    nbad = int(np.count_nonzero(bad))
    lo, hi = _wilson(nbad, cfg.samples)
    return SmallDivisorReport(
        bad_fraction=nbad / cfg.samples,
        ci_low=lo,
        ci_high=hi,
        worst=worst,
        combos=len(combos),
        config=cfg.to_dict(),
    )


# ---------------------------------------------------------------------------
# sparsity functional
# ---------------------------------------------------------------------------


def sparsity_functional(sequence, P: int | None = None) -> float:
    """sup_k sum_j max( min(1, <k>^4/<j>, <j>^4/<k>), 1/<j> ) over the set.

    Evaluated in log space so doubly exponential sites do not overflow.
    """
    seq = list(sequence)[: P if P is not None else None]
    if not seq:
        raise ValueError("empty site sequence")
    mags = [abs(int(s)) for s in seq]
    if any(b <= a for a, b in zip(mags, mags[1:])):
        raise ValueError("site moduli must be strictly increasing")
    logs = [0.5 * math.log(1 + s * s) for s in mags]
    best = 0.0
    for lk in logs:
        total = 0.0
        for lj in logs:
            branch = min(0.0, 4 * lk - lj, 4 * lj - lk)
            total += math.exp(max(branch, -lj))
        best = max(best, total)
    return best


def sparsity_trend(sequence, lengths) -> list:
    """[(P, value)] for a list of truncation lengths."""
    return [(P, sparsity_functional(sequence, P)) for P in lengths]


# ---------------------------------------------------------------------------
# action-angle bracket and the pre-opening normal-form step
# ---------------------------------------------------------------------------


def _coeff_times_i(c, scale: int):
    if isinstance(c, GaussianRational):
        return c * GaussianRational(0, scale)
    return c * (1j * scale)


def aa_poisson_bracket(a: AAHamiltonian, b: AAHamiltonian, degree_cap=None) -> AAHamiltonian:
    """{a, b} in mixed coordinates: 2 sum_S (dF/dy dG/dtheta - dF/dtheta dG/dy)
    plus the exterior contraction, matching the hamcore conventions."""
    if a.spec.sites != b.spec.sites:
        raise ValueError("brackets need identical site sets")
    ns = len(a.spec.sites)
    out = AAHamiltonian(a.spec)
    items_b = [
        (key, c, _mode_counts(key[3])) for key, c in b.items()
    ]
    for (ka, ma, xa, ea, na), ca in a.items():
        counts_a = _mode_counts(ea)
        dega = 2 * sum(ma) + len(ea) + 2 * na
        for (kb, mb, xb, eb, nb), cb, counts_b in items_b:
            if (
                degree_cap is not None
                and dega + 2 * sum(mb) + len(eb) + 2 * nb - 2 > degree_cap
            ):
                continue
            # internal part
            for i in range(ns):
                wgt = ma[i] * kb[i] - ka[i] * mb[i]
                if wgt == 0:
                    continue
                m = list(ma)
                m[i] -= 1
                m = tuple(p + q for p, q in zip(m, mb))
                key = (
                    tuple(p + q for p, q in zip(ka, kb)),
                    m,
                    tuple(p + q for p, q in zip(xa, xb)),
                    canonicalize_pairs(list(ea) + list(eb)),
                    na + nb,
                )
                out._accumulate(key, _coeff_times_i(ca * cb, 2 * wgt))
            # exterior contraction
            common = counts_a.keys() & counts_b.keys()
            for mode in common:
                ap, am = counts_a[mode]
                bp, bm = counts_b[mode]
                wgt = ap * bm - am * bp
                if wgt == 0:
                    continue
                merged = list(ea) + list(eb)
                merged.remove((mode, 1))
                merged.remove((mode, -1))
                key = (
                    tuple(p + q for p, q in zip(ka, kb)),
                    tuple(p + q for p, q in zip(ma, mb)),
                    tuple(p + q for p, q in zip(xa, xb)),
                    canonicalize_pairs(merged),
                    na + nb,
                )
                out._accumulate(key, _coeff_times_i(ca * cb, -2 * wgt))
    return out


def aa_to_numeric(aah: AAHamiltonian) -> AAHamiltonian:
    """Substitute the spec's xi into the coefficients (xi2 keys become 0)."""
    xi = [float(x) for x in aah.spec.xi]
    out = AAHamiltonian(aah.spec)
    for (k, m, xi2, ext, n), c in aah.items():
        val = complex(c)
        for i, e2 in enumerate(xi2):
            if e2:
                val *= xi[i] ** (e2 / 2.0)
        out._accumulate((k, m, (0,) * len(xi), ext, n), val)
    return out


def aa_majorant(aah: AAHamiltonian, y_weight: float = 1.0, u_weight: float = 1.0) -> float:
    """sum |coeff| * y_weight^|m| * u_weight^q with xi substituted numerically.

    Weights y_weight = r^2, u_weight = r measure terms on the working
    neighborhood |y| < r^2, |u_ext| < r of the torus.
    """
    xi = [float(x) for x in aah.spec.xi]
    total = 0.0
    for (k, m, xi2, ext, n), c in aah.items():
        val = abs(complex(c))
        for i, e2 in enumerate(xi2):
            if e2:
                val *= xi[i] ** (e2 / 2.0)
        val *= y_weight ** sum(m) * u_weight ** len(ext)
        total += val
    return total


def aa_bnf_step(
    aah: AAHamiltonian,
    fmap: FrequencyMap,
    tbr: TbrParams,
    degree_cap: int = 6,
    min_divisor: float = 1e-9,
    r: float | None = None,
):
    """One numeric Lie step removing the to-be-removed class.

    Divisors come from the frequency map at its xi, D = k.omega + sum sigma
    omega_l; the generator coefficient is c/(iD). Terms whose exterior modes
    fall outside the map's coverage, or whose divisor is below min_divisor,
    are left in place and reported.
    """
    work = aa_to_numeric(aah)
    sites = work.spec.sites
    omega = {j: fmap.omega(j) for j in fmap.covered()}
    pred = _class_predicate("tbr", tbr)
    chi = AAHamiltonian(work.spec)
    skipped = []
    removed = 0
    for key, c in list(work.items()):
        k, m, xi2, ext, n = key
        mono = AAMonomial(sites, k, m, xi2, ext, n, c)
        if not pred(mono):
            continue
        try:
            div = sum(kj * omega[s] for kj, s in zip(k, sites)) + sum(
                s * omega[mode] for mode, s in ext
            )
        except KeyError:
            skipped.append({"key": repr(key), "reason": "outside frequency window"})
            continue
        if abs(div) < min_divisor:
            skipped.append({"key": repr(key), "reason": f"small divisor {div:g}"})
            continue
        chi._accumulate(key, c / (1j * div))
        removed += 1
    yw = r**2 if r is not None else 1.0
    uw = r if r is not None else 1.0
    before = aa_majorant(project(work, "tbr", tbr), yw, uw)
    acc = work
    term = work
    n_it = 0
    max_it = max(1, degree_cap)
    while term and n_it < max_it:
        n_it += 1
        term = aa_poisson_bracket(chi, term, degree_cap=degree_cap).scale(1.0 / n_it)
        acc = acc + term
    after = aa_majorant(project(acc, "tbr", tbr), yw, uw)
    report = {
        "removed": removed,
        "skipped": skipped,
        "tbrMajorantBefore": before,
        "tbrMajorantAfter": after,
        "degreeCap": degree_cap,
    }
    return acc, chi, report

"""Divisor and pairing analysis plus the Birkhoff normal-form engine.

The divisor of a zero-mass, zero-momentum monomial is the integer
Omega = sum_j s_j l_j^2; bracketing with Z2 rescales the monomial by
i*Omega. A monomial is "paired" when some mode of maximal modulus occurs
with both signs; paired terms are exempt from removal.

One normal-form step at degree d solves the cohomological equation for the
selected terms, chi_m = H_m / (i Omega_m), and pushes H through the Lie
series exp({chi, .}) truncated at the configured degree bound, so the
selected degree-d terms cancel exactly in rational arithmetic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

from .hamcore import (
    GaussianRational,
    Hamiltonian,
    Monomial,
    _mode_counts,
    canonicalize_pairs,
    is_fully_paired,
    poisson_bracket,
)

__all__ = [
    "PolicyError",
    "ThresholdPolicy",
    "DivisorRecord",
    "BnfStep",
    "NormalFormResult",
    "divisor",
    "pairing_class",
    "is_paired",
    "split_gm",
    "verify_quasi_resonant_implication",
    "verify_divisor_lower_bound",
    "bnf_step",
    "birkhoff_normal_form",
    "smoothing_bound_report",
    "extract_integrable_part",
    "integrable_two_site_table",
]


class PolicyError(RuntimeError):
    """A removal policy selected a resonant (Omega = 0) term."""


def divisor(mono) -> int:
    """Omega = sum_j s_j l_j^2, exact integer."""
    pairs = mono.pairs if isinstance(mono, Monomial) else canonicalize_pairs(mono)
    return sum(s * m * m for m, s in pairs)


def is_paired(pairs) -> bool:
    """Top-mode pairing: some mode with |mode| maximal occurs with both signs.

    Pure mass powers and constants (no Fourier factors) count as paired,
    they are action-like by nature.
    """
    if not pairs:
        return True
    top = max(abs(m) for m, _ in pairs)
    counts = _mode_counts(pairs if isinstance(pairs, tuple) else canonicalize_pairs(pairs))
    for mode, (plus, minus) in counts.items():
        if abs(mode) == top and plus >= 1 and minus >= 1:
            return True
    return False


def pairing_class(mono) -> str:
    pairs = mono.pairs if isinstance(mono, Monomial) else canonicalize_pairs(mono)
    return "paired" if is_paired(pairs) else "unpaired"


def split_gm(h: Hamiltonian):
    """(G, M): M carries the paired terms, G the rest; G + M = H exactly."""
    m_part = h.filter(lambda t: is_paired(t.pairs))
    g_part = h.filter(lambda t: not is_paired(t.pairs))
    return g_part, m_part


@dataclass
class DivisorRecord:
    pairs: tuple
    mass_power: int
    omega: int
    paired: bool
    l1_star: int
    l3_star: int

    @staticmethod
    def of(mono: Monomial) -> "DivisorRecord":
        return DivisorRecord(
            pairs=mono.pairs,
            mass_power=mono.mass_power,
            omega=divisor(mono),
            paired=is_paired(mono.pairs),
            l1_star=mono.l1_star(),
            l3_star=mono.l3_star(),
        )


# ---------------------------------------------------------------------------
# brute-force divisor surveys
# ---------------------------------------------------------------------------


def _multisets_by_sum(q: int, N: int) -> dict:
    out = {}
    for combo in itertools.combinations_with_replacement(range(-N, N + 1), q):
        out.setdefault(sum(combo), []).append(combo)
    return out


def _iter_zero_momentum_tuples(q: int, N: int):
    """All (plus multiset, minus multiset) with q entries each, |mode| <= N,
    equal sums. Yields (plus, minus, omega, top_paired)."""
    groups = _multisets_by_sum(q, N)
    for _, combos in groups.items():
        sq = {c: sum(v * v for v in c) for c in combos}
        for plus in combos:
            for minus in combos:
                omega = sq[plus] - sq[minus]
                yield plus, minus, omega


def _tuple_is_paired(plus, minus) -> bool:
    # paired needs a top-modulus value present on both the + and the - side
    top = max(abs(v) for v in plus + minus)
    return any(abs(v) == top and v in minus for v in set(plus))


def _stars(plus, minus):
    mags = sorted((abs(v) for v in plus + minus), reverse=True)
    l1 = mags[0]
    l3 = mags[2] if len(mags) >= 3 else 1
    return l1, max(l3, 1)


@dataclass
class SurveyReport:
    """Result of an exhaustive scan over zero-momentum tuples."""

    kind: str
    q: int
    N: int
    divisor_bound: int | None
    set_size: int
    constant: float | None
    witness: dict | None
    parameters: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "q": self.q,
            "N": self.N,
            "divisorBound": self.divisor_bound,
            "setSize": self.set_size,
            "constant": self.constant,
            "witness": self.witness,
            "parameters": self.parameters,
        }


def verify_quasi_resonant_implication(q: int, N: int, divisor_bound: int) -> SurveyReport:
    """Scan unpaired tuples with |Omega| <= divisor_bound for the largest
    ratio |l1*| / max(|l3*|, 1)^2 (the flooring covers zero modes).

    With divisor_bound = 0 and q = 2 the admissible set is empty: momentum
    plus resonance forces pairing for quadruples.
    """
    if q < 2 or N < 1:
        raise ValueError("need q >= 2 and N >= 1")
    best = None
    witness = None
    size = 0
    for plus, minus, omega in _iter_zero_momentum_tuples(q, N):
        if abs(omega) > divisor_bound:
            continue
        if _tuple_is_paired(plus, minus):
            continue
        size += 1
        l1, l3 = _stars(plus, minus)
        ratio = l1 / l3**2
        if best is None or ratio > best:
            best = ratio
            witness = {"plus": list(plus), "minus": list(minus), "omega": omega}
    return SurveyReport(
        kind="quasi_resonant_implication",
        q=q,
        N=N,
        divisor_bound=divisor_bound,
        set_size=size,
        constant=best,
        witness=witness,
    )


def verify_divisor_lower_bound(q: int, N: int) -> SurveyReport:
    """Smallest |Omega| * max(|l3*|,1)^2 / |l1*| over unpaired tuples with
    Omega != 0 (resonant unpaired tuples exist for q >= 3 and would make
    the constant trivially zero, so they are excluded)."""
    if q < 2 or N < 1:
        raise ValueError("need q >= 2 and N >= 1")
    best = None
    witness = None
    size = 0
    for plus, minus, omega in _iter_zero_momentum_tuples(q, N):
        if omega == 0:
            continue
        if _tuple_is_paired(plus, minus):
            continue
        size += 1
        l1, l3 = _stars(plus, minus)
        if l1 == 0:
            continue
        ratio = abs(omega) * l3**2 / l1
        if best is None or ratio < best:
            best = ratio
            witness = {"plus": list(plus), "minus": list(minus), "omega": omega}
    return SurveyReport(
        kind="divisor_lower_bound",
        q=q,
        N=N,
        divisor_bound=None,
        set_size=size,
        constant=best,
        witness=witness,
    )


# ---------------------------------------------------------------------------
# normal-form engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdPolicy:
    """Which nonresonant terms a normal-form step removes.

    kind "all-nonresonant" selects every Omega != 0 term, "q9" those with
    |Omega| >= c * q^9 (q = half the Fourier factor count), "custom" those
    with |Omega| >= threshold(q). Integrable terms have Omega = 0 and are
    never selected; exclude_paired additionally protects all paired terms.
    """

    kind: str = "all-nonresonant"
    c: float = 1.0
    threshold: object = None
    exclude_paired: bool = False

    @staticmethod
    def all_nonresonant(exclude_paired=False) -> "ThresholdPolicy":
        return ThresholdPolicy(kind="all-nonresonant", exclude_paired=exclude_paired)

    @staticmethod
    def q9(c=1.0, exclude_paired=False) -> "ThresholdPolicy":
        return ThresholdPolicy(kind="q9", c=c, exclude_paired=exclude_paired)

    @staticmethod
    def custom(threshold, exclude_paired=False) -> "ThresholdPolicy":
        return ThresholdPolicy(
            kind="custom", threshold=threshold, exclude_paired=exclude_paired
        )

    def selects(self, mono: Monomial, omega: int) -> bool:
        if omega == 0:
            return False
        if self.exclude_paired and is_paired(mono.pairs):
            return False
        if self.kind == "all-nonresonant":
            return True
        q = len(mono.pairs) // 2
        if self.kind == "q9":
            return abs(omega) >= self.c * q**9
        if self.kind == "custom":
            return abs(omega) >= self.threshold(q)
        raise ValueError(f"unknown policy kind {self.kind!r}")


def lie_transform(chi: Hamiltonian, h: Hamiltonian, degree_bound: int) -> Hamiltonian:
    """exp({chi, .}) applied to h, truncated at degree_bound.

    chi of degree d raises degree by d - 2 per bracket, so the series is
    finite; truncated products are counted in the result metadata.
    """
    chi_min_deg = min((len(p) + 2 * n for p, n in dict(chi.items())), default=2)
    acc = h.truncated(degree_bound)
    term = h
    n = 0
    truncated = acc.meta.get("truncated_terms", 0)
    max_steps = (
        degree_bound if chi_min_deg <= 2 else (degree_bound - 2) // (chi_min_deg - 2) + 1
    )
    while term and n < max_steps:
        n += 1
        term = poisson_bracket(chi, term, degree_bound=degree_bound).scale(
            Fraction(1, n)
        )
        truncated += term.meta.get("truncated_terms", 0)
        acc = acc + term
    if truncated:
        acc.meta["truncated_terms"] = truncated
    return acc


@dataclass
class BnfStep:
    hamiltonian: Hamiltonian
    chi: Hamiltonian
    removed: Hamiltonian
    record: dict


def bnf_step(
    h: Hamiltonian,
    degree: int,
    policy: ThresholdPolicy = ThresholdPolicy(),
    degree_bound: int | None = None,
) -> BnfStep:
    """One cohomological step at the given degree.

    chi_m = H_m / (i Omega_m) for every selected monomial m, and the
    returned Hamiltonian is exp({chi, .}) h truncated at degree_bound
    (default: h.degree_bound or the step degree). The degree-d part of the
    result provably contains none of the selected keys.
    """
    if degree_bound is None:
        degree_bound = h.degree_bound if h.degree_bound is not None else degree
    chi = Hamiltonian()
    removed = Hamiltonian()
    min_abs_omega = None
    for (pairs, n), c in h.part_of_degree(degree).items():
        if not pairs:
            continue
        mono = Monomial(pairs, n, c)
        omega = divisor(mono)
        if not policy.selects(mono, omega):
            continue
        if omega == 0:
            raise PolicyError(f"policy selected resonant term {pairs}")
        chi._accumulate_raw((pairs, n), c / GaussianRational(0, omega))
        removed._accumulate_raw((pairs, n), c)
        if min_abs_omega is None or abs(omega) < min_abs_omega:
            min_abs_omega = abs(omega)
    if not chi:
        out = h.truncated(degree_bound)
        return BnfStep(out, chi, removed, {"degree": degree, "selected": 0})
    out = lie_transform(chi, h, degree_bound)
    record = {
        "degree": degree,
        "selected": len(removed),
        "min_abs_divisor": min_abs_omega,
        "truncated_terms": out.meta.get("truncated_terms", 0),
    }
    return BnfStep(out, chi, removed, record)


@dataclass
class NormalFormResult:
    normal_form: Hamiltonian
    generators: list  # [(degree, chi Hamiltonian)]
    removed: list  # [(degree, removed Hamiltonian)]
    records: list
    order: int
    policy: ThresholdPolicy

    def generator(self, degree: int) -> Hamiltonian:
        for d, chi in self.generators:
            if d == degree:
                return chi
        return Hamiltonian()


def birkhoff_normal_form(
    h: Hamiltonian,
    order: int,
    policy: ThresholdPolicy = ThresholdPolicy(),
    degree_bound: int | None = None,
) -> NormalFormResult:
    """Iterate bnf_step for degrees 4, 6, ..., order.

    order = 2 returns the identity transformation. The default degree bound
    equals the requested order, matching a computation modulo higher order.
    """
    if order < 2 or order % 2:
        raise ValueError("order must be an even integer >= 2")
    if degree_bound is None:
        degree_bound = max(order, h.degree_bound or order)
    current = h.truncated(degree_bound)
    generators, removed, records = [], [], []
    for d in range(4, order + 1, 2):
        step = bnf_step(current, d, policy, degree_bound)
        current = step.hamiltonian
        if step.chi:
            generators.append((d, step.chi))
            removed.append((d, step.removed))
        records.append(step.record)
    return NormalFormResult(
        normal_form=current,
        generators=generators,
        removed=removed,
        records=records,
        order=order,
        policy=policy,
    )


# ---------------------------------------------------------------------------
# structure reports
# ---------------------------------------------------------------------------


def extract_integrable_part(h: Hamiltonian, degree: int | None = None) -> Hamiltonian:
    """Sub-Hamiltonian of action products (every mode fully paired)."""
    out = h.filter(lambda t: is_fully_paired(t.pairs))
    if degree is not None:
        out = out.part_of_degree(degree)
    return out


def integrable_two_site_table(h: Hamiltonian) -> dict:
    """Coefficients of |u_k|^4 |u_l|^2 terms (k != l, no mass factor).

    Returns {(k, l): coefficient}; used to check the 1/(k-l)^2 pattern of
    the sixth-order integrable terms generated by the normal form.
    """
    table = {}
    for (pairs, n), c in h.items():
        if n != 0 or len(pairs) != 6:
            continue
        counts = _mode_counts(pairs)
        if len(counts) != 2:
            continue
        if not is_fully_paired(pairs):
            continue
        (m1, c1), (m2, c2) = counts.items()
        if c1 == (2, 2) and c2 == (1, 1):
            table[(m1, m2)] = c
        elif c1 == (1, 1) and c2 == (2, 2):
            table[(m2, m1)] = c
    return table


def _bracket(x: int) -> float:
    return math.sqrt(1.0 + x * x)


@dataclass
class SmoothingReport:
    delta: float
    C: float
    pass_ratio: float
    worst: dict | None
    minimal_C: float
    checked: int
    skipped_constants: int

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "C": self.C,
            "passRatio": self.pass_ratio,
            "worst": self.worst,
            "minimalC": self.minimal_C,
            "checked": self.checked,
            "skippedConstants": self.skipped_constants,
        }


def smoothing_bound_report(h: Hamiltonian, delta: float, C: float = 1.0) -> SmoothingReport:
    """Check |coeff| <= C^(degree) * (1 and <l3*>^(2 delta) / <l1*>^delta).

    <x> = sqrt(1 + x^2), with <l3*> := 1 for terms of fewer than three
    Fourier factors. Reports the pass ratio at the given C, the worst
    violator, and the smallest C making every term pass. Degree-0
    constants are skipped (no scale to compare against).
    """
    worst = None
    worst_excess = 0.0
    minimal_c = 0.0
    checked = 0
    passed = 0
    skipped = 0
    for (pairs, n), c in h.items():
        deg = len(pairs) + 2 * n
        if deg == 0:
            skipped += 1
            continue
        mono = Monomial(pairs, n, c)
        l1b = _bracket(mono.l1_star())
        l3b = _bracket(mono.l3_star()) if len(pairs) >= 3 else 1.0
        weight = min(1.0, l3b ** (2 * delta) / l1b**delta)
        magnitude = abs(c)
        checked += 1
        needed_c = (magnitude / weight) ** (1.0 / deg)
        minimal_c = max(minimal_c, needed_c)
        excess = magnitude / (C**deg * weight)
        if excess <= 1.0:
            passed += 1
        if excess > worst_excess:
            worst_excess = excess
            worst = {
                "pairs": [list(p) for p in pairs],
                "massPower": n,
                "coeff": str(c),
                "excess": excess,
            }
    return SmoothingReport(
        delta=delta,
        C=C,
        pass_ratio=passed / checked if checked else 1.0,
        worst=worst,
        minimal_C=minimal_c,
        checked=checked,
        skipped_constants=skipped,
    )

import cmath
import math
from fractions import Fraction

import numpy as np
import pytest

from nlskam.hamcore import (
    GaussianRational,
    Hamiltonian,
    Monomial,
    State,
    canonicalize,
    canonicalize_pairs,
    evaluate,
)
from nlskam import birkhoff as bk
from nlskam import kamlab as kl
from nlskam import nlsham as nh

from conftest import random_real_hamiltonian

EPS = Fraction(1, 10)


@pytest.fixture(scope="module")
def opened_cubic():
    H = nh.build_nls_hamiltonian(nh.NonlinearitySpec.cubic(), 4, 2)
    spec = kl.OpeningSpec.make([0, 1], {0: Fraction(1, 8), 1: Fraction(1, 16)}, y_order=2)
    return H, spec, kl.open_sites(H, spec)


class TestOpeningSpec:
    def test_duplicate_sites_rejected(self):
        with pytest.raises(ValueError):
            kl.OpeningSpec.make([1, 1], [Fraction(1, 8), Fraction(1, 8)])

    def test_window_validation(self):
        r = Fraction(1, 10)
        kl.OpeningSpec.make([1], [Fraction(1, 25)], r=r)  # 0.04 inside (0.0316, 0.0632)
        with pytest.raises(ValueError):
            kl.OpeningSpec.make([1], [Fraction(1, 4)], r=r)

    def test_y_order_floor(self):
        with pytest.raises(ValueError):
            kl.OpeningSpec.make([1], [Fraction(1, 8)], y_order=1)


class TestOpenSites:
    def test_single_action_exact(self):
        h = Hamiltonian.from_monomials([canonicalize([(1, 1), (1, -1)])])
        aa = kl.open_sites(h, kl.OpeningSpec.make([1], [Fraction(1, 10)]))
        assert aa.coeff((0,), (0,), (2,), ()) == GaussianRational(1)  # xi
        assert aa.coeff((0,), (1,), (0,), ()) == GaussianRational(1)  # y
        assert len(aa) == 2

    def test_action_squared_exact(self):
        h = Hamiltonian.from_monomials([canonicalize([(1, 1), (1, 1), (1, -1), (1, -1)])])
        aa = kl.open_sites(h, kl.OpeningSpec.make([1], [Fraction(1, 10)]))
        assert aa.coeff((0,), (0,), (4,), ()) == GaussianRational(1)
        assert aa.coeff((0,), (1,), (2,), ()) == GaussianRational(2)
        assert aa.coeff((0,), (2,), (0,), ()) == GaussianRational(1)
        assert len(aa) == 3

    def test_half_power_series(self):
        h = Hamiltonian.from_monomials(
            [
                canonicalize([(1, 1), (3, 1), (2, -1), (2, -1)]),
                canonicalize([(1, -1), (3, -1), (2, 1), (2, 1)]),
            ]
        )
        aa = kl.open_sites(h, kl.OpeningSpec.make([1], [Fraction(1, 10)], y_order=3))
        ext = canonicalize_pairs([(3, 1), (2, -1), (2, -1)])
        assert aa.coeff((1,), (0,), (1,), ext) == GaussianRational(1)
        assert aa.coeff((1,), (1,), (-1,), ext) == GaussianRational(Fraction(1, 2))
        assert aa.coeff((1,), (2,), (-3,), ext) == GaussianRational(Fraction(-1, 8))
        assert aa.coeff((1,), (3,), (-5,), ext) == GaussianRational(Fraction(1, 16))

    def test_conservation(self, opened_cubic):
        _, _, aa = opened_cubic
        for t in aa.terms():
            assert t.total_mass() == 0
            assert t.total_momentum() == 0

    def test_singular_xi(self):
        h = Hamiltonian.from_monomials(
            [
                canonicalize([(1, 1), (3, 1), (2, -1), (2, -1)]),
                canonicalize([(1, -1), (3, -1), (2, 1), (2, 1)]),
            ]
        )
        with pytest.raises(kl.SingularOpeningError):
            kl.open_sites(h, kl.OpeningSpec.make([1], [Fraction(0)]))

    def test_reclose_truncation_error_shrinks(self, rng):
        # states near the torus: error scales with the y/xi ratio per order
        H = nh.build_nls_hamiltonian(nh.NonlinearitySpec.cubic(), 3, 2)
        xi = {1: Fraction(1, 10)}
        delta = 0.15
        u = State.zeros(3)
        u[1] = math.sqrt(float(xi[1]) * (1 + delta)) * cmath.exp(0.3j)
        u[0] = 0.05
        u[-1] = 0.05 * cmath.exp(-0.7j)
        y = {1: abs(u[1]) ** 2 - float(xi[1])}
        th = {1: cmath.phase(u[1])}
        uext = u.copy()
        uext[1] = 0
        exact = evaluate(H, u)
        errs = []
        for order in (2, 3, 4, 5):
            aa = kl.open_sites(H, kl.OpeningSpec.make([1], xi, y_order=order))
            errs.append(abs(kl.evaluate_aa(aa, y, th, uext).real - exact))
        assert errs[-1] < errs[0]
        # truncated tail behaves like delta^(order+1)
        for a, b in zip(errs, errs[1:]):
            assert b < a * 0.5


class TestProjections:
    def test_integrable_example(self):
        spec = kl.OpeningSpec.make([1], [Fraction(1, 10)])
        aa = kl.AAHamiltonian(spec)
        ext = canonicalize_pairs([(3, 1), (3, -1)])
        aa._accumulate(((0,), (2,), (0,), ext, 0), GaussianRational(1))
        assert kl.project(aa, "int") == aa
        assert len(kl.project(aa, "ajet")) == 0

    def test_ajet_example(self):
        spec = kl.OpeningSpec.make([1], [Fraction(1, 10)])
        aa = kl.AAHamiltonian(spec)
        # e^{i theta_1} u_3 conj(u_2) conj(u_2): m = 0, q = 3, not integrable
        ext = canonicalize_pairs([(3, 1), (2, -1), (2, -1)])
        aa._accumulate(((1,), (0,), (1,), ext, 0), GaussianRational(1))
        assert kl.project(aa, "ajet") == aa
        assert len(kl.project(aa, "nor")) == 0

    def test_partition(self, opened_cubic):
        _, _, aa = opened_cubic
        parts = [kl.project(aa, cls) for cls in ("nor", "ajet", "rem")]
        assert sum(len(p) for p in parts) == len(aa)
        total = parts[0] + parts[1] + parts[2]
        assert total == aa

    def test_int_idempotent_and_disjoint_from_ajet(self, opened_cubic):
        _, _, aa = opened_cubic
        ii = kl.project(aa, "int")
        assert kl.project(ii, "int") == ii
        assert len(kl.project(ii, "ajet")) == 0

    def test_tbr_selector(self):
        spec = kl.OpeningSpec.make([0], [Fraction(1, 10)])
        aa = kl.AAHamiltonian(spec)
        at_new = canonicalize_pairs([(1, 1), (1, 1), (1, -1), (3, -1), (0, 1) if False else (2, 1)])
        # term with two factors at the new site 1 and two others
        ext1 = canonicalize_pairs([(1, 1), (1, -1), (3, 1), (3, -1)])
        aa._accumulate(((1,), (0,), (1,), canonicalize_pairs([(1, -1), (2, 1), (3, -1) ]), 0), GaussianRational(1))
        aa._accumulate(((0,), (0,), (0,), ext1, 0), GaussianRational(1))  # integrable
        tbr = kl.TbrParams(new_site=1, ext_degree_max=3, action_power_max=10)
        sel = kl.project(aa, "tbr", tbr)
        assert len(sel) == 1  # the integrable term is exempt
        (key, _), = sel.items()
        assert key[0] == (1,)

    def test_unknown_class(self, opened_cubic):
        _, _, aa = opened_cubic
        with pytest.raises(ValueError):
            kl.project(aa, "bogus")


class TestFrequencyMap:
    def test_reference_lambda_vanishes(self):
        spec = kl.OpeningSpec.make([0, 1], [Fraction(1, 8), Fraction(1, 16)])
        ref = kl.reference_opened_quadratic(spec, EPS, window=range(-4, 5))
        fm = kl.frequency_map(ref, EPS, window=range(-4, 5))
        for j in fm.covered():
            assert fm.lambda_poly[j] == {}
            assert abs(fm.decomposition_residual(j)) < 1e-12
        assert fm.omega(1) == pytest.approx(float(1 / EPS**2 + 2 * Fraction(1, 16)))

    def test_cubic_lambda_linear_in_xi(self):
        H = nh.build_nls_hamiltonian(nh.NonlinearitySpec.cubic(), 4, 2).rescale_amplitude(EPS)
        res = bk.birkhoff_normal_form(H, 4)
        aa = kl.open_sites(res.normal_form, kl.OpeningSpec.make([0], [Fraction(1, 8)]))
        fm = kl.frequency_map(aa, EPS, window=range(-4, 5))
        # derived by hand from the quartic normal form: site 0 sees -xi0/eps,
        # every exterior j sees +2 xi0/eps
        assert fm.lambda_poly[0] == {(1,): Fraction(-1) / EPS}
        for j in (-4, -1, 1, 2, 3, 4):
            assert fm.lambda_poly[j] == {(1,): Fraction(2) / EPS}

    def test_decomposition_exact(self, opened_cubic):
        H, spec, aa = opened_cubic
        fm = kl.frequency_map(aa, Fraction(1), window=range(-4, 5), base={j: j * j for j in range(-4, 5)})
        for j in fm.covered():
            assert abs(fm.decomposition_residual(j)) < 1e-12

    def test_mass_power_chain_rule(self):
        spec = kl.OpeningSpec.make([0], [Fraction(1, 8)])
        hm = Hamiltonian.from_monomials([Monomial((), 2, GaussianRational(Fraction(1, 2)))])
        aa = kl.open_sites(hm, spec)
        fm = kl.frequency_map(aa, Fraction(1), window=range(-2, 3), base={j: 0 for j in range(-2, 3)})
        assert fm.omega_poly[0] == {(1,): Fraction(2)}
        assert fm.omega_poly[1] == {(1,): Fraction(2)}


class TestLipschitzAndTwist:
    def test_zero_map(self):
        fm = kl.FrequencyMap.synthetic((1, 2), (1, 2, 3), base={1: 1, 2: 4, 3: 9})
        rep = kl.lambda_lipschitz_matrix(fm, h=1e-6)
        assert np.max(rep.matrix) == 0
        assert kl.twist_margin(rep.matrix) == 0.0
        assert kl.twist_check(rep.matrix, 0.1)[1]

    def test_schemes_agree_to_first_order(self):
        lam = {1: {(1, 0): Fraction(3), (0, 2): Fraction(5)}, 2: {(1, 1): Fraction(2)}}
        fm = kl.FrequencyMap.synthetic(
            (1, 2), (1, 2), base={1: 1, 2: 4}, xi=(Fraction(1, 8), Fraction(1, 8)), lambda_poly=lam
        )
        h = 1e-4
        central = kl.lambda_lipschitz_matrix(fm, h=h, scheme="central")
        forward = kl.lambda_lipschitz_matrix(fm, h=h, scheme="forward")
        assert np.max(np.abs(central.matrix - forward.matrix)) < 10 * h
        assert central.max_fd_error < 1e-9

    def test_exact_derivative_oracle(self):
        H = nh.build_nls_hamiltonian(nh.NonlinearitySpec.cubic(), 4, 2).rescale_amplitude(EPS)
        res = bk.birkhoff_normal_form(H, 4)
        aa = kl.open_sites(res.normal_form, kl.OpeningSpec.make([0], [Fraction(1, 8)]))
        fm = kl.frequency_map(aa, EPS, window=range(-4, 5))
        rep = kl.lambda_lipschitz_matrix(fm, h=1e-6)
        assert rep.max_fd_error < 1e-5
        assert np.allclose(rep.matrix, rep.exact, atol=1e-5)

    def test_identity_pattern_margin(self):
        assert kl.twist_margin(np.eye(5)) == 1.0

    def test_margin_monotone_in_rows(self):
        m = np.abs(np.random.default_rng(0).normal(size=(4, 3)))
        assert kl.twist_margin(m[:3]) <= kl.twist_margin(m)


class TestSmallDivisors:
    @pytest.fixture(scope="class")
    def diag_map(self):
        return kl.FrequencyMap.synthetic((1, 2), (1, 2), base={1: 5, 2: 5}, eps=1)

    def _cfg(self, fm, gamma, samples=30000):
        return kl.SamplingConfig(
            sites=(1, 2),
            xi_min=0.05,
            xi_max=0.15,
            freq_map=fm,
            d=0,
            k_box=2,
            gamma=gamma,
            r=0.5,
            nu=0.75,
            samples=samples,
            seed=11,
        )

    def test_gamma_zero(self, diag_map):
        rep = kl.small_divisor_bad_measure(self._cfg(diag_map, 0.0))
        assert rep.bad_fraction == 0.0

    def test_monotone_and_linear(self, diag_map):
        fr = [
            kl.small_divisor_bad_measure(self._cfg(diag_map, g)).bad_fraction
            for g in (0.01, 0.02, 0.04)
        ]
        assert fr[0] <= fr[1] <= fr[2]
        slope = (math.log(fr[2]) - math.log(fr[0])) / math.log(4)
        assert 0.5 <= slope <= 2.0

    def test_deterministic(self, diag_map):
        a = kl.small_divisor_bad_measure(self._cfg(diag_map, 0.02))
        b = kl.small_divisor_bad_measure(self._cfg(diag_map, 0.02))
        assert a.to_dict() == b.to_dict()

    def test_zero_samples_rejected(self, diag_map):
        with pytest.raises(ValueError):
            kl.small_divisor_bad_measure(self._cfg(diag_map, 0.1, samples=0))

    def test_exterior_modes(self, diag_map):
        cfg = kl.SamplingConfig(
            sites=(1, 2),
            xi_min=0.05,
            xi_max=0.15,
            freq_map=kl.FrequencyMap.synthetic((1, 2), (1, 2, 3, 4), base={1: 5, 2: 5, 3: 9, 4: 16}),
            d=1,
            k_box=1,
            ext_modes=(3, 4),
            gamma=1e-3,
            samples=2000,
            seed=4,
        )
        rep = kl.small_divisor_bad_measure(cfg)
        assert rep.combos > 8  # exterior combinations enumerated


class TestSparsity:
    def test_singleton(self):
        b = math.sqrt(2.0)
        expected = max(min(1.0, b**4 / b, b**4 / b), 1 / b)
        assert kl.sparsity_functional([1]) == pytest.approx(expected, rel=1e-12)

    def test_doubly_exponential_increments_shrink(self):
        seq = [2 ** (2**p) for p in range(1, 9)]
        trend = kl.sparsity_trend(seq, range(1, 9))
        inc = [b[1] - a[1] for a, b in zip(trend, trend[1:])]
        assert inc[-1] < 0.01
        assert inc[-1] < inc[-2] < inc[-3]

    def test_arithmetic_grows(self):
        trend = kl.sparsity_trend(list(range(1, 201)), [10, 50, 100, 200])
        values = [v for _, v in trend]
        assert values == sorted(values)
        assert values[-1] > 2 * values[0]

    def test_requires_increasing_moduli(self):
        with pytest.raises(ValueError):
            kl.sparsity_functional([3, 2, 5])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            kl.sparsity_functional([])


class TestActionAngleBracket:
    def test_divisor_relation(self):
        spec = kl.OpeningSpec.make([0], [Fraction(1, 8)])
        ref = kl.aa_to_numeric(kl.reference_opened_quadratic(spec, EPS, window=range(-4, 5)))
        fm = kl.frequency_map(
            kl.reference_opened_quadratic(spec, EPS, window=range(-4, 5)), EPS, range(-4, 5)
        )
        mono_key = ((2,), (0,), (0,), canonicalize_pairs([(1, -1), (2, 1), (3, -1)]), 0)
        one = kl.AAHamiltonian(spec)
        one._accumulate(mono_key, 1.0 + 0j)
        br = kl.aa_poisson_bracket(ref, one)
        D = 2 * fm.omega(0) + (-fm.omega(1) + fm.omega(2) - fm.omega(3))
        ((key, c),) = list(br.items())
        assert key == mono_key
        assert c == pytest.approx(1j * D, rel=1e-12)

    def test_one_loop_precondition_open_project(self):
        r = Fraction(1, 10)
        H = nh.build_nls_hamiltonian(nh.NonlinearitySpec.cubic(), 4, 2).rescale_amplitude(EPS)
        nf = bk.birkhoff_normal_form(H, 4).normal_form
        spec1 = kl.OpeningSpec.make([0], [Fraction(1, 25)], y_order=2, r=r)
        aa1 = kl.open_sites(nf, spec1)
        fm = kl.frequency_map(aa1, EPS, window=range(-4, 5))
        tbr = kl.TbrParams(new_site=1, ext_degree_max=3, action_power_max=100)
        aa2, chi, rep = kl.aa_bnf_step(aa1, fm, tbr, degree_cap=4, r=float(r))
        assert rep["removed"] > 0
        assert rep["tbrMajorantAfter"] < rep["tbrMajorantBefore"] / 5
        # open the new site on the preconditioned Hamiltonian and project
        aa3 = kl.open_sites(aa2, kl.OpeningSpec.make([1], [Fraction(1, 25)], y_order=2, r=r))
        assert aa3.spec.sites == (0, 1)
        parts = [kl.project(aa3, cls) for cls in ("nor", "ajet", "rem")]
        assert sum(len(p) for p in parts) == len(aa3)
        for t in aa3.terms():
            assert t.total_mass() == 0
            assert t.total_momentum() == 0

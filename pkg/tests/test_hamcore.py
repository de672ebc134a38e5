import json
from fractions import Fraction

import numpy as np
import pytest

from nlskam.hamcore import (
    CutoffError,
    GaussianRational,
    Hamiltonian,
    InvariantError,
    Monomial,
    State,
    canonicalize,
    canonicalize_pairs,
    evaluate,
    gradient,
    gradient_split,
    insert,
    l2_gradient,
    majorant_norm,
    poisson_bracket,
)
from nlskam import birkhoff as bk
from nlskam import dynamics as dy
from nlskam import nlsham as nh

from conftest import random_real_hamiltonian


def fd_gradient(h, state, step=1e-6):
    """Central finite differences of evaluate: equals the real L2 gradient."""
    out = np.zeros_like(state.data)
    K = state.cutoff
    for k in range(-K, K + 1):
        up, dn = state.copy(), state.copy()
        up[k] += step
        dn[k] -= step
        re = (evaluate(h, up) - evaluate(h, dn)) / (2 * step)
        up, dn = state.copy(), state.copy()
        up[k] += 1j * step
        dn[k] -= 1j * step
        im = (evaluate(h, up) - evaluate(h, dn)) / (2 * step)
        out[k + K] = re + 1j * im
    return out


class TestCanonicalize:
    def test_sorting_example(self):
        m = canonicalize([(-2, 1), (3, 1), (3, -1), (-2, -1)])
        assert m.pairs == ((3, 1), (3, -1), (-2, 1), (-2, -1))

    def test_idempotent(self, rng):
        for _ in range(50):
            raw = [
                (int(rng.integers(-6, 7)), int(rng.choice([-1, 1])))
                for _ in range(int(rng.integers(0, 7)))
            ]
            once = canonicalize_pairs(raw)
            assert canonicalize_pairs(once) == once

    def test_permutation_invariance(self, rng):
        raw = [(3, 1), (-1, -1), (0, 1), (3, -1), (-1, 1)]
        ref = canonicalize_pairs(raw)
        for _ in range(10):
            perm = list(raw)
            rng.shuffle(perm)
            assert canonicalize_pairs(perm) == ref


class TestInsert:
    def test_cancellation(self):
        h = Hamiltonian()
        m = canonicalize([(1, 1), (1, -1)], coeff=Fraction(2, 3))
        h1 = insert(h, m)
        h2 = insert(h1, -m)
        assert h2 == h and len(h2) == 0

    def test_momentum_violation_rejected(self):
        with pytest.raises(InvariantError):
            insert(Hamiltonian(), canonicalize([(1, 1), (2, -1)]))

    def test_mass_violation_rejected(self):
        with pytest.raises(InvariantError):
            insert(Hamiltonian(), canonicalize([(1, 1), (1, 1), (-2, 1), (0, -1)]))

    def test_double_insert_doubles(self):
        m = canonicalize([(2, 1), (2, -1)], coeff=Fraction(1, 2))
        h = insert(insert(Hamiltonian(), m), m)
        assert h.coeff([(2, 1), (2, -1)]) == GaussianRational(1)


class TestEvaluate:
    def test_z2_single_mode(self):
        z2 = nh.kinetic_hamiltonian(4)
        assert evaluate(z2, State.from_modes(4, {1: 1.0})) == pytest.approx(0.5, abs=1e-15)

    def test_mass_power_term(self):
        h = Hamiltonian.from_monomials([Monomial((), 1, GaussianRational(1))])
        st = State.from_modes(4, {0: 2.0})
        assert evaluate(h, st) == pytest.approx(4.0, abs=1e-13)

    def test_mode_outside_cutoff(self):
        h = Hamiltonian.from_monomials([canonicalize([(5, 1), (5, -1)])])
        with pytest.raises(CutoffError):
            evaluate(h, State.zeros(4))

    def test_quadrature_oracle_l4(self, rng):
        # evaluate(expand_lp_norm(2, K)) equals the grid mean of |u|^4
        K = 8
        l4 = nh.expand_lp_norm(2, K)
        for _ in range(5):
            u = State.random(K, rng, norm=0.8)
            N = 64
            buf = np.zeros(N, dtype=complex)
            for k in range(-K, K + 1):
                buf[k % N] = u[k]
            grid = np.fft.fft(buf)
            quad = float(np.mean(np.abs(grid) ** 4))
            assert evaluate(l4, u) == pytest.approx(quad, rel=1e-10)


class TestGradient:
    def test_single_action(self, rng):
        h = Hamiltonian.from_monomials([canonicalize([(1, 1), (1, -1)])])
        u = State.random(4, rng, norm=0.7)
        g = gradient(h, u)
        assert g[4 + 1] == pytest.approx(u[1], abs=1e-15)
        g[4 + 1] = 0
        assert np.max(np.abs(g)) == 0

    def test_finite_difference_random(self, rng):
        for _ in range(5):
            h = random_real_hamiltonian(rng, K=3, n_terms=5, mass_max=1)
            u = State.random(3, rng, norm=0.9)
            fd = fd_gradient(h, u)
            full = l2_gradient(h, u)
            scale = max(np.max(np.abs(full)), 1e-9)
            assert np.max(np.abs(fd - full)) / scale < 1e-6

    def test_split_recombination(self, rng):
        h = random_real_hamiltonian(rng, K=3, n_terms=5, mass_max=2)
        u = State.random(3, rng, norm=0.9)
        mu, v = gradient_split(h, u)
        assert np.max(np.abs(mu * u.data + v - gradient(h, u))) < 1e-12

    def test_mass_squared_split(self):
        h = Hamiltonian.from_monomials([Monomial((), 2, GaussianRational(1))])
        u = State.from_modes(4, {0: 1.0, 2: 1.0})
        mu, v = gradient_split(h, u)
        assert mu == pytest.approx(2 * u.mass, abs=1e-12)
        assert np.max(np.abs(v)) == 0


class TestPoissonBracket:
    def test_self_bracket_zero(self, rng):
        for _ in range(5):
            a = random_real_hamiltonian(rng, K=3, n_terms=4)
            assert len(poisson_bracket(a, a)) == 0

    def test_mass_is_central(self, rng):
        mass = nh.newton_sum(1, 4)
        m = random_real_hamiltonian(rng, K=4, n_terms=4, mass_max=1)
        assert len(poisson_bracket(mass, m)) == 0

    def test_antisymmetry(self, rng):
        a = random_real_hamiltonian(rng, K=3, n_terms=4)
        b = random_real_hamiltonian(rng, K=3, n_terms=4)
        assert poisson_bracket(a, b) == poisson_bracket(b, a).scale(-1)

    def test_jacobi_exact(self, rng):
        for _ in range(3):
            a = random_real_hamiltonian(rng, K=3, n_terms=3, max_q=2)
            b = random_real_hamiltonian(rng, K=3, n_terms=3, max_q=2)
            c = random_real_hamiltonian(rng, K=3, n_terms=3, max_q=2)
            total = (
                poisson_bracket(a, poisson_bracket(b, c))
                + poisson_bracket(b, poisson_bracket(c, a))
                + poisson_bracket(c, poisson_bracket(a, b))
            )
            assert len(total) == 0

    def test_divisor_relation(self, rng):
        # {Z2, m} = i Omega m, exact in rational arithmetic
        z2 = nh.kinetic_hamiltonian(6)
        for _ in range(20):
            h = random_real_hamiltonian(rng, K=6, n_terms=1, max_q=3, real_coeffs=True)
            for mono in h.terms():
                br = poisson_bracket(z2, Hamiltonian.from_monomials([mono]))
                omega = bk.divisor(mono)
                if omega == 0:
                    assert len(br) == 0
                else:
                    assert dict(br.items()) == {
                        mono.key(): mono.coeff * GaussianRational(0, omega)
                    }

    def test_bracket_real_valued(self, rng):
        a = random_real_hamiltonian(rng, K=3, n_terms=4)
        b = random_real_hamiltonian(rng, K=3, n_terms=4)
        assert poisson_bracket(a, b).is_real()

    def test_leibniz_along_flow(self, rng, H_cubic_K4):
        # dF/dt along the flow of H equals {F, H}, via a 5-point stencil
        F = Hamiltonian.from_monomials([canonicalize([(2, 1), (2, -1)])])
        FH = poisson_bracket(F, H_cubic_K4)
        u0 = State.random(4, rng, norm=0.6)
        dt = 5e-4
        traj = dy.integrate_field(
            dy.hamiltonian_vector_field(H_cubic_K4), u0, dt, 60 * dt, store_every=1
        )
        vals = np.array([evaluate(F, traj.state(i)) for i in range(len(traj))])
        for mid in (10, 25, 40):
            deriv = (
                -vals[mid + 2] + 8 * vals[mid + 1] - 8 * vals[mid - 1] + vals[mid - 2]
            ) / (12 * dt)
            pred = evaluate(FH, traj.state(mid))
            assert deriv == pytest.approx(pred, rel=1e-5, abs=1e-12)

    def test_truncation_metadata(self, rng):
        a = random_real_hamiltonian(rng, K=3, n_terms=4, max_q=2)
        b = random_real_hamiltonian(rng, K=3, n_terms=4, max_q=2)
        out = poisson_bracket(a, b, degree_bound=2)
        assert all(len(p) + 2 * n <= 2 for p, n in dict(out.items()))
        if len(a) and len(b):
            assert out.meta.get("truncated_terms", 0) > 0


class TestMajorant:
    def test_single_term(self):
        h = Hamiltonian.from_monomials([canonicalize([(1, 1), (1, -1)], coeff=2)])
        assert majorant_norm(h) == pytest.approx(2.0)

    def test_triangle(self, rng):
        a = random_real_hamiltonian(rng, K=3, n_terms=4)
        b = random_real_hamiltonian(rng, K=3, n_terms=4)
        assert majorant_norm(a + b) <= majorant_norm(a) + majorant_norm(b) + 1e-12

    def test_subset_monotone(self, rng):
        h = random_real_hamiltonian(rng, K=3, n_terms=6)
        sub = h.filter(lambda t: t.degree <= 2)
        assert majorant_norm(sub) <= majorant_norm(h) + 1e-12

    def test_rejects_bad_weight(self):
        h = Hamiltonian.from_monomials([canonicalize([(1, 1), (1, -1)])])
        with pytest.raises(ValueError):
            majorant_norm(h, weight=lambda m: 0.0)


class TestSerialization:
    def test_roundtrip_real(self, H_cubic_K4):
        assert Hamiltonian.from_json(H_cubic_K4.to_json()) == H_cubic_K4

    def test_roundtrip_complex(self):
        h = Hamiltonian.from_monomials(
            [
                canonicalize(
                    [(2, 1), (1, -1), (1, -1), (0, 1)],
                    1,
                    GaussianRational(Fraction(1, 3), Fraction(-2, 7)),
                )
            ]
        )
        assert Hamiltonian.from_json(h.to_json()) == h

    def test_documented_format(self):
        h = Hamiltonian.from_monomials([canonicalize([(1, 1), (1, -1)], coeff=Fraction(1, 2))])
        d = json.loads(h.to_json())
        assert d["terms"] == [
            {"pairs": [[1, 1], [1, -1]], "massPower": 0, "coeff": "1/2"}
        ]


class TestInvariants:
    def test_all_paths_conserve(self, rng, H_cubic_K4):
        # construction, sums, scalings and brackets keep mass/momentum zero
        a = random_real_hamiltonian(rng, K=4, n_terms=5, mass_max=1)
        for h in (a, a + H_cubic_K4, a.scale(Fraction(3, 7)), poisson_bracket(a, H_cubic_K4)):
            for mono in h.terms():
                mono.validate()

    def test_expand_mass_matches_numerically(self, rng):
        h = random_real_hamiltonian(rng, K=3, n_terms=4, mass_max=2)
        he = h.expand_mass(3)
        for _ in range(3):
            u = State.random(3, rng, norm=0.7)
            assert evaluate(h, u) == pytest.approx(evaluate(he, u), rel=1e-12, abs=1e-12)

import numpy as np
import pytest
from fractions import Fraction

from nlskam.hamcore import GaussianRational, Hamiltonian, canonicalize, insert
from nlskam import nlsham as nh
from nlskam import birkhoff as bk


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_real_hamiltonian(rng, K=4, n_terms=6, max_q=2, mass_max=1, real_coeffs=False):
    """Random conjugation-closed Hamiltonian (real-valued evaluation)."""
    h = Hamiltonian()
    tries = 0
    while len(h) < n_terms and tries < 400:
        tries += 1
        q = int(rng.integers(1, max_q + 1))
        plus = [int(rng.integers(-K, K + 1)) for _ in range(q)]
        minus = [int(rng.integers(-K, K + 1)) for _ in range(q - 1)]
        last = sum(plus) - sum(minus)
        if abs(last) > K:
            continue
        minus.append(last)
        n = int(rng.integers(0, mass_max + 1))
        re = Fraction(int(rng.integers(-9, 10)), int(rng.integers(1, 7)))
        im = Fraction(0) if real_coeffs else Fraction(
            int(rng.integers(-9, 10)), int(rng.integers(1, 7))
        )
        c = GaussianRational(re, im)
        if not c:
            continue
        mono = canonicalize([(v, 1) for v in plus] + [(v, -1) for v in minus], n, c)
        h = insert(h, mono)
        h = insert(h, mono.conjugate())
    return h


@pytest.fixture
def make_random_hamiltonian():
    return random_real_hamiltonian


@pytest.fixture(scope="session")
def cubic():
    return nh.NonlinearitySpec.cubic()


@pytest.fixture(scope="session")
def H_cubic_K4(cubic):
    return nh.build_nls_hamiltonian(cubic, 4, 2)


@pytest.fixture(scope="session")
def nf4_K4(H_cubic_K4):
    return bk.birkhoff_normal_form(H_cubic_K4, 4)

import numpy as np
import pytest

from stlesim.noise import build_spectrum
from stlesim.spectral import Lattice, SpectralField


def random_hermitian(dim, radius, rng, ncomp=1, density=1.0):
    """Random Hermitian-symmetric field on |k| <= radius."""
    lat = Lattice(dim, radius)
    vals = np.zeros((len(lat), ncomp), complex)
    for i, k in enumerate(lat.modes):
        j = lat.neg[i]
        if i > j or (rng.random() > density and i != j):
            continue
        if i == j:
            vals[i] = rng.normal(size=ncomp)
        else:
            v = rng.normal(size=ncomp) + 1j * rng.normal(size=ncomp)
            vals[i] = v
            vals[j] = np.conj(v)
    return SpectralField.from_lattice(lat, vals)


def cos_pair(dim, k, amp=1.0):
    """Coefficients of ``amp * cos(k.x)``."""
    k = tuple(k)
    return SpectralField.from_dict(dim, {k: amp / 2, tuple(-c for c in k): amp / 2})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def shell2d():
    """theta = 1 on the four modes |k| = 1 in d=2 (c = 2)."""
    return build_spectrum("shell_indicator", {"alpha": 1.0}, 2, 1)


@pytest.fixture
def shell3d():
    return build_spectrum("shell_indicator", {"alpha": 1.0}, 3, 1)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_report(request):
    """Record ``(number, passed, detail)`` for the end-of-run summary."""
    store = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, passed, detail):
        store[number] = (bool(passed), detail)
        print(f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store, key=lambda n: (int(str(n).rstrip("ab")), str(n))):
        passed, detail = store[number]
        terminalreporter.write_line(f"CRITERION {str(number):>2}: {'PASS' if passed else 'FAIL'}  {detail}")

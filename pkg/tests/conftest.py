import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "qmpc", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("qmpc")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_density(rng, n, rank=None):
    k = n if rank is None else rank
    a = random_complex(rng, n, k)
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


def random_pure(rng, n):
    psi = random_complex(rng, n)
    psi /= np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


# one verdict line per acceptance criterion, echoed after the run
CRITERIA: dict = {}


@pytest.fixture(scope="session")
def criteria():
    return CRITERIA


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.linalg import expm

from doubleswitch.continuation import parse_r_path, sweep
from doubleswitch.families import make_nominal

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

# linear3d data, repeated here so the oracles below do not go through the package
A3 = np.diag([0.1, -0.2, 0.3])
C3 = np.array([0.0, -0.4, 0.0])
B1 = np.array([1.0, 0.7, 0.9])
B2 = np.array([-1.0, 1.0, 0.5])
D3 = np.array([1.0, 0.0, 0.0])


def affine_step(A, x, v, h):
    """Exact flow of ``x' = A x + v`` over time ``h`` via an augmented exponential."""
    n = A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A
    M[:n, n] = v
    E = expm(M * h)
    return E[:n, :n] @ x + E[:n, n]


def linear_bang_endpoint(r, s1, s2, T, x0=np.zeros(3), A=A3, c=C3, b1=B1, b2=B2, d=D3):
    cuts = sorted({0.0, min(s1, T), min(s2, T), T})
    x = np.asarray(x0, float)
    for a, b in zip(cuts[:-1], cuts[1:]):
        m = 0.5 * (a + b)
        u1 = 1.0 if m > s1 else -1.0
        u2 = 1.0 if m > s2 else -1.0
        x = affine_step(A, x, c + r * d + u1 * b1 + u2 * b2, b - a)
    return x


@pytest.fixture(scope="session")
def linear3d():
    return make_nominal("linear3d")


@pytest.fixture(scope="session")
def linear3d_sweep(linear3d):
    sys, bounds, ext = linear3d
    return sweep(sys, bounds, parse_r_path("0:0.1:20"), ext)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance():
    """Collects ``(criterion, passed, detail)`` lines for the terminal summary."""

    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip()
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)

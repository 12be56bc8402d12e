import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm

from doubleswitch.errors import IntegrationFailure
from doubleswitch.fields import CotangentPoint, VectorField, constant_field, hamiltonian, linear_field
from doubleswitch.flows import (adjoint_pullback, export_trajectory_csv, integrate_flow, integrate_hamiltonian,
                                integrate_piecewise, pullback_field, symplectic_matrix)

small = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=small)
mat3 = arrays(np.float64, (3, 3), elements=small)


def pendulum_like():
    # x1' = x2, x2' = -sin(x1) + 0.3 x3, x3' = 0.1 x1 x2
    def f(x):
        return np.array([x[1], -np.sin(x[0]) + 0.3 * x[2], 0.1 * x[0] * x[1]])

    def J(x):
        return np.array([[0.0, 1.0, 0.0], [-np.cos(x[0]), 0.0, 0.3], [0.1 * x[1], 0.1 * x[0], 0.0]])

    def H(x):
        h = np.zeros((3, 3, 3))
        h[1, 0, 0] = np.sin(x[0])
        h[2, 0, 1] = h[2, 1, 0] = 0.1
        return h

    return VectorField(f, J, H, dim=3, name="pend")


@given(mat3, vec3, st.floats(0.05, 1.5))
def test_linear_flow_matches_matrix_exponential(A, x0, t):
    seg = integrate_flow(linear_field(A), x0, 0.0, t)
    E = expm(A * t)
    assert np.allclose(seg.x1, E @ x0, atol=1e-9)
    assert np.allclose(seg.monodromy, E, atol=1e-9)


def test_zero_length_flow_is_identity():
    seg = integrate_flow(pendulum_like(), [0.1, 0.2, 0.3], 0.5, 0.5, second_order=True)
    assert np.array_equal(seg.x1, seg.x0)
    assert np.array_equal(seg.monodromy, np.eye(3))
    assert np.array_equal(seg.second, np.zeros((3, 3, 3)))


def test_backward_flow_inverts_forward():
    f = pendulum_like()
    x0 = np.array([0.4, -0.3, 0.2])
    fwd = integrate_flow(f, x0, 0.0, 1.3)
    back = integrate_flow(f, fwd.x1, 1.3, 0.0)
    assert np.allclose(back.x1, x0, atol=1e-9)
    assert np.allclose(back.monodromy @ fwd.monodromy, np.eye(3), atol=1e-8)


def test_monodromy_matches_finite_differences():
    f = pendulum_like()
    x0 = np.array([0.4, -0.3, 0.2])
    seg = integrate_flow(f, x0, 0.0, 1.0)
    h = 1e-6
    M = np.column_stack([(integrate_flow(f, x0 + h * e, 0, 1, monodromy=False).x1
                          - integrate_flow(f, x0 - h * e, 0, 1, monodromy=False).x1) / (2 * h)
                         for e in np.eye(3)])
    assert np.allclose(seg.monodromy, M, atol=1e-6)


def test_second_order_flow_matches_finite_differences():
    f = pendulum_like()
    x0 = np.array([0.4, -0.3, 0.2])
    seg = integrate_flow(f, x0, 0.0, 1.0, second_order=True)
    h = 1e-5
    Z = np.stack([(integrate_flow(f, x0 + h * e, 0, 1).monodromy
                   - integrate_flow(f, x0 - h * e, 0, 1).monodromy) / (2 * h) for e in np.eye(3)], axis=2)
    assert np.allclose(seg.second, Z, atol=1e-5)


def test_concatenation_multiplies_monodromies():
    A, B = np.array([[0, 1, 0], [-1, 0, 0], [0, 0, 0.2]]), np.diag([0.1, -0.3, 0.5])
    x0 = np.array([1.0, 0.0, -1.0])
    pw = integrate_piecewise([linear_field(A), linear_field(B)], [0.0, 0.7, 1.5], x0)
    expected = expm(B * 0.8) @ expm(A * 0.7)
    assert np.allclose(pw.monodromy, expected, atol=1e-9)
    assert np.allclose(pw.x1, expected @ x0, atol=1e-9)
    assert np.allclose(pw.state(0.7), expm(A * 0.7) @ x0, atol=1e-8)
    assert pw.breakpoints == [0.0, 0.7, 1.5]


def test_piecewise_requires_matching_breakpoints():
    with pytest.raises(ValueError):
        integrate_piecewise([linear_field(np.eye(2))], [0.0, 1.0, 2.0], np.zeros(2))


def test_integration_failure_on_blowup():
    f = VectorField(lambda x: x ** 2, lambda x: np.diag(2 * x), dim=1)
    with pytest.raises(IntegrationFailure) as exc:
        integrate_flow(f, [1.0], 0.0, 2.0)
    assert exc.value.last_time is not None and exc.value.last_time < 2.0


def test_dense_state_interpolation():
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    seg = integrate_flow(linear_field(A), [1.0, 0.0], 0.0, 2.0)
    ts = np.linspace(0, 2, 7)
    assert np.allclose(seg.state(ts), np.array([[np.cos(t), -np.sin(t)] for t in ts]), atol=1e-8)


@settings(max_examples=10)
@given(vec3, vec3, st.floats(0.1, 1.2))
def test_hamiltonian_flow_is_symplectic_and_conserves(p0, x0, t):
    f = pendulum_like()
    seg = integrate_hamiltonian(f, CotangentPoint(p0, x0), 0.0, t)
    J = symplectic_matrix(3)
    M = seg.monodromy
    assert np.max(np.abs(M.T @ J @ M - J)) <= 1e-7
    assert abs(hamiltonian(seg.ell1, f) - hamiltonian(seg.ell0, f)) <= 1e-9


def test_hamiltonian_linear_oracle():
    A = np.array([[0.1, 0.2, 0.0], [0.0, -0.3, 0.4], [0.5, 0.0, 0.2]])
    b = np.array([1.0, -0.5, 0.3])
    p0, x0, t = np.array([0.3, -1.0, 0.6]), np.array([0.2, 0.1, -0.4]), 0.9
    seg = integrate_hamiltonian(linear_field(A, b), CotangentPoint(p0, x0), 0.0, t)
    E = expm(A * t)
    assert np.allclose(seg.ell1.p, np.linalg.solve(E.T, p0), atol=1e-10)
    assert np.allclose(seg.ell1.x, E @ x0 + np.linalg.solve(A, (E - np.eye(3)) @ b), atol=1e-10)


def test_pullback_of_constant_field_along_linear_flow():
    A = np.array([[0.1, 0.2, 0.0], [0.0, -0.3, 0.4], [0.5, 0.0, 0.2]])
    b = np.array([1.0, 2.0, -1.0])
    tau = 0.8
    flow = integrate_flow(linear_field(A), np.array([0.3, 0.0, 0.1]), 0.0, tau, second_order=True)
    g = pullback_field(flow, constant_field(b))
    expected = expm(-tau * A) @ b
    for x in (flow.x0, np.array([1.0, -1.0, 0.5])):
        assert np.allclose(g(x), expected, atol=1e-9)
        assert np.allclose(g.jacobian(x), 0.0, atol=1e-8)


def test_pullback_jacobian_matches_finite_differences():
    f = pendulum_like()
    flow = integrate_flow(f, np.array([0.2, 0.1, -0.1]), 0.0, 0.6, second_order=True)
    g = pullback_field(flow, linear_field(np.diag([1.0, 2.0, 0.5]), np.ones(3)))
    x = flow.x0
    h = 1e-6
    fd = np.column_stack([(g(x + h * e) - g(x - h * e)) / (2 * h) for e in np.eye(3)])
    assert np.allclose(g.jacobian(x), fd, atol=1e-6)


def test_pullback_along_zero_length_flow_is_identity():
    g = constant_field([1.0, 2.0])
    flow = integrate_flow(linear_field(np.eye(2)), np.zeros(2), 1.0, 1.0)
    assert pullback_field(flow, g) is g


@given(vec3)
def test_adjoint_round_trip(p):
    f = pendulum_like()
    x0 = np.array([0.3, 0.2, -0.5])
    fwd = integrate_flow(f, x0, 0.0, 0.9)
    back = integrate_flow(f, fwd.x1, 0.9, 0.0)
    q = adjoint_pullback(fwd, p)
    assert np.allclose(adjoint_pullback(back, q), p, atol=1e-8)
    # pairing with tangent vectors is preserved
    v = np.array([1.0, -2.0, 0.5])
    assert q @ (fwd.monodromy @ v) == pytest.approx(p @ v, abs=1e-9)


def test_adjoint_matches_hamiltonian_covector():
    f = pendulum_like()
    ell0 = CotangentPoint([0.5, -0.2, 0.1], [0.3, 0.2, -0.5])
    seg = integrate_hamiltonian(f, ell0, 0.0, 1.1)
    flow = integrate_flow(f, ell0.x, 0.0, 1.1)
    assert np.allclose(adjoint_pullback(flow, ell0.p), seg.ell1.p, atol=1e-9)


def test_trajectory_csv_export(tmp_path):
    path = tmp_path / "traj.csv"
    export_trajectory_csv(path, [0.0, 0.5], [[1.0, 2.0], [3.0, 1 / 3]], [[0.1, 0.2], [0.3, 0.4]])
    rows = path.read_text().splitlines()
    assert rows[0] == "t,x1,x2,p1,p2"
    assert float(rows[2].split(",")[2]) == 1 / 3

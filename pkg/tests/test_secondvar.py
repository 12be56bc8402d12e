import dataclasses
import json

import numpy as np
import pytest
from scipy.linalg import expm, null_space
from scipy.stats import ortho_group

from conftest import A3, B1, B2, C3
from doubleswitch.boundary import RHO_LADDER
from doubleswitch.families import make_nominal
from doubleswitch.fields import derived_field, lie_bracket
from doubleswitch.secondvar import (QuadraticFormReport, analyze, assemble_form, build_frame, coercivity_test,
                                    constraint_space, evaluate_form_direct, initial_penalty)

# e^{-A} h(x_d) for linear3d, frozen from the matrix exponential
PULLBACKS = {
    "g1": [0.0, -2.1, -1.4],
    "g2": [0.0, 2.05276938, 0.67429102],
    "j1": [1.80967484, -0.39003614, -0.0665272],
    "j2": [-1.80967484, 0.34280552, -0.65918178],
}


@pytest.fixture(scope="module")
def lin_frame(linear3d):
    return build_frame(linear3d.sys, linear3d.ext, linear3d.bounds)


@pytest.fixture(scope="module")
def nl():
    fx = make_nominal("nonlinear3d")
    return fx, build_frame(fx.sys, fx.ext, fx.bounds)


def test_pullbacks_match_matrix_exponential(linear3d, lin_frame):
    xd = linear3d.info["x_switch"]
    E = expm(-A3)
    h = {"g1": A3 @ xd + C3 - B1 - B2, "g2": A3 @ xd + C3 + B1 + B2,
         "j1": A3 @ xd + C3 + B1 - B2, "j2": A3 @ xd + C3 - B1 + B2}
    for k, v in h.items():
        assert np.allclose(lin_frame.values[k], E @ v, atol=1e-9)
        assert np.allclose(lin_frame.values[k], PULLBACKS[k], atol=1e-7)


def test_zero_switch_time_gives_identity_pullback(linear3d):
    sys, bounds, ext = linear3d
    frame = build_frame(sys, ext, bounds, tau=0.0)
    x0 = ext.ell0.x
    r = ext.param(sys)
    for key, tag in (("g1", "H1"), ("g2", "H2"), ("j1", "K1"), ("j2", "K2")):
        assert np.array_equal(frame.values[key], derived_field(sys, r, tag)(x0))


@pytest.mark.parametrize("which", ["lin", "nl"])
def test_frame_identities(which, lin_frame, nl):
    frame = lin_frame if which == "lin" else nl[1]
    v = frame.values
    lhs, rhs = v["g2"] - v["g1"], v["j1"] + v["j2"] - 2 * v["g1"]
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(lhs)
    # the transported covector pairs to 1 with every pulled-back arc field
    for k in ("g1", "g2", "j1", "j2"):
        assert frame.p0 @ v[k] == pytest.approx(1.0, abs=1e-8)
    assert np.linalg.norm(frame.beta_grad + frame.p0) <= 1e-8


def test_matrix_symmetric_and_zero_field_block(lin_frame):
    alpha = initial_penalty(lin_frame, 3.0)
    rep = assemble_form(lin_frame, alpha, 1)
    assert np.max(np.abs(rep.matrix - rep.matrix.T)) <= 1e-12
    zero = dataclasses.replace(lin_frame, values={k: np.zeros(3) for k in lin_frame.values},
                               jacobians={k: np.zeros((3, 3)) for k in lin_frame.jacobians})
    M = assemble_form(zero, alpha, 1).matrix
    expected = np.zeros((6, 6))
    expected[:3, :3] = alpha.hessian(zero.x0) + zero.beta_hess
    assert np.allclose(M, expected, atol=1e-14)


@pytest.mark.parametrize("nu", [1, 2])
def test_single_coefficient_value(nl, nu):
    _, frame = nl
    rep = assemble_form(frame, initial_penalty(frame), nu)
    g1 = frame.values["g1"]
    expected = g1 @ frame.beta_hess @ g1 + frame.beta_grad @ (frame.jacobians["g1"] @ g1)
    e = np.zeros(6)
    e[3] = 1.0
    assert rep.value(e) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("nu", [1, 2])
@pytest.mark.parametrize("which", ["lin", "nl"])
def test_form_matches_direct_evaluation(which, nu, lin_frame, nl):
    frame = lin_frame if which == "lin" else nl[1]
    alpha = initial_penalty(frame, 10.0)
    rep = assemble_form(frame, alpha, nu)
    rng = np.random.default_rng(7 + nu)
    for _ in range(10):
        v = rng.normal(size=6)
        direct = evaluate_form_direct(frame, alpha, nu, v[:3], v[3:])
        assert abs(rep.value(v) - direct) <= 1e-8 * max(1.0, abs(direct))


@pytest.mark.parametrize("nu", [1, 2])
def test_bracket_terms_against_finite_differences(nl, nu):
    _, frame = nl
    x0 = frame.x0
    fg1, fj, _ = frame.coefficient_fields(nu)

    def L(w, x):
        return frame.beta_hat_gradient(x) @ w(x)

    def LL_fd(v, w, h=1e-4):
        d = v(x0)
        return (L(w, x0 + h * d) - L(w, x0 - h * d)) / (2 * h)

    via_bracket = frame.beta_grad @ lie_bracket(fg1, fj)(x0)
    via_fd = LL_fd(fg1, fj) - LL_fd(fj, fg1)
    assert abs(via_bracket) > 1e-3
    assert abs(via_bracket - via_fd) <= 1e-6 * max(1.0, abs(via_bracket)) * 10
    # and the matrix uses the same bracket value
    rep = assemble_form(frame, initial_penalty(frame), nu)
    assert rep.details["brackets"]["01"] == pytest.approx(via_bracket, rel=1e-6)


def test_point_endpoint_space_dimension(lin_frame):
    for nu in (1, 2):
        W = lin_frame.coefficient_values(nu)
        B = constraint_space(lin_frame, nu)
        assert B.shape[1] == 3 - np.linalg.matrix_rank(W) == 0
        Bext = constraint_space(lin_frame, nu, constrained_initial=False)
        oracle = null_space(np.hstack([np.eye(3), W]))
        assert Bext.shape[1] == oracle.shape[1] == 3
        # same subspace: projectors agree
        assert np.allclose(Bext @ Bext.T, oracle @ oracle.T, atol=1e-10)


def test_unconstrained_final_space(lin_frame):
    free = dataclasses.replace(lin_frame, final_gradients=np.zeros((0, 3)), initial_basis=np.eye(3)[:, :1])
    assert constraint_space(free, 1).shape[1] == 1 + 3


def test_plane_target_space_against_null_space():
    fx = make_nominal("linear3d-plane")
    frame = build_frame(fx.sys, fx.ext, fx.bounds)
    for nu in (1, 2):
        L = frame.final_gradients @ np.hstack([np.eye(3), frame.coefficient_values(nu)])
        B = constraint_space(frame, nu, constrained_initial=False)
        assert B.shape[1] == null_space(L).shape[1] == 5
        assert np.allclose(L @ B, 0.0, atol=1e-10)
        assert np.allclose(B.T @ B, np.eye(5), atol=1e-12)


def test_coercivity_trivial_cases():
    rep = coercivity_test(QuadraticFormReport(1, np.eye(4)), basis=np.zeros((4, 0)))
    assert rep.coercive and rep.min_eig == float("inf")
    rep = coercivity_test(QuadraticFormReport(1, np.eye(4)), basis=np.eye(4)[:, :2])
    assert rep.coercive and rep.min_eig == pytest.approx(1.0)
    rep = coercivity_test(QuadraticFormReport(1, np.diag([1.0, -1.0, 2.0])), basis=np.eye(3))
    assert not rep.coercive and list(rep.reduced_spectrum) == sorted(rep.reduced_spectrum)


def test_extended_form_sampling_and_rebasing(linear3d):
    res = analyze(*linear3d)
    assert res.coercive and res.hestenes_ok
    for nu, rep in res.extended.items():
        assert rep.coercive and rep.dim > 0
        B = rep.constraint_basis
        rng = np.random.default_rng(nu)
        c = rng.normal(size=(10_000, B.shape[1]))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        V = c @ B.T
        vals = np.einsum("ij,jk,ik->i", V, rep.matrix, V)
        assert vals.min() >= rep.min_eig * (1 - 1e-6)
        Q = ortho_group.rvs(B.shape[1], random_state=nu)
        for basis in (B[:, ::-1], B @ Q):
            again = coercivity_test(QuadraticFormReport(nu, rep.matrix), basis=basis)
            assert again.coercive == rep.coercive
            assert again.min_eig == pytest.approx(rep.min_eig, rel=1e-10)


def test_rho_is_smallest_sufficient_rung(linear3d):
    res = analyze(*linear3d)
    frame = res.frame
    ok = []
    for rho in RHO_LADDER:
        mins = []
        for nu in (1, 2):
            rep = assemble_form(frame, initial_penalty(frame, rho), nu)
            B = null_space(np.hstack([np.eye(3), frame.coefficient_values(nu)]))
            mins.append(np.linalg.eigvalsh(B.T @ rep.matrix @ B)[0])
        ok.append(min(mins) > 0)
    assert res.rho == RHO_LADDER[ok.index(True)]


def test_fixed_rho_and_serialization(linear3d):
    res = analyze(*linear3d, rho=1e4)
    assert res.rho == 1e4
    d = json.loads(json.dumps(res.to_dict()))
    assert d["constrained"][0]["min_eig"] == "inf" and d["constrained"][0]["dim"] == 0
    assert {"nu", "dim", "min_eig", "coercive", "rho_used"} <= set(d["extended"][0])


def test_nonlinear_family_is_coercive(nl):
    fx, frame = nl
    res = analyze(*fx, frame=frame)
    assert res.coercive and res.hestenes_ok

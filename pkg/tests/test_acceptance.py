"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line.

The lines are printed and also collected into an "acceptance criteria"
section of the pytest terminal summary.
"""

import time

import numpy as np
import pytest
from scipy.stats import ortho_group

from doubleswitch.continuation import (default_delta, parse_r_path, richardson_ratio,
                                       shooting_jacobian, shooting_residual, solve_branch, sweep, tube_margins,
                                       uniqueness_tube_check, unknowns_from_extremal)
from doubleswitch.extremal import simulate
from doubleswitch.families import make_nominal
from doubleswitch.fields import VectorField, hamiltonian, lie_bracket
from doubleswitch.flows import symplectic_matrix
from doubleswitch.oracle import direct_min_time, fixture_battery
from doubleswitch.secondvar import (QuadraticFormReport, analyze, assemble_form, coercivity_test,
                                    evaluate_form_direct, initial_penalty)
from doubleswitch.verify import run_all_checks

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def sweep20():
    sys, bounds, ext = make_nominal("linear3d")
    t0 = time.perf_counter()
    res = sweep(sys, bounds, parse_r_path("0:0.1:20"), ext)
    return res, time.perf_counter() - t0


def test_1_nominal_fixed_point(acceptance):
    t0 = time.perf_counter()
    sys, bounds, ext = make_nominal("linear3d")
    u = unknowns_from_extremal(sys, bounds, ext)
    res = np.linalg.norm(shooting_residual(sys, bounds, u, sys.zero_param()))
    rec = solve_branch(sys, bounds, sys.zero_param(), u, 1)
    elapsed = time.perf_counter() - t0
    ok = res <= 1e-9 and rec.iterations <= 2 and rec.residual_norm <= 1e-9 and elapsed < 1.0
    acceptance("1 nominal fixed point", ok,
               f"|F|={res:.2e} iterations={rec.iterations} time={elapsed:.2f}s")
    assert ok


def test_2_assumption_battery(acceptance):
    t0 = time.perf_counter()
    lines, ok = [], True
    for fx in fixture_battery():
        report = run_all_checks(fx.sys, fx.bounds, fx.ext)
        verdicts = report.verdicts()
        if fx.expected:
            # planted failures: exactly the intended checks fail
            good = {k for k, v in verdicts.items() if not v} == {k for k, v in fx.expected.items() if not v}
        else:
            good = report.passed
        ok = ok and good
        lines.append(f"{fx.id}:{'ok' if good else 'MISMATCH'}")
    lin = run_all_checks(*make_nominal("linear3d"))
    pmp = max(c.margin for c in lin.group("pmp") if c.kind == "residual" and c.passed)
    elapsed = time.perf_counter() - t0
    ok = ok and lin.passed and pmp <= 1e-8 and elapsed < 10.0
    acceptance("2 assumption battery", ok, f"{' '.join(lines)} max_pmp={pmp:.1e} time={elapsed:.1f}s")
    assert ok


def test_3_second_variation(acceptance):
    fx = make_nominal("linear3d")
    res = analyze(*fx)
    frame = res.frame
    alpha = initial_penalty(frame, res.rho)
    worst, sample_ok, reshuffle_ok = 0.0, True, True
    for nu in (1, 2):
        rep = assemble_form(frame, alpha, nu)
        rng = np.random.default_rng(100 + nu)
        for _ in range(10):
            v = rng.normal(size=6)
            direct = evaluate_form_direct(frame, alpha, nu, v[:3], v[3:])
            worst = max(worst, abs(rep.value(v) - direct) / max(1.0, abs(direct)))
        # the constrained space is trivial for a point-to-point problem, so the
        # sampling and reshuffle checks run on the extended space
        ext_rep = res.extended[nu]
        B = ext_rep.constraint_basis
        c = rng.normal(size=(10_000, B.shape[1]))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        V = c @ B.T
        vals = np.einsum("ij,jk,ik->i", V, ext_rep.matrix, V)
        sample_ok = sample_ok and vals.min() >= ext_rep.min_eig * (1 - 1e-6)
        for basis in (B[:, ::-1], B @ ortho_group.rvs(B.shape[1], random_state=nu)):
            again = coercivity_test(QuadraticFormReport(nu, ext_rep.matrix), basis=basis)
            reshuffle_ok = reshuffle_ok and again.coercive == ext_rep.coercive
    ok = worst <= 1e-8 and sample_ok and reshuffle_ok and res.coercive
    acceptance("3 second variation", ok,
               f"form_vs_direct={worst:.1e} sampling={sample_ok} reshuffle={reshuffle_ok} rho={res.rho:g}")
    assert ok


def test_4_structural_stability(acceptance, sweep20):
    res, elapsed = sweep20
    sys, bounds, _ = make_nominal("linear3d")
    recs = res.records
    accepted = res.complete and all(r.accepted for r in recs)
    gaps = np.array([r.switch_gap for r in recs])
    rs = np.array([r.r[0] for r in recs])
    # continuity: difference quotients of the gap stay bounded and vary slowly
    q = np.diff(gaps) / np.diff(rs)
    smooth = bool(np.all(np.isfinite(q)) and np.max(np.abs(np.diff(q))) <= 0.25 * np.max(np.abs(q)))
    mid = min(recs, key=lambda r: abs(r.r[0] - 0.05))
    ratio, _ = richardson_ratio(sys, bounds, mid)
    ok = accepted and abs(gaps[0]) <= 1e-10 and smooth and abs(ratio - 4.0) <= 0.5 and elapsed < 60.0
    acceptance("4 structural stability", ok,
               f"records={len(recs)} gap(0)={gaps[0]:.1e} gap(0.1)={gaps[-1]:.4f} "
               f"richardson={ratio:.3f} time={elapsed:.1f}s")
    assert ok


def test_5_optimality_vs_oracle(acceptance, sweep20):
    res, _ = sweep20
    sys, bounds, _ = make_nominal("linear3d")
    recs = res.records
    idx = np.linspace(0, len(recs) - 1, 5).round().astype(int)
    t0 = time.perf_counter()
    diffs = []
    for k in idx:
        rec = recs[k]
        o = direct_min_time(sys, bounds, rec.r, (1.0, 1.0, 2.0), resolution=1e-3)
        diffs.append(abs(o.best_T - rec.T))
    elapsed = time.perf_counter() - t0
    ok = max(diffs) <= 2e-3 and elapsed < 300.0
    acceptance("5 optimality vs oracle", ok, f"max|dT|={max(diffs):.1e} time={elapsed:.1f}s")
    assert ok


def test_6_uniqueness(acceptance, sweep20):
    res, _ = sweep20
    sys, bounds, ext = make_nominal("linear3d")
    delta = default_delta(ext)
    margins = tube_margins(sys, ext, delta)
    margins_ok = all(v > 0 for v in margins.values())
    recs = res.records
    probes_ok, total = True, 0
    for k, rec in enumerate(recs[i] for i in (0, len(recs) // 2, len(recs) - 1)):
        out = uniqueness_tube_check(sys, bounds, rec, ext, n_starts=50, seed=k)
        total += out["coincident"]
        probes_ok = probes_ok and out["converged"] == out["coincident"] == 50 and out["verdict"]
    ok = margins_ok and probes_ok
    acceptance("6 uniqueness", ok,
               f"delta={delta:g} min_margin={min(margins.values()):.3f} coincident={total}/150")
    assert ok


def test_7_numerical_hygiene(acceptance):
    J6 = symplectic_matrix(3)
    conservation = symplectic = 0.0
    for fid in ("linear3d", "nonlinear3d"):
        sys, bounds, ext = make_nominal(fid)
        traj = simulate(sys, ext, monodromy=True)
        for f, seg, ts in zip(traj.fields, traj.segments, traj.grid(200)):
            H = [hamiltonian(traj.cotangent(t), f) for t in ts]
            conservation = max(conservation, max(H) - min(H))
            M = seg.monodromy
            symplectic = max(symplectic, np.max(np.abs(M.T @ J6 @ M - J6)))
    jac = 0.0
    for fid in ("linear3d", "nonlinear3d"):
        sys, bounds, ext = make_nominal(fid)
        u = unknowns_from_extremal(sys, bounds, ext)
        Jv, _ = shooting_jacobian(sys, bounds, u, np.array([0.03]), "variational")
        Jf, _ = shooting_jacobian(sys, bounds, u, np.array([0.03]), "fd")
        cols = np.linalg.norm(Jv - Jf, axis=0) / np.maximum(np.linalg.norm(Jv, axis=0), 1e-12)
        jac = max(jac, cols.max())
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    # no analytic Jacobians: the bracket falls back to finite differences
    br = lie_bracket(VectorField(lambda x: A @ x, dim=3), VectorField(lambda x: B @ x, dim=3))
    bracket = 0.0
    for x in rng.normal(size=(10, 3)):
        exact = (B @ A - A @ B) @ x
        bracket = max(bracket, np.linalg.norm(br(x) - exact) / np.linalg.norm(exact))
    ok = conservation <= 1e-9 and symplectic <= 1e-7 and jac <= 1e-5 and bracket <= 1e-6
    acceptance("7 numerical hygiene", ok,
               f"conservation={conservation:.1e} symplectic={symplectic:.1e} "
               f"jacobian={jac:.1e} bracket={bracket:.1e}")
    assert ok

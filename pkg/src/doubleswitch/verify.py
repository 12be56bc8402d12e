"""Checks of the standing assumptions on a nominal double-switch extremal.

Five families of checks are provided:

* ``pmp``: the maximized Hamiltonian is identically 1, the bang control
  realizes the maximum, transversality and endpoint feasibility;
* ``bang_regularity``: strict sign of the switching functions off the switch;
* ``switch_regularity``: strict positivity of the switching-function
  derivatives at the double switch, in four equivalent formulations;
* ``injectivity``: the state trajectory has no self-intersection;
* ``controllability``: the span condition at the initial point, which is
  equivalent to uniqueness of the adjoint covector.

Each check yields :class:`CheckResult` entries collected in a
:class:`VerificationReport`.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field as dc_field
from typing import List, Optional

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.distance import cdist

from .boundary import FEAS_TOL, RANK_TOL, BoundaryConditions, tangent_basis
from .errors import DoubleSwitchError, NumericalInconsistencyWarning
from .extremal import BangBangExtremal, ExtremalTrajectory, simulate
from .fields import ControlAffineSystem, CotangentPoint, derived_field, symplectic_product
from .flows import integrate_flow, integrate_hamiltonian, integrate_piecewise, pullback_field

PMP_TOL = 1e-8
CONSISTENCY_TOL = 1e-7
GRID_PER_ARC = 2000

__all__ = [
    "CheckResult",
    "VerificationReport",
    "check_pmp",
    "check_bang_regularity",
    "check_switch_regularity",
    "check_injectivity",
    "check_controllability",
    "bang_margins",
    "switch_brackets",
    "reference_flow",
    "run_all_checks",
]


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(w) for k, w in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(w) for w in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


@dataclass
class CheckResult:
    """Outcome of one check.

    ``margin`` is the signed quantity the check is about: a residual (pass
    iff ``margin <= tolerance``) when ``kind == "residual"``, a margin (pass
    iff ``margin > tolerance``) when ``kind == "margin"``.
    """

    check: str
    status: str
    margin: float
    tolerance: float
    location: Optional[dict] = None
    kind: str = "margin"
    details: dict = dc_field(default_factory=dict)

    @property
    def passed(self):
        return self.status in ("pass", "skipped")

    def to_dict(self):
        return _jsonable(asdict(self))


def _result(name, value, tol, kind, location=None, details=None):
    if kind == "residual":
        ok = value <= tol
    else:
        ok = value > tol
    return CheckResult(name, "pass" if ok else "fail", float(value), float(tol), location, kind, details or {})


def _skipped(name, tol, reason, kind="residual"):
    return CheckResult(name, "skipped", 0.0 if kind == "residual" else math.inf, tol, None, kind,
                       {"reason": reason})


@dataclass
class VerificationReport:
    """Collection of check results; group names are the prefix before ``/``."""

    results: List[CheckResult] = dc_field(default_factory=list)
    meta: dict = dc_field(default_factory=dict)

    def extend(self, items):
        self.results.extend(items)

    def group(self, name) -> List[CheckResult]:
        return [c for c in self.results if c.check == name or c.check.startswith(name + "/")]

    def verdict(self, name) -> bool:
        items = self.group(name)
        return bool(items) and all(c.passed for c in items)

    def verdicts(self):
        groups = []
        for c in self.results:
            g = c.check.split("/")[0]
            if g not in groups:
                groups.append(g)
        return {g: self.verdict(g) for g in groups}

    @property
    def passed(self):
        return all(c.passed for c in self.results)

    def failed(self):
        return [c for c in self.results if not c.passed]

    def to_dict(self):
        return {"passed": self.passed, "verdicts": self.verdicts(),
                "checks": [c.to_dict() for c in self.results], "meta": _jsonable(self.meta)}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), indent=kw.pop("indent", 2), **kw)


# -- helpers ---------------------------------------------------------------------

def reference_flow(sys: ControlAffineSystem, ext: BangBangExtremal, monodromy=True, second_order=False):
    """State flow of the reference (bang-bang) field over ``[0, T]``."""
    r = ext.param(sys)
    fields = [derived_field(sys, r, tag) for tag in ext.arc_tags]
    return integrate_piecewise(fields, ext.breakpoints, ext.ell0.x, monodromy=monodromy,
                               second_order=second_order)


def _grid(traj: ExtremalTrajectory, per_arc):
    times, arcs = [], []
    for k, g in enumerate(traj.grid(per_arc)):
        times.append(g)
        arcs.append(np.full(g.size, k))
    return np.concatenate(times), np.concatenate(arcs)


def _switching_values(sys, r, traj, times):
    f = sys.fields(r)
    P = np.atleast_2d(traj.point(times))
    n = traj.n
    return np.array([[P[k, :n] @ fi(P[k, n:]) for fi in f] for k in range(P.shape[0])])


# -- PMP ---------------------------------------------------------------------

def check_pmp(sys, bounds: BoundaryConditions, ext: BangBangExtremal, per_arc=GRID_PER_ARC,
              tol=PMP_TOL, traj=None) -> List[CheckResult]:
    """Normal PMP residuals along the simulated extremal.

    Entries: ``pmp/hamiltonian`` (max |F_t - 1|), ``pmp/maximality``
    (max of ``H^max - F_t`` with ``H^max = F0 + |F1| + |F2|``),
    ``pmp/transversality_initial``, ``pmp/transversality_final`` and the two
    feasibility residuals.  Integration failures yield a failed
    ``pmp/integration`` entry.
    """
    r = ext.param(sys)
    try:
        traj = traj or simulate(sys, ext)
    except DoubleSwitchError as exc:
        return [CheckResult("pmp/integration", "fail", math.inf, tol, None, "residual", {"error": str(exc)})]
    n = ext.n
    times, arcs = _grid(traj, per_arc)
    P = traj.point(times)
    Fsw = _switching_values(sys, r, traj, times)
    Fref = np.array([P[k, :n] @ traj.fields[arcs[k]](P[k, n:]) for k in range(times.size)])
    Hmax = Fsw[:, 0] + np.abs(Fsw[:, 1]) + np.abs(Fsw[:, 2])
    out = []
    dev = np.abs(Fref - 1.0)
    k = int(np.argmax(dev))
    out.append(_result("pmp/hamiltonian", dev[k], tol, "residual", {"t": times[k]}))
    gap = Hmax - Fref
    k = int(np.argmax(gap))
    out.append(_result("pmp/maximality", gap[k], tol, "residual", {"t": times[k]}))

    ends = (("initial", bounds.initial, ext.ell0), ("final", bounds.final, traj.ell_final))
    for label, m, ell in ends:
        if m.codim:
            feas = float(np.max(np.abs(m.values(r, ell.x))))
            out.append(_result(f"pmp/feasibility_{label}", feas, tol, "residual", {"x": ell.x}))
        else:
            out.append(_skipped(f"pmp/feasibility_{label}", tol, "unconstrained endpoint"))
        V = tangent_basis(m, r, ell.x, check_feasible=False)
        if V.shape[1] == 0:
            out.append(_skipped(f"pmp/transversality_{label}", tol, "point endpoint"))
        else:
            res = float(np.max(np.abs(ell.p @ V)))
            out.append(_result(f"pmp/transversality_{label}", res, tol, "residual", {"p": ell.p}))
    return out


# -- bang regularity ---------------------------------------------------------------

def default_delta(ext: BangBangExtremal):
    ta, tb = ext.switch_times
    return min(ta, ext.T - tb) / 10.0


def bang_margins(sys, ext, delta, traj=None, per_arc=GRID_PER_ARC, ref_times=None):
    """Margins of ``u_i(t) F_i(lambda(t))`` away from the switches.

    Returns ``(margins, locations)`` with keys ``(i, "before")`` and
    ``(i, "after")``: the minimum of ``-F_i`` on ``[0, tau_i - delta]`` and of
    ``F_i`` on ``[tau_i + delta, T]``.  ``ref_times`` overrides the switching
    times used to place the windows (default: those of ``ext``).  An empty
    window gives ``+inf``.
    """
    traj = traj or simulate(sys, ext)
    r = ext.param(sys)
    taus = ref_times if ref_times is not None else (ext.tau1, ext.tau2)
    times, _ = _grid(traj, per_arc)
    extra = []
    for tau in taus:
        extra += [tau - delta, tau + delta]
    times = np.unique(np.concatenate([times, [t for t in extra if 0.0 <= t <= ext.T]]))
    F = _switching_values(sys, r, traj, times)
    margins, locs = {}, {}
    for i, tau in enumerate(taus, start=1):
        before = times <= tau - delta + 1e-14
        after = times >= tau + delta - 1e-14
        for key, sel, sgn in (("before", before, -1.0), ("after", after, 1.0)):
            if not np.any(sel):
                margins[(i, key)] = math.inf
                locs[(i, key)] = None
                continue
            vals = sgn * F[sel, i]
            k = int(np.argmin(vals))
            margins[(i, key)] = float(vals[k])
            locs[(i, key)] = float(times[sel][k])
    return margins, locs


def check_bang_regularity(sys, ext: BangBangExtremal, deltas=None, traj=None, per_arc=GRID_PER_ARC,
                          tol=PMP_TOL) -> List[CheckResult]:
    """Strict sign of the switching functions off the switching instants.

    For every ``delta`` in ``deltas`` (default ``delta0 / 2**k``, k = 0..5,
    with ``delta0 = min(tau, T - tau) / 10``) the four margins must be
    positive.  The entry ``bang_regularity/at_switch`` records ``|F_i|`` at
    the switching instants, which must vanish.
    """
    traj = traj or simulate(sys, ext)
    if deltas is None:
        d0 = default_delta(ext)
        deltas = [d0 / 2 ** k for k in range(6)]
    deltas = sorted(float(d) for d in deltas)[::-1]
    table = {}
    worst = {}
    for d in deltas:
        m, loc = bang_margins(sys, ext, d, traj, per_arc)
        for key, v in m.items():
            table.setdefault(key, []).append(v)
            if key not in worst or v < worst[key][0]:
                worst[key] = (v, loc[key], d)
    out = []
    for (i, side), (v, t, d) in sorted(worst.items()):
        out.append(_result(f"bang_regularity/u{i}_{side}", v, 0.0, "margin",
                           {"t": t, "delta": d}, {"deltas": deltas, "margins": table[(i, side)]}))
    r = ext.param(sys)
    f = sys.fields(r)
    vals = []
    for i, tau in ((1, ext.tau1), (2, ext.tau2)):
        ell = traj.cotangent(tau)
        vals.append(abs(ell.p @ f[i](ell.x)))
    out.append(_result("bang_regularity/at_switch", max(vals), tol, "residual",
                       {"t": [ext.tau1, ext.tau2]}, {"abs_F": vals}))
    return out


# -- double-switch regularity ---------------------------------------------------------

def switch_brackets(sys, r, ell: CotangentPoint):
    """``a = <l,[f0,f1]>``, ``b = <l,[f0,f2]>``, ``c = <l,[f1,f2]>`` at ``ell``."""
    f0, f1, f2 = sys.fields(r)
    return (symplectic_product(ell, f0, f1), symplectic_product(ell, f0, f2),
            symplectic_product(ell, f1, f2))


def hk_products(sys, r, ell: CotangentPoint):
    """``{(nu, "in"): sigma(H1, K_nu), (nu, "out"): sigma(K_nu, H2)}`` at ``ell``."""
    h1, h2 = derived_field(sys, r, "H1"), derived_field(sys, r, "H2")
    out = {}
    for nu in (1, 2):
        k = derived_field(sys, r, f"K{nu}")
        out[(nu, "in")] = symplectic_product(ell, h1, k)
        out[(nu, "out")] = symplectic_product(ell, k, h2)
    return out


def _one_sided_derivative(field, ell, t_dir, G, h=0.02, m=7):
    """Derivative of ``G`` along the Hamiltonian flow of ``field`` at ``ell``, from one side.

    Samples ``G`` at ``t_dir * k * h`` (k = 0..m-1) by integrating the lift,
    fits a polynomial and differentiates it at 0.
    """
    ts = t_dir * h * np.arange(m)
    seg = integrate_hamiltonian(field, ell, 0.0, ts[-1], monodromy=False, dense=True)
    vals = []
    for t in ts:
        z = seg.point(t)
        n = ell.dim
        vals.append(G(z[:n], z[n:]))
    coef = np.polynomial.polynomial.polyfit(ts / h, np.array(vals), m - 1)
    return float(coef[1] / h)


def pullback_products(sys, ext, traj=None):
    """``sigma(G1, J_nu)`` and ``sigma(J_nu, G2)`` at the initial point (pullbacks over ``[0, tau]``)."""
    r = ext.param(sys)
    tau = ext.switch_times[0]
    h1 = derived_field(sys, r, "H1")
    flow = integrate_flow(h1, ext.ell0.x, 0.0, tau, monodromy=True, second_order=True)
    g1 = pullback_field(flow, h1)
    g2 = pullback_field(flow, derived_field(sys, r, "H2"))
    ell0 = ext.ell0
    out = {}
    for nu in (1, 2):
        j = pullback_field(flow, derived_field(sys, r, f"K{nu}"))
        out[(nu, "in")] = symplectic_product(ell0, g1, j)
        out[(nu, "out")] = symplectic_product(ell0, j, g2)
    return out


def check_switch_regularity(sys, ext: BangBangExtremal, traj=None, tol=CONSISTENCY_TOL,
                            rank_tol=RANK_TOL) -> List[CheckResult]:
    """Strong Legendre-type condition at the double switch.

    The primary margins are ``a - |c|`` and ``b - |c|``.  The same condition
    is evaluated as (i) one-sided derivatives of ``K_nu - H1`` and
    ``H2 - K_nu`` along the simulated extremal, (ii) symplectic products of
    the lifts of ``h1, k_nu, h2`` at the switch and (iii) symplectic products
    of their pullbacks at the initial point.  Disagreement beyond ``tol``
    (relative) raises :class:`NumericalInconsistencyWarning`; disagreement
    of the pass/fail verdict fails ``switch_regularity/consistency``.
    ``switch_regularity/drift_independence`` measures the distance of
    ``f0(x_d)`` from ``span{f1, f2}(x_d)`` relative to ``|f0(x_d)|``.
    """
    traj = traj or simulate(sys, ext)
    r = ext.param(sys)
    ta, _ = ext.switch_times
    ell_d = traj.ell_first_switch
    a, b, c = switch_brackets(sys, r, ell_d)
    out = [
        _result("switch_regularity/margin_1", a - abs(c), 0.0, "margin", {"t": ta}, {"a": a, "b": b, "c": c}),
        _result("switch_regularity/margin_2", b - abs(c), 0.0, "margin", {"t": ta}, {"a": a, "b": b, "c": c}),
    ]
    if not ext.is_double:
        return out

    closed = {(1, "in"): 2 * (a + c), (1, "out"): 2 * (b + c), (2, "in"): 2 * (b - c), (2, "out"): 2 * (a - c)}
    hk = hk_products(sys, r, ell_d)
    f = sys.fields(r)
    h1, h2 = derived_field(sys, r, "H1"), derived_field(sys, r, "H2")
    raw = {}
    for nu in (1, 2):
        fnu = f[nu]
        # K_nu - H1 = 2 f_nu on the incoming arc, H2 - K_nu = 2 f_{3-nu} on the outgoing one
        raw[(nu, "in")] = _one_sided_derivative(h1, ell_d, -1.0, lambda p, x, g=fnu: 2 * p @ g(x))
        fo = f[3 - nu]
        raw[(nu, "out")] = _one_sided_derivative(h2, ell_d, 1.0, lambda p, x, g=fo: 2 * p @ g(x))
    pb = pullback_products(sys, ext, traj)

    scale = max(1.0, max(abs(v) for v in closed.values()))
    diffs = {
        "hk_vs_closed": max(abs(hk[k] - closed[k]) for k in closed) / scale,
        "raw_vs_closed": max(abs(raw[k] - closed[k]) for k in closed) / scale,
        "pullback_vs_closed": max(abs(pb[k] - closed[k]) for k in closed) / scale,
    }
    verdicts = {
        "closed": all(v > 0 for v in closed.values()),
        "hk": all(v > 0 for v in hk.values()),
        "raw": all(v > 0 for v in raw.values()),
        "pullback": all(v > 0 for v in pb.values()),
        "absolute": a - abs(c) > 0 and b - abs(c) > 0,
    }
    worst = max(diffs.values())
    if worst > tol:
        warnings.warn(f"equivalent switch-regularity formulations differ by {worst:.3g} (relative)",
                      NumericalInconsistencyWarning)
    agree = len(set(verdicts.values())) == 1
    details = {
        "closed_form": {f"{k[0]}_{k[1]}": v for k, v in closed.items()},
        "hk": {f"{k[0]}_{k[1]}": v for k, v in hk.items()},
        "raw": {f"{k[0]}_{k[1]}": v for k, v in raw.items()},
        "pullback": {f"{k[0]}_{k[1]}": v for k, v in pb.items()},
        "differences": diffs,
        "verdicts": verdicts,
    }
    out.append(CheckResult("switch_regularity/consistency", "pass" if agree else "fail", worst, tol,
                           {"t": ta}, "residual", details))

    F = np.array([fi(ell_d.x) for fi in f])
    coef, *_ = np.linalg.lstsq(F[1:].T, F[0], rcond=None)
    dist = float(np.linalg.norm(F[0] - F[1:].T @ coef) / max(np.linalg.norm(F[0]), 1e-300))
    out.append(_result("switch_regularity/drift_independence", dist, rank_tol, "margin", {"t": ta}))
    return out


# -- injectivity ---------------------------------------------------------------

def check_injectivity(sys, ext: BangBangExtremal, min_separation=None, samples=2000, traj=None,
                      tol=RANK_TOL) -> List[CheckResult]:
    """Minimal distance between trajectory points at least ``min_separation`` apart in time.

    Grid search over ``samples`` uniform times (switching instants added),
    followed by a Gauss-Newton refinement of the best pair.  The default
    separation is ``T / 100``; a separation ``>= T`` makes the check vacuous
    with margin ``+inf``.
    """
    T = ext.T
    sep = T / 100.0 if min_separation is None else float(min_separation)
    if sep >= T:
        return [CheckResult("injectivity", "pass", math.inf, tol, None, "margin", {"vacuous": True})]
    traj = traj or simulate(sys, ext)
    t = np.unique(np.concatenate([np.linspace(0.0, T, samples), ext.breakpoints]))
    X = traj.state(t)
    D = cdist(X, X)
    far = np.abs(t[:, None] - t[None, :]) >= sep
    D = np.where(far & (np.arange(t.size)[:, None] < np.arange(t.size)[None, :]), D, np.inf)
    i, j = np.unravel_index(int(np.argmin(D)), D.shape)
    best = (float(D[i, j]), float(t[i]), float(t[j]))

    dt = 2.0 * T / samples
    lo = np.array([max(0.0, t[i] - dt), max(0.0, t[j] - dt)])
    hi = np.array([min(T, t[i] + dt), min(T, t[j] + dt)])
    if lo[1] - hi[0] >= sep or hi[0] + sep <= lo[1]:
        try:
            sol = least_squares(lambda z: traj.state(z[0]) - traj.state(z[1]),
                                np.array([t[i], t[j]]), bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15)
            d = float(np.linalg.norm(sol.fun))
            if d < best[0] and abs(sol.x[1] - sol.x[0]) >= sep:
                best = (d, float(sol.x[0]), float(sol.x[1]))
        except ValueError:
            pass
    return [_result("injectivity", best[0], tol, "margin", {"t": best[1], "s": best[2]},
                    {"min_separation": sep, "samples": int(t.size)})]


# -- controllability ---------------------------------------------------------------

def controllability_matrix(sys, bounds: BoundaryConditions, ext: BangBangExtremal):
    """Columns: tangent basis of ``N0``, of the pulled-back ``Nf``, and ``f~0, f~1, f~2`` (unit length)."""
    r = ext.param(sys)
    x0 = ext.ell0.x
    flow = reference_flow(sys, ext, monodromy=True)
    V0 = tangent_basis(bounds.initial, r, x0, check_feasible=False)
    Vf = tangent_basis(bounds.final, r, flow.x1, check_feasible=False)
    Vf = np.linalg.solve(flow.monodromy, Vf) if Vf.size else Vf
    if Vf.size:
        Vf, _ = np.linalg.qr(Vf)
    ta, _ = ext.switch_times
    h1 = derived_field(sys, r, "H1")
    s = integrate_flow(h1, x0, 0.0, ta, monodromy=True, dense=False)
    ft = np.linalg.solve(s.monodromy, np.array([fi(s.x1) for fi in sys.fields(r)]).T)
    norms = np.linalg.norm(ft, axis=0)
    ft = ft / np.where(norms > 0, norms, 1.0)
    return np.hstack([V0, Vf, ft])


def check_controllability(sys, bounds, ext, tol=RANK_TOL) -> List[CheckResult]:
    """n-th singular value of :func:`controllability_matrix` (0 when it has fewer than n columns)."""
    S = controllability_matrix(sys, bounds, ext)
    n = ext.n
    sv = np.linalg.svd(S, compute_uv=False)
    smin = float(sv[n - 1]) if sv.size >= n else 0.0
    return [_result("controllability", smin, tol, "margin", None,
                    {"columns": int(S.shape[1]), "singular_values": sv})]


def run_all_checks(sys, bounds, ext, per_arc=GRID_PER_ARC, min_separation=None,
                   injectivity_samples=2000) -> VerificationReport:
    """Run every check on ``ext`` and collect the results."""
    report = VerificationReport(meta={"system": sys.name, "n": ext.n, "tau1": ext.tau1, "tau2": ext.tau2,
                                      "T": ext.T, "r": ext.param(sys)})
    try:
        traj = simulate(sys, ext)
    except DoubleSwitchError as exc:
        report.extend([CheckResult("pmp/integration", "fail", math.inf, PMP_TOL, None, "residual",
                                   {"error": str(exc)})])
        return report
    report.extend(check_pmp(sys, bounds, ext, per_arc=per_arc, traj=traj))
    report.extend(check_bang_regularity(sys, ext, traj=traj, per_arc=per_arc))
    report.extend(check_switch_regularity(sys, ext, traj=traj))
    report.extend(check_injectivity(sys, ext, min_separation, injectivity_samples, traj=traj))
    report.extend(check_controllability(sys, bounds, ext))
    return report

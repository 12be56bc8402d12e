"""Brute-force minimum-time oracle and the fixture battery.

The oracle never touches covectors: it flies the bang controls
``u_i = -1`` on ``[0, s_i)`` and ``+1`` afterwards, scans a grid of switching
times, evaluates the endpoint error for every final time on a fine grid and
refines the most promising cells by a constrained local minimisation of
``T``.  It is therefore independent of the shooting system it validates.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import List, Tuple

import numpy as np
from scipy.optimize import minimize

from .boundary import BoundaryConditions
from .errors import InvalidArgument, OracleInfeasible
from .continuation import thread_count
from .families import Fixture, make_nominal
from .fields import ControlAffineSystem, derived_field
from .flows import integrate_flow

FEAS_TOL = 1e-8

__all__ = ["DirectSolveResult", "bang_endpoint", "endpoint_error", "direct_min_time", "fixture_battery"]

_TAGS = {(-1, -1): "H1", (1, -1): "K1", (-1, 1): "K2", (1, 1): "H2"}


@dataclass
class DirectSolveResult:
    """Best bang trajectory found by :func:`direct_min_time`."""

    best_T: float
    best_switches: Tuple[float, float]
    endpoint_error: float
    grid_resolution: float
    grid_T: float = math.nan
    grid_switches: Tuple[float, float] = (math.nan, math.nan)
    evaluations: int = 0
    candidates: List[dict] = dc_field(default_factory=list)

    def to_dict(self):
        return {"best_T": self.best_T, "best_switches": list(self.best_switches),
                "endpoint_error": self.endpoint_error, "grid_resolution": self.grid_resolution,
                "grid_T": self.grid_T, "grid_switches": list(self.grid_switches),
                "evaluations": self.evaluations}


def _arcs(s1, s2, T):
    """``[(tag, t0, t1), ...]`` for the bang control with switches ``s1``, ``s2`` on ``[0, T]``."""
    cuts = sorted({0.0, min(max(s1, 0.0), T), min(max(s2, 0.0), T), T})
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b > a:
            mid = 0.5 * (a + b)
            out.append((_TAGS[(1 if mid > s1 else -1, 1 if mid > s2 else -1)], a, b))
    return out


def bang_endpoint(sys: ControlAffineSystem, r, x0, s1, s2, T):
    """State at ``T`` under the bang control with per-component switches ``s1``, ``s2``."""
    r = sys.check_param(r)
    x = np.asarray(x0, float)
    for tag, a, b in _arcs(s1, s2, T):
        x = integrate_flow(derived_field(sys, r, tag), x, a, b, monodromy=False, dense=False).x1
    return x


def endpoint_error(bounds: BoundaryConditions, r, x):
    """Approximate distance from ``x`` to the final manifold, ``|Phi(x)| / sigma_min(DPhi(x))``."""
    m = bounds.final
    if m.codim == 0:
        return 0.0
    v = np.atleast_1d(m.values(r, x))
    G = m.gradients(r, x)
    s = np.linalg.svd(G, compute_uv=False)[-1]
    return float(np.linalg.norm(v) / max(s, 1e-300))


def _initial_state(bounds, r, x0):
    if x0 is not None:
        return np.asarray(x0, float)
    m = bounds.initial
    if m.kind != "point":
        raise InvalidArgument("initial manifold is not a point; pass the initial state explicitly")
    # point constraints are x_i - x_ref_i(r)
    return -np.atleast_1d(m.values(r, np.zeros(m.n)))


def _scan_row(sys, bounds, r, x0, s1, s2_grid, T_grid):
    err = np.full(s2_grid.size, np.inf)
    Tbest = np.full(s2_grid.size, np.nan)
    for j, s2 in enumerate(s2_grid):
        x = np.asarray(x0, float)
        errs = np.full(T_grid.size, np.inf)
        for tag, a, b in _arcs(s1, s2, T_grid[-1]):
            seg = integrate_flow(derived_field(sys, r, tag), x, a, b, monodromy=False, dense=True)
            sel = (T_grid >= a) & (T_grid <= b)
            if np.any(sel):
                X = np.atleast_2d(seg.state(T_grid[sel]))
                # raw constraint norm is enough to rank cells
                errs[sel] = [np.linalg.norm(bounds.final.values(r, xx)) for xx in X]
            x = seg.x1
        k = int(np.argmin(errs))
        err[j], Tbest[j] = errs[k], T_grid[k]
    return err, Tbest


def _scan(sys, bounds, r, x0, s1_grid, s2_grid, T_lo, T_hi, res, workers=1):
    """Smallest endpoint residual over the final-time grid for every ``(s1, s2)`` cell."""
    T_grid = np.arange(T_lo, T_hi + 0.5 * res, res)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(lambda s1: _scan_row(sys, bounds, r, x0, s1, s2_grid, T_grid), s1_grid))
    return np.array([e for e, _ in rows]), np.array([t for _, t in rows])


def direct_min_time(sys: ControlAffineSystem, bounds: BoundaryConditions, r, center, half_width=0.15,
                    T_half_width=0.25, resolution=1e-3, coarse=0.01, x0=None, s_box=None, T_box=None,
                    n_candidates=6, feas_tol=FEAS_TOL, workers=None) -> DirectSolveResult:
    """Minimum final time among bang controls with one switch per component.

    Parameters
    ----------
    center : (s1, s2, T)
        Centre of the search box, typically the nominal ``(tau, tau, T)``.
    half_width, T_half_width : float
        Box half-widths in the switching times and in ``T``.
    resolution : float
        Step of the final-time grid.
    coarse : float
        Step of the switching-time grid.
    s_box, T_box : optional
        Explicit ``((lo1, hi1), (lo2, hi2))`` and ``(lo, hi)`` overriding the box.

    The ``n_candidates`` grid cells with the smallest endpoint error seed a
    local minimisation of ``T`` subject to the endpoint constraints, confined
    to the box; the smallest feasible ``T`` wins.

    Raises
    ------
    OracleInfeasible
        If no refined candidate reaches the final manifold within ``feas_tol``.
    """
    r = sys.check_param(r)
    x0 = _initial_state(bounds, r, x0)
    c1, c2, cT = (float(v) for v in center)
    box1, box2 = s_box or ((c1 - half_width, c1 + half_width), (c2 - half_width, c2 + half_width))
    box1 = (max(box1[0], 0.0), box1[1])
    box2 = (max(box2[0], 0.0), box2[1])
    Tlo, Thi = T_box or (cT - T_half_width, cT + T_half_width)
    Tlo = max(Tlo, resolution)
    if not (box1[1] > box1[0] and box2[1] > box2[0] and Thi > Tlo):
        raise InvalidArgument("empty search box")
    g1 = np.linspace(box1[0], box1[1], max(2, int(round((box1[1] - box1[0]) / coarse)) + 1))
    g2 = np.linspace(box2[0], box2[1], max(2, int(round((box2[1] - box2[0]) / coarse)) + 1))
    err, Tb = _scan(sys, bounds, r, x0, g1, g2, Tlo, Thi, resolution, workers or thread_count())
    order = np.argsort(err, axis=None)[: max(1, n_candidates)]

    def endpoint(z):
        return bang_endpoint(sys, r, x0, z[0], z[1], z[2])

    cons = {"type": "eq", "fun": lambda z: np.atleast_1d(bounds.final.values(r, endpoint(z)))}
    bnds = [box1, box2, (Tlo, Thi)]
    results = []
    for k in order:
        i, j = np.unravel_index(k, err.shape)
        z0 = np.array([g1[i], g2[j], Tb[i, j]])
        sol = minimize(lambda z: z[2], z0, jac=lambda z: np.array([0.0, 0.0, 1.0]), method="SLSQP",
                       constraints=[cons] if bounds.final.codim else [], bounds=bnds,
                       options={"ftol": 1e-14, "maxiter": 200})
        z = sol.x
        e = endpoint_error(bounds, r, endpoint(z))
        results.append({"z": z, "err": e, "grid": z0, "grid_err": float(err[i, j])})
    feasible = [c for c in results if c["err"] <= feas_tol]
    i0, j0 = np.unravel_index(order[0], err.shape)
    if not feasible:
        raise OracleInfeasible(f"no feasible bang trajectory in the box (best endpoint error "
                               f"{min(c['err'] for c in results):.3g}); enlarge the box or refine the grid")
    best = min(feasible, key=lambda c: c["z"][2])
    return DirectSolveResult(float(best["z"][2]), (float(best["z"][0]), float(best["z"][1])), best["err"],
                             resolution, float(Tb[i0, j0]), (float(g1[i0]), float(g2[j0])),
                             int(g1.size * g2.size), results)


def fixture_battery() -> List[Fixture]:
    """Fixtures with planted verdicts; each has ``sys``, ``bounds``, ``ext`` and ``expected``."""
    ids = ["linear3d", "span-deficient-4d", "parallel-controls", "symmetric-swap", "crossing-trajectory",
           "linear3d-plane", "nonlinear3d"]
    return [make_nominal(fid) for fid in ids]

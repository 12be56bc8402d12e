"""Shooting system, Newton correction, branch selection and parameter sweeps.

For a branch ``nu`` the unknowns are ``(p, x, t1, t2, t3, a, b)``: the
initial covector-state pair, the first and second switching instants, the
final time and the multipliers of the endpoint constraints.  The residual is

1. ``Phi0(r, x)``
2. ``p - DPhi0(r, x)^T a``
3. ``H1(l) - 1``
4. ``K_nu(l1) - 1`` with ``l1 = exp(t1 X_H1)(l)``
5. ``H2(l2) - 1`` with ``l2 = exp((t2 - t1) X_K_nu)(l1)``
6. ``Phif(r, x_f)``
7. ``p_f - DPhif(r, x_f)^T b`` with ``(p_f, x_f) = exp((t3 - t2) X_H2)(l2)``

which has ``4n + 3 - n0 - nf`` equations and as many unknowns.  For
``nu = 1`` component 1 switches first, so ``(tau1, tau2) = (t1, t2)``; for
``nu = 2`` the roles are swapped.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from typing import List, Optional, Sequence

import numpy as np

from .boundary import BoundaryConditions, multipliers
from .errors import (BranchMismatch, ContinuationFailure, DoubleSwitchError, IntegrationFailure, InvalidArgument,
                     NewtonFailure, UniquenessViolation)
from .extremal import DOUBLE_TOL, BangBangExtremal, simulate
from .fields import ControlAffineSystem, CotangentPoint, derived_field, hamiltonian_gradient, hamiltonian_vector
from .flows import integrate_hamiltonian
from .verify import (_grid, _jsonable, bang_margins, check_injectivity, check_pmp, default_delta)

NEWTON_TOL = 1e-10
ACCEPT_TOL = 1e-9
MAX_ITER = 50
FD_STEP = 1e-7
AGREE_TOL = 1e-8

__all__ = [
    "ShootingUnknowns",
    "ContinuationRecord",
    "shooting_residual",
    "shooting_jacobian",
    "unknowns_from_extremal",
    "solve_branch",
    "select_branch",
    "sweep",
    "tube_margins",
    "uniqueness_tube_check",
    "parse_r_path",
    "richardson_ratio",
    "thread_count",
    "certify",
    "export_sweep_csv",
    "export_sweep_json",
]


@dataclass
class ShootingUnknowns:
    """Unknowns of the shooting system for branch ``nu``."""

    p: np.ndarray
    x: np.ndarray
    t1: float
    t2: float
    t3: float
    a: np.ndarray
    b: np.ndarray
    nu: int = 1

    def __post_init__(self):
        self.p = np.asarray(self.p, float).reshape(-1)
        self.x = np.asarray(self.x, float).reshape(-1)
        self.a = np.asarray(self.a, float).reshape(-1)
        self.b = np.asarray(self.b, float).reshape(-1)
        self.t1, self.t2, self.t3 = float(self.t1), float(self.t2), float(self.t3)
        if self.nu not in (1, 2):
            raise InvalidArgument(f"nu must be 1 or 2, got {self.nu}")

    @property
    def n(self):
        return self.x.size

    def to_vector(self):
        return np.concatenate([self.p, self.x, [self.t1, self.t2, self.t3], self.a, self.b])

    @classmethod
    def from_vector(cls, v, n, na, nb, nu):
        v = np.asarray(v, float)
        return cls(v[:n], v[n:2 * n], v[2 * n], v[2 * n + 1], v[2 * n + 2],
                   v[2 * n + 3:2 * n + 3 + na], v[2 * n + 3 + na:2 * n + 3 + na + nb], nu)

    def with_nu(self, nu):
        return replace(self, nu=nu)

    @property
    def switching_times(self):
        """Per-component switching times ``(tau1, tau2)``."""
        return (self.t1, self.t2) if self.nu == 1 else (self.t2, self.t1)

    def extremal(self, r=None) -> BangBangExtremal:
        tau1, tau2 = self.switching_times
        return BangBangExtremal(CotangentPoint(self.p, self.x), tau1, tau2, self.t3, branch=self.nu, r=r)


@dataclass
class ContinuationRecord:
    """Accepted (or attempted) solution of the shooting system at parameter ``r``."""

    r: np.ndarray
    unknowns: ShootingUnknowns
    residual_norm: float
    jacobian_min_sv: float
    iterations: int = 0
    status: str = "converged"
    flags: list = dc_field(default_factory=list)
    margins: dict = dc_field(default_factory=dict)
    certificate: dict = dc_field(default_factory=dict)
    trace: list = dc_field(default_factory=list)
    alternative: Optional["ContinuationRecord"] = None

    @property
    def nu(self):
        return self.unknowns.nu

    @property
    def tau(self):
        return self.unknowns.switching_times

    @property
    def T(self):
        return self.unknowns.t3

    @property
    def switch_gap(self):
        """``tau2 - tau1`` (positive on branch 1, negative on branch 2)."""
        t1, t2 = self.tau
        return t2 - t1

    @property
    def is_double(self):
        return abs(self.switch_gap) <= DOUBLE_TOL

    @property
    def extremal(self) -> BangBangExtremal:
        return self.unknowns.extremal(self.r)

    @property
    def accepted(self):
        return self.status == "converged" and self.residual_norm <= ACCEPT_TOL

    def to_dict(self):
        u = self.unknowns
        return _jsonable({
            "r": self.r, "nu": u.nu, "tau1": self.tau[0], "tau2": self.tau[1], "T": u.t3,
            "gap": self.switch_gap, "p0": u.p, "x0": u.x, "a": u.a, "b": u.b,
            "residual_norm": self.residual_norm, "jacobian_min_sv": self.jacobian_min_sv,
            "iterations": self.iterations, "status": self.status, "flags": self.flags,
            "margins": self.margins, "certificate": self.certificate,
        })


# -- residual and Jacobian --------------------------------------------------------

def _arcs(sys, r, u: ShootingUnknowns, monodromy):
    r = sys.check_param(r)
    fields = [derived_field(sys, r, t) for t in ("H1", f"K{u.nu}", "H2")]
    ell = CotangentPoint(u.p, u.x)
    segs = []
    for f, dt in zip(fields, (u.t1, u.t2 - u.t1, u.t3 - u.t2)):
        s = integrate_hamiltonian(f, ell, 0.0, dt, monodromy=monodromy, dense=False)
        segs.append(s)
        ell = s.ell1
    return fields, segs


def _check_sizes(bounds, u):
    na, nb = bounds.initial.codim, bounds.final.codim
    if u.a.size != na or u.b.size != nb:
        raise InvalidArgument(f"multiplier sizes ({u.a.size}, {u.b.size}) do not match codimensions ({na}, {nb})")


def shooting_residual(sys: ControlAffineSystem, bounds: BoundaryConditions, u: ShootingUnknowns, r):
    """Residual vector of the shooting system (order documented in the module docstring)."""
    _check_sizes(bounds, u)
    r = sys.check_param(r)
    fields, segs = _arcs(sys, r, u, monodromy=False)
    N0, Nf = bounds.initial, bounds.final
    ell1, ell2, ellf = segs[0].ell1, segs[1].ell1, segs[2].ell1
    parts = [
        N0.values(r, u.x),
        u.p - N0.gradients(r, u.x).T @ u.a,
        [u.p @ fields[0](u.x) - 1.0],
        [ell1.p @ fields[1](ell1.x) - 1.0],
        [ell2.p @ fields[2](ell2.x) - 1.0],
        Nf.values(r, ellf.x),
        ellf.p - Nf.gradients(r, ellf.x).T @ u.b,
    ]
    return np.concatenate([np.atleast_1d(np.asarray(q, float)) for q in parts])


def _variational_jacobian(sys, bounds, u, r):
    n = u.n
    na, nb = bounds.initial.codim, bounds.final.codim
    fields, segs = _arcs(sys, r, u, monodromy=True)
    N0, Nf = bounds.initial, bounds.final
    z0 = np.concatenate([u.p, u.x])
    z1, z2, zf = (s.ell1.as_vector() for s in segs)
    P1, P2, P3 = (s.monodromy for s in segs)
    fh1, fk, fh2 = fields
    X1_at1 = hamiltonian_vector(fh1, z1)
    Xk_at2 = hamiltonian_vector(fk, z2)
    X2_atf = hamiltonian_vector(fh2, zf)
    # derivatives of l1, l2, lf with respect to (z0, t1, t2, t3)
    d1 = np.zeros((2 * n, 2 * n + 3))
    d1[:, :2 * n] = P1
    d1[:, 2 * n] = X1_at1
    d2 = np.zeros_like(d1)
    d2[:, :2 * n] = P2 @ P1
    d2[:, 2 * n] = P2 @ X1_at1 - Xk_at2
    d2[:, 2 * n + 1] = Xk_at2
    df = np.zeros_like(d1)
    df[:, :2 * n] = P3 @ d2[:, :2 * n]
    df[:, 2 * n] = P3 @ d2[:, 2 * n]
    df[:, 2 * n + 1] = P3 @ Xk_at2 - X2_atf
    df[:, 2 * n + 2] = X2_atf

    m = 4 * n + 3 - (n - na) - (n - nb)
    J = np.zeros((m, 2 * n + 3 + na + nb))
    row = 0
    G0 = N0.gradients(r, u.x)
    J[row:row + na, n:2 * n] = G0
    row += na
    J[row:row + n, :n] = np.eye(n)
    if na:
        J[row:row + n, n:2 * n] = -np.einsum("i,ijk->jk", u.a, N0.hessians(r, u.x))
        J[row:row + n, 2 * n + 3:2 * n + 3 + na] = -G0.T
    row += n
    J[row, :2 * n] = hamiltonian_gradient(fh1, z0)
    row += 1
    J[row, :2 * n + 3] = hamiltonian_gradient(fk, z1) @ d1
    row += 1
    J[row, :2 * n + 3] = hamiltonian_gradient(fh2, z2) @ d2
    row += 1
    xf = zf[n:]
    Gf = Nf.gradients(r, xf)
    J[row:row + nb, :2 * n + 3] = Gf @ df[n:]
    row += nb
    J[row:row + n, :2 * n + 3] = df[:n]
    if nb:
        J[row:row + n, :2 * n + 3] -= np.einsum("i,ijk->jk", u.b, Nf.hessians(r, xf)) @ df[n:]
        J[row:row + n, 2 * n + 3 + na:] = -Gf.T
    return J


def _fd_jacobian(sys, bounds, u, r, step=FD_STEP):
    v = u.to_vector()
    n, na, nb = u.n, u.a.size, u.b.size
    F0 = shooting_residual(sys, bounds, u, r)
    J = np.zeros((F0.size, v.size))
    for k in range(v.size):
        h = step * max(1.0, abs(v[k]))
        w = v.copy()
        w[k] += h
        J[:, k] = (shooting_residual(sys, bounds, ShootingUnknowns.from_vector(w, n, na, nb, u.nu), r) - F0) / h
    return J


def shooting_jacobian(sys, bounds, u: ShootingUnknowns, r, method="variational"):
    """Jacobian of :func:`shooting_residual` and its smallest singular value.

    ``method="variational"`` uses the Hamiltonian monodromies of the three
    arcs (exact up to integration error); ``method="fd"`` uses forward
    differences with step ``1e-7 * max(1, |u_k|)``.
    """
    _check_sizes(bounds, u)
    r = sys.check_param(r)
    if method == "variational":
        J = _variational_jacobian(sys, bounds, u, r)
    elif method == "fd":
        J = _fd_jacobian(sys, bounds, u, r)
    else:
        raise InvalidArgument(f"unknown Jacobian method {method!r}")
    sv = np.linalg.svd(J, compute_uv=False)
    return J, float(sv[-1])


# -- Newton ---------------------------------------------------------------------

def unknowns_from_extremal(sys, bounds, ext: BangBangExtremal, nu=None) -> ShootingUnknowns:
    """Shooting unknowns of an extremal; multipliers by least squares at both endpoints."""
    r = ext.param(sys)
    traj = simulate(sys, ext)
    a, _ = multipliers(bounds.initial, r, ext.ell0.x, ext.ell0.p, tol=np.inf)
    ellf = traj.ell_final
    b, _ = multipliers(bounds.final, r, ellf.x, ellf.p, tol=np.inf)
    ta, tb = ext.switch_times
    return ShootingUnknowns(ext.ell0.p, ext.ell0.x, ta, tb, ext.T, a, b, ext.nu if nu is None else nu)


def _safe_residual(sys, bounds, u, r):
    try:
        F = shooting_residual(sys, bounds, u, r)
    except (IntegrationFailure, FloatingPointError, np.linalg.LinAlgError, ValueError):
        return None
    return F if np.all(np.isfinite(F)) else None


def solve_branch(sys, bounds, r, guess: ShootingUnknowns, nu=None, max_iter=MAX_ITER, tol=NEWTON_TOL,
                 jacobian="variational", project=False) -> ContinuationRecord:
    """Damped Newton on the branch-``nu`` shooting system.

    Steps are backtracked (Armijo on the residual 2-norm) until
    ``|F|_inf <= tol``.  The switching instants are not forced into order
    unless ``project`` is set; a root with ``t2 < t1`` raises
    :class:`BranchMismatch` carrying the converged record.
    """
    nu = guess.nu if nu is None else nu
    r = sys.check_param(r)
    u = guess.with_nu(nu)
    n, na, nb = u.n, u.a.size, u.b.size
    F = _safe_residual(sys, bounds, u, r)
    if F is None:
        raise NewtonFailure("residual not evaluable at the initial guess", [])
    trace = [float(np.max(np.abs(F)))]
    it = 0
    while trace[-1] > tol:
        if it >= max_iter:
            raise NewtonFailure(f"no convergence in {max_iter} iterations (|F| = {trace[-1]:.3g})", trace)
        try:
            J, _ = shooting_jacobian(sys, bounds, u, r, jacobian)
        except DoubleSwitchError as exc:
            raise NewtonFailure(f"Jacobian evaluation failed: {exc}", trace) from exc
        step, *_ = np.linalg.lstsq(J, -F, rcond=None)
        v = u.to_vector()
        f2 = float(F @ F)
        lam = 1.0
        while True:
            w = v + lam * step
            if project:
                w[2 * n + 1] = max(w[2 * n + 1], w[2 * n])
                w[2 * n + 2] = max(w[2 * n + 2], w[2 * n + 1])
            cand = ShootingUnknowns.from_vector(w, n, na, nb, nu)
            Fc = _safe_residual(sys, bounds, cand, r)
            if Fc is not None and math.sqrt(float(Fc @ Fc)) <= (1.0 - 1e-4 * lam) * math.sqrt(f2):
                break
            lam *= 0.5
            if lam < 2.0 ** -30:
                # noise floor: accept a tiny residual that cannot be reduced further
                if trace[-1] <= ACCEPT_TOL:
                    return _finish(sys, bounds, u, r, F, it, trace, "converged-noise-floor")
                raise NewtonFailure(f"line search failed at |F| = {trace[-1]:.3g}", trace)
        u, F = cand, Fc
        it += 1
        trace.append(float(np.max(np.abs(F))))
    return _finish(sys, bounds, u, r, F, it, trace, "converged")


def _finish(sys, bounds, u, r, F, it, trace, status):
    try:
        _, smin = shooting_jacobian(sys, bounds, u, r)
    except DoubleSwitchError:
        smin = float("nan")
    rec = ContinuationRecord(r, u, float(np.max(np.abs(F))), smin, it,
                             "converged" if status.startswith("converged") else status, trace=trace)
    if status != "converged":
        rec.flags.append(status)
    if u.t2 - u.t1 < -DOUBLE_TOL:
        rec.status = "branch-mismatch"
        raise BranchMismatch(f"t2 < t1 at convergence (t2 - t1 = {u.t2 - u.t1:.3g})", rec)
    if not (0.0 < u.t1 and u.t2 < u.t3):
        rec.status = "invalid-times"
        raise NewtonFailure(f"converged to inadmissible times ({u.t1:.6g}, {u.t2:.6g}, {u.t3:.6g})", trace)
    if abs(u.t2 - u.t1) <= DOUBLE_TOL:
        rec.flags.append("double")
    return rec


def _same(u: ShootingUnknowns, w: ShootingUnknowns, tol=AGREE_TOL):
    return (np.max(np.abs(u.p - w.p)) <= tol and np.max(np.abs(u.x - w.x)) <= tol
            and abs(u.t3 - w.t3) <= tol)


def select_branch(sys, bounds, r, guess: ShootingUnknowns, prefer=1, **kw) -> ContinuationRecord:
    """Solve for the branch whose switching order is consistent.

    Tries ``prefer`` first and the other branch on a mismatch or Newton
    failure.  A double switch (``|t2 - t1| <= 1e-9``) is cross-checked on
    both branches and flagged ``"double"``; the branch-1 record is returned.
    Two valid but distinct roots are both reported (flag ``"ambiguous"``).
    """
    order = (prefer, 3 - prefer)
    errors = []
    found = []
    for nu in order:
        try:
            found.append(solve_branch(sys, bounds, r, guess, nu, **kw))
        except (BranchMismatch, NewtonFailure) as exc:
            errors.append(f"nu={nu}: {exc}")
            continue
        rec = found[-1]
        if not rec.is_double:
            # the other branch would need t2 - t1 < 0 near this root; still try to detect ambiguity
            try:
                other = solve_branch(sys, bounds, r, rec.unknowns, 3 - nu, **kw)
            except (BranchMismatch, NewtonFailure):
                return rec
            if other.is_double or _same(other.unknowns, rec.unknowns):
                return rec
            rec.flags.append("ambiguous")
            rec.alternative = other
            return rec
        break
    if not found:
        raise ContinuationFailure(f"both branches failed at r={np.asarray(r).tolist()}: " + "; ".join(errors))
    rec = found[-1]
    # double switch: both branches must give the same extremal
    try:
        other = solve_branch(sys, bounds, r, rec.unknowns, 3 - rec.nu, **kw)
        agree = _same(other.unknowns, rec.unknowns)
    except (BranchMismatch, NewtonFailure) as exc:
        other, agree = exc, False
    rec.margins["branches_agree"] = bool(agree)
    if not agree:
        rec.flags.append("branch-disagreement")
    if rec.nu != 1 and isinstance(other, ContinuationRecord):
        other.flags = rec.flags
        other.margins = rec.margins
        rec = other
    return rec


# -- margins and certificates ------------------------------------------------------

def _bracket_values(sys, r, traj, times, pairs):
    """``<p(t), [f_i, f_j](x(t))>`` for each ``(i, j)`` in ``pairs``; fields indexed 0, 1, 2."""
    f = sys.fields(r)
    P = np.atleast_2d(traj.point(times))
    n = traj.n
    out = np.empty((P.shape[0], len(pairs)))
    for k in range(P.shape[0]):
        p, x = P[k, :n], P[k, n:]
        vals = [fi(x) for fi in f]
        jacs = [fi.jacobian(x) for fi in f]
        for m, (i, j) in enumerate(pairs):
            out[k, m] = p @ (jacs[j] @ vals[i] - jacs[i] @ vals[j])
    return out


def _window_times(ext, lo, hi, count=401):
    lo, hi = max(0.0, lo), min(ext.T, hi)
    extra = [t for t in ext.breakpoints if lo <= t <= hi]
    return np.unique(np.concatenate([np.linspace(lo, hi, count), extra]))


def persistence_margins(sys, ext: BangBangExtremal, tau_ref, eps, traj=None):
    """Quantities that certify regular switches near a former double switch.

    ``F_i`` must be negative on ``[0, tau_ref - eps]`` and positive on
    ``[tau_ref + eps, T]``; inside the window the four products
    ``sigma(H1, K_nu)`` and ``sigma(K_nu, H2)`` must be positive.
    """
    traj = traj or simulate(sys, ext)
    r = ext.param(sys)
    m, _ = bang_margins(sys, ext, eps, traj, ref_times=(tau_ref, tau_ref))
    t = _window_times(ext, tau_ref - eps, tau_ref + eps)
    # bracket values a=[f0,f1], b=[f0,f2], c=[f1,f2] along the arc
    B = _bracket_values(sys, r, traj, t, [(0, 1), (0, 2), (1, 2)])
    a, b, c = B[:, 0], B[:, 1], B[:, 2]
    window = {"hk1_in": 2 * (a + c), "hk1_out": 2 * (b + c), "hk2_in": 2 * (b - c), "hk2_out": 2 * (a - c)}
    out = {f"F{i}_{side}": v for (i, side), v in m.items()}
    out.update({k: float(np.min(v)) for k, v in window.items()})
    return out


def tube_margins(sys, nominal: BangBangExtremal, delta, traj=None):
    """``alpha^a_i(delta)``, ``alpha^p_i(delta)`` and ``m(delta)`` along the nominal extremal.

    ``m(delta)`` is the minimum over ``i`` and ``t`` in ``[tau - delta, tau + delta]``
    of ``<l, [f0, f_i]> - |<l, [f1, f2]>|``.  Empty domains give ``+inf``.
    """
    traj = traj or simulate(sys, nominal)
    tau = nominal.switch_times[0]
    m, _ = bang_margins(sys, nominal, delta, traj)
    out = {}
    for i in (1, 2):
        out[f"alpha_a{i}"] = m[(i, "before")]
        out[f"alpha_p{i}"] = m[(i, "after")]
    t = _window_times(nominal, tau - delta, tau + delta)
    B = _bracket_values(sys, nominal.param(sys), traj, t, [(0, 1), (0, 2), (1, 2)])
    out["m"] = float(np.min(np.minimum(B[:, 0], B[:, 1]) - np.abs(B[:, 2]))) if t.size else math.inf
    return out


def quarter_margin_check(sys, ext_r: BangBangExtremal, nominal: BangBangExtremal, delta, margins, traj=None):
    """Check the perturbed extremal against a quarter of the nominal margins.

    Returns ``(ok, worst)`` where ``worst`` holds, per quantity, the slack
    (value minus bound; positive is good).
    """
    traj = traj or simulate(sys, ext_r)
    r = ext_r.param(sys)
    tau = nominal.switch_times[0]
    times, _ = _grid(traj, 800)
    F = np.array([[p[:traj.n] @ fi(p[traj.n:]) for fi in sys.fields(r)] for p in traj.point(times)])
    worst = {}
    for i in (1, 2):
        pre = times <= tau - delta
        post = times >= tau + delta
        if np.any(pre):
            worst[f"F{i}_before"] = float(np.min(-F[pre, i] - margins[f"alpha_a{i}"] / 4.0))
        if np.any(post):
            worst[f"F{i}_after"] = float(np.min(F[post, i] - margins[f"alpha_p{i}"] / 4.0))
    t = _window_times(ext_r, tau - delta, tau + delta)
    if t.size:
        B = _bracket_values(sys, r, traj, t, [(0, 1), (0, 2), (1, 2)])
        worst["window"] = float(np.min(np.minimum(B[:, 0], B[:, 1]) - np.abs(B[:, 2])) - margins["m"] / 4.0)
    ok = all(v > 0 for v in worst.values())
    return ok, worst


def window_width(nominal: BangBangExtremal, ext: BangBangExtremal):
    """Switch window half-width: the default delta, widened to twice the switch drift.

    Capped at half the distance from the nominal switch to either end.
    """
    tau = nominal.switch_times[0]
    drift = max(abs(ext.tau1 - tau), abs(ext.tau2 - tau))
    cap = 0.5 * min(tau, nominal.T - tau)
    return float(min(max(default_delta(nominal), 2.0 * drift), cap))


def certify(sys, bounds, rec: ContinuationRecord, nominal: BangBangExtremal, eps=None, secondvar=True,
            injectivity_samples=1000):
    """Per-record certificate: PMP, regular switches, injectivity and second-variation coercivity."""
    from .secondvar import analyze

    ext = rec.extremal
    if eps is None:
        eps = window_width(nominal, ext)
    cert = {"eps": eps}
    try:
        traj = simulate(sys, ext)
        pmp = check_pmp(sys, bounds, ext, per_arc=500, traj=traj)
        cert["pmp"] = all(c.passed for c in pmp)
        cert["pmp_worst"] = max(c.margin for c in pmp if c.status != "skipped")
        pm = persistence_margins(sys, ext, nominal.switch_times[0], eps, traj)
        rec.margins.update(pm)
        cert["regular_switches"] = all(v > 0 for v in pm.values())
        inj = check_injectivity(sys, ext, samples=injectivity_samples, traj=traj)[0]
        cert["injectivity"] = inj.passed
        rec.margins["injectivity"] = inj.margin
        if secondvar:
            nus = (1, 2) if rec.is_double else (rec.nu,)
            sv = analyze(sys, bounds, ext, nus=nus)
            cert["coercive"] = sv.coercive
            cert["hestenes_rho"] = sv.rho
            cert["min_eig"] = min(rep.min_eig for rep in sv.constrained.values())
            cert["min_eig_extended"] = min((rep.min_eig for rep in sv.extended.values()), default=None)
        cert["nonsingular"] = bool(rec.jacobian_min_sv > 1e-8)
    except DoubleSwitchError as exc:
        cert["error"] = str(exc)
    keys = ["pmp", "regular_switches", "injectivity", "nonsingular"] + (["coercive"] if secondvar else [])
    cert["certified"] = all(cert.get(k, False) for k in keys)
    rec.certificate = cert
    return cert


def thread_count():
    """Worker threads for parallel checks, from ``DOUBLESWITCH_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("DOUBLESWITCH_THREADS", "1")))
    except ValueError:
        raise InvalidArgument("DOUBLESWITCH_THREADS must be an integer") from None


def richardson_ratio(sys, bounds, record: ContinuationRecord, hs=(0.02, 0.01, 0.005), direction=None):
    """Central-difference estimates of ``dT/dr`` at ``record.r`` and their Richardson ratio.

    With ``D(h) = (T(r + h e) - T(r - h e)) / 2h`` and ``hs = (h, h/2, h/4)``,
    the ratio ``(D(h) - D(h/2)) / (D(h/2) - D(h/4))`` tends to 4 for a
    smooth ``T``.  Returns ``(ratio, estimates)``.
    """
    if len(hs) != 3:
        raise InvalidArgument("need exactly three step sizes")
    e = np.zeros(record.r.size)
    e[0] = 1.0
    if direction is not None:
        e = np.asarray(direction, float) / np.linalg.norm(direction)

    def T(r):
        return select_branch(sys, bounds, r, record.unknowns, prefer=record.nu).T

    D = [(T(record.r + h * e) - T(record.r - h * e)) / (2.0 * h) for h in hs]
    den = D[1] - D[2]
    ratio = (D[0] - D[1]) / den if den != 0 else math.inf
    return float(ratio), D


# -- sweep ---------------------------------------------------------------------

def parse_r_path(spec, param_dim=1):
    """``"a:b:k"`` -> ``k + 1`` points from ``a`` to ``b`` (k steps); a list is taken as given."""
    if isinstance(spec, str):
        parts = spec.split(":")
        if len(parts) != 3:
            raise InvalidArgument(f"r-path must look like 'start:stop:steps', got {spec!r}")
        try:
            a, b, k = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise InvalidArgument(f"r-path must look like 'start:stop:steps', got {spec!r}") from None
        if k < 0:
            raise InvalidArgument("number of steps must be >= 0")
        vals = np.linspace(a, b, k + 1) if k > 0 else np.array([a])
        path = [np.full(param_dim, v) if param_dim == 1 else np.r_[v, np.zeros(param_dim - 1)] for v in vals]
        return path
    return [np.atleast_1d(np.asarray(v, float)) for v in spec]


@dataclass
class SweepResult:
    records: List[ContinuationRecord]
    complete: bool
    failure: Optional[dict] = None
    elapsed: float = 0.0

    def to_dict(self):
        return {"complete": self.complete, "failure": _jsonable(self.failure),
                "records": [r.to_dict() for r in self.records]}


def sweep(sys, bounds, r_path: Sequence, start, predictor="secant", certify_records=True, secondvar=True,
          min_step_frac=1e-6, nominal=None, workers=None, **kw) -> SweepResult:
    """Continue the extremal ``start`` (a :class:`BangBangExtremal` at ``r_path[0]``) along ``r_path``.

    Each step uses a secant (or constant) predictor and :func:`select_branch`
    as corrector; failed steps are halved down to ``min_step_frac`` of the
    path length.  Returns the records at the requested parameters, partial
    on failure.  Certificates run on ``workers`` threads (default
    :func:`thread_count`).
    """
    t0 = time.perf_counter()
    path = [sys.check_param(r) for r in r_path]
    if not path:
        raise InvalidArgument("empty parameter path")
    nominal = nominal or (start if isinstance(start, BangBangExtremal) else None)
    guess = unknowns_from_extremal(sys, bounds, start) if isinstance(start, BangBangExtremal) else start
    length = sum(float(np.linalg.norm(b - a)) for a, b in zip(path[:-1], path[1:]))
    min_step = min_step_frac * max(length, 1e-300)
    records = []
    history = []  # (r, vector, nu) of every accepted solve, for the predictor

    def predict(r_new):
        if predictor == "secant" and len(history) >= 2:
            (ra, va, _), (rb, vb, _) = history[-2], history[-1]
            d = rb - ra
            dd = float(d @ d)
            if dd > 0:
                s = float((r_new - rb) @ d) / dd
                return vb + s * (vb - va)
        return history[-1][1]

    def solve_at(r, g, prefer):
        return select_branch(sys, bounds, r, g, prefer=prefer, **kw)

    try:
        rec = solve_at(path[0], guess, guess.nu)
    except ContinuationFailure as exc:
        return SweepResult([], False, {"r": path[0], "reason": str(exc)}, time.perf_counter() - t0)
    n, na, nb = guess.n, guess.a.size, guess.b.size
    history.append((path[0], rec.unknowns.to_vector(), rec.nu))
    records.append(rec)
    failure = None
    for target in path[1:]:
        cur = history[-1][0]
        while True:
            step_to = target
            ok = False
            while True:
                g = ShootingUnknowns.from_vector(predict(step_to), n, na, nb, history[-1][2])
                try:
                    rec = solve_at(step_to, g, history[-1][2])
                    ok = True
                    break
                except ContinuationFailure:
                    h = float(np.linalg.norm(step_to - cur))
                    if h / 2.0 < min_step:
                        break
                    step_to = cur + 0.5 * (step_to - cur)
            if not ok:
                failure = {"r": step_to, "reason": "step-halving exhausted"}
                break
            history.append((step_to, rec.unknowns.to_vector(), rec.nu))
            cur = step_to
            if np.array_equal(step_to, target):
                break
        if failure:
            break
        records.append(rec)
    if certify_records:
        nom = nominal or records[0].extremal
        with ThreadPoolExecutor(max_workers=workers or thread_count()) as pool:
            list(pool.map(lambda rec: certify(sys, bounds, rec, nom, secondvar=secondvar), records))
    return SweepResult(records, failure is None, failure, time.perf_counter() - t0)


# -- uniqueness ------------------------------------------------------------------

def uniqueness_tube_check(sys, bounds, record: ContinuationRecord, nominal: BangBangExtremal, delta=None,
                          n_starts=50, seed=0, radius=None, workers=None):
    """Margins and multi-start probe of uniqueness inside the tube around ``nominal``.

    (a) the nominal margins ``alpha^a_i, alpha^p_i, m`` at ``delta`` (default
    :func:`window_width`, so the perturbed switches lie inside the window) and the
    quarter-margin bounds for the extremal of ``record``; (b) ``n_starts``
    Newton runs from guesses perturbed by at most ``radius`` (relative, on
    the covector and state) and ``delta / 4`` (on the times).  Every
    converged root inside the tube must coincide with the record to 1e-8;
    otherwise :class:`UniquenessViolation` is raised.
    """
    delta = window_width(nominal, record.extremal) if delta is None else float(delta)
    margins = tube_margins(sys, nominal, delta)
    finite = [v for v in margins.values() if math.isfinite(v)]
    margins_ok = all(v > 0 for v in finite)
    quarter_ok, slack = quarter_margin_check(sys, record.extremal, nominal, delta, margins)
    if radius is None:
        # covector/state perturbation proportional to the smallest margin
        radius = 0.25 * min(finite) if finite else 1e-3
    rng = np.random.default_rng(seed)
    base = record.unknowns
    v0 = base.to_vector()
    n, na, nb = base.n, base.a.size, base.b.size
    guesses = []
    for _ in range(int(n_starts)):
        w = v0.copy()
        scale = np.maximum(1.0, np.abs(w))
        w[:2 * n] += radius * scale[:2 * n] * rng.uniform(-1, 1, 2 * n)
        w[2 * n:2 * n + 3] += 0.25 * min(delta, default_delta(nominal)) * rng.uniform(-1, 1, 3)
        w[2 * n + 3:] += radius * scale[2 * n + 3:] * rng.uniform(-1, 1, na + nb)
        guesses.append(ShootingUnknowns.from_vector(w, n, na, nb, base.nu))

    def run(g):
        try:
            return select_branch(sys, bounds, record.r, g, prefer=base.nu)
        except DoubleSwitchError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=workers or thread_count()) as pool:
        outcomes = list(pool.map(run, guesses))
    converged, coincide, distinct, failed = 0, 0, [], 0
    for out in outcomes:
        if not isinstance(out, ContinuationRecord):
            failed += 1
            continue
        converged += 1
        u = out.unknowns
        tau_u, tau_b = np.array(u.switching_times), np.array(base.switching_times)
        dist = max(np.max(np.abs(u.p - base.p)), np.max(np.abs(u.x - base.x)),
                   np.max(np.abs(tau_u - tau_b)), abs(u.t3 - base.t3))
        if dist <= AGREE_TOL:
            coincide += 1
        elif abs(u.t3 - nominal.T) < delta and np.all(np.abs(tau_u - nominal.switch_times[0]) < delta):
            distinct.append(out)
    result = {
        "delta": delta,
        "margins": margins,
        "margins_positive": margins_ok,
        "quarter_bounds": quarter_ok,
        "quarter_slack": slack,
        "n_starts": int(n_starts),
        "converged": converged,
        "coincident": coincide,
        "failed": failed,
        "distinct": len(distinct),
        "radius": radius,
    }
    result["verdict"] = bool(margins_ok and quarter_ok and not distinct and coincide == converged)
    if distinct:
        raise UniquenessViolation(f"{len(distinct)} distinct extremal(s) inside the tube", [record] + distinct)
    return result


# -- export ---------------------------------------------------------------------

def export_sweep_csv(path, records: Sequence[ContinuationRecord]):
    """One row per record; floats with 17 significant digits."""
    if not records:
        raise InvalidArgument("no records to export")
    k = records[0].r.size
    header = [f"r{i + 1}" for i in range(k)] + ["nu", "tau1", "tau2", "T", "gap", "residual", "min_sv",
                                                  "coercive", "certified", "status"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for rec in records:
            c = rec.certificate
            row = [f"{v:.17g}" for v in rec.r]
            row += [rec.nu] + [f"{v:.17g}" for v in (rec.tau[0], rec.tau[1], rec.T, rec.switch_gap,
                                                       rec.residual_norm, rec.jacobian_min_sv)]
            row += [c.get("coercive", ""), c.get("certified", ""), rec.status]
            w.writerow(row)


def export_sweep_json(path, result: SweepResult):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)

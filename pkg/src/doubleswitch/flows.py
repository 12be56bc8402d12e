"""State, variational and Hamiltonian flows.

All integrations use the embedded Runge-Kutta 5(4) pair of
:func:`scipy.integrate.solve_ivp` with dense output.  The variational
(monodromy) equation is integrated jointly with the state, and optionally the
second-order variational equation as well, so that the Jacobian and Hessian
of a flow map are available without finite differencing the flow.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationFailure, NumericalFailure
from .fields import CotangentPoint, VectorField

RTOL = 1e-10
ATOL = 1e-12
COND_WARN = 1e12

__all__ = [
    "FlowSegment",
    "PiecewiseFlow",
    "HamiltonianFlowSegment",
    "integrate_flow",
    "integrate_piecewise",
    "integrate_hamiltonian",
    "pullback_field",
    "adjoint_pullback",
    "symplectic_matrix",
    "export_trajectory_csv",
]


def _run(rhs, t0, t1, y0, dense, rtol, atol):
    sol = solve_ivp(rhs, (t0, t1), y0, method="RK45", rtol=rtol, atol=atol, dense_output=dense)
    if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
        last = float(sol.t[-1]) if sol.t.size else t0
        raise IntegrationFailure(f"integration failed at t={last:g}: {sol.message}", last_time=last)
    return sol


def _state_rhs(field: VectorField, n, order):
    if order == 0:
        return lambda t, y: field(y)

    def rhs(t, y):
        x = y[:n]
        Y = y[n : n + n * n].reshape(n, n)
        Df = field.jacobian(x)
        dY = Df @ Y
        if order == 1:
            return np.concatenate([field(x), dY.ravel()])
        Z = y[n + n * n :].reshape(n, n, n)
        H = field.hessian(x)
        dZ = np.einsum("im,mjk->ijk", Df, Z) + np.einsum("iml,mj,lk->ijk", H, Y, Y)
        return np.concatenate([field(x), dY.ravel(), dZ.ravel()])

    return rhs


@dataclass
class FlowSegment:
    """Flow of one autonomous field from ``t0`` to ``t1`` started at ``x0``.

    ``monodromy`` is the Jacobian of the flow map at ``x0`` (identity when the
    segment has zero length) and ``second`` its Hessian tensor,
    ``second[i, j, k] = d^2 S_i / dx_j dx_k``, when requested.
    """

    field: VectorField
    t0: float
    t1: float
    x0: np.ndarray
    x1: np.ndarray
    monodromy: Optional[np.ndarray] = None
    second: Optional[np.ndarray] = None
    _sol: object = dc_field(default=None, repr=False)
    _Y0: Optional[np.ndarray] = dc_field(default=None, repr=False)
    _Z0: Optional[np.ndarray] = dc_field(default=None, repr=False)

    @property
    def n(self):
        return self.x0.size

    @property
    def order(self):
        return 2 if self.second is not None else (1 if self.monodromy is not None else 0)

    def state(self, t):
        """State at time(s) ``t`` from the dense output; shape ``(n,)`` or ``(len(t), n)``."""
        t = np.asarray(t, dtype=float)
        if self._sol is None:
            out = np.broadcast_to(self.x0, t.shape + (self.n,)).copy()
            return out
        y = self._sol(t)[: self.n]
        return y.T if t.ndim else y

    @property
    def condition(self):
        return float(np.linalg.cond(self.monodromy)) if self.monodromy is not None else 1.0

    def reintegrate(self, x, order=2):
        return integrate_flow(self.field, x, self.t0, self.t1, monodromy=order >= 1, second_order=order >= 2)


def integrate_flow(field: VectorField, x0, t0, t1, monodromy=True, second_order=False,
                   Y0=None, Z0=None, dense=True, rtol=RTOL, atol=ATOL) -> FlowSegment:
    """Integrate ``x' = field(x)`` from ``t0`` to ``t1`` (``t1 < t0`` allowed).

    ``Y0`` / ``Z0`` seed the variational states, which lets piecewise flows be
    chained without multiplying monodromies by hand.
    """
    x0 = np.array(x0, dtype=float).reshape(-1)
    n = x0.size
    order = 2 if second_order else (1 if monodromy else 0)
    Y0 = np.eye(n) if Y0 is None else np.asarray(Y0, float)
    Z0 = np.zeros((n, n, n)) if Z0 is None else np.asarray(Z0, float)
    if t1 == t0:
        return FlowSegment(field, t0, t1, x0, x0.copy(),
                           Y0.copy() if order >= 1 else None,
                           Z0.copy() if order >= 2 else None, None, Y0, Z0)
    y0 = [x0]
    if order >= 1:
        y0.append(Y0.ravel())
    if order >= 2:
        y0.append(Z0.ravel())
    sol = _run(_state_rhs(field, n, order), t0, t1, np.concatenate(y0), dense, rtol, atol)
    y = sol.y[:, -1]
    M = y[n : n + n * n].reshape(n, n) if order >= 1 else None
    Z = y[n + n * n :].reshape(n, n, n) if order >= 2 else None
    seg = FlowSegment(field, t0, t1, x0, y[:n].copy(), M, Z, sol.sol if dense else None, Y0, Z0)
    if M is not None and seg.condition > COND_WARN:
        warnings.warn(f"ill-conditioned monodromy (cond={seg.condition:.3g})", RuntimeWarning)
    return seg


class PiecewiseFlow:
    """Concatenation of flows of several fields over consecutive time intervals."""

    def __init__(self, segments: Sequence[FlowSegment]):
        self.segments = list(segments)
        if not self.segments:
            raise ValueError("empty piecewise flow")

    @property
    def t0(self):
        return self.segments[0].t0

    @property
    def t1(self):
        return self.segments[-1].t1

    @property
    def x0(self):
        return self.segments[0].x0

    @property
    def x1(self):
        return self.segments[-1].x1

    @property
    def n(self):
        return self.x0.size

    @property
    def monodromy(self):
        return self.segments[-1].monodromy

    @property
    def second(self):
        return self.segments[-1].second

    @property
    def order(self):
        return self.segments[-1].order

    @property
    def fields(self):
        return [s.field for s in self.segments]

    @property
    def breakpoints(self):
        return [self.segments[0].t0] + [s.t1 for s in self.segments]

    def at_breakpoint(self, k):
        """(x, M, Z) at the end of segment ``k`` (``k = -1`` for the start)."""
        if k < 0:
            s = self.segments[0]
            return s.x0, s._Y0, s._Z0
        s = self.segments[k]
        return s.x1, s.monodromy, s.second

    def state(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        out = np.empty((tt.size, self.n))
        for i, ti in enumerate(tt):
            for s in self.segments:
                lo, hi = min(s.t0, s.t1), max(s.t0, s.t1)
                if ti <= hi or s is self.segments[-1]:
                    out[i] = s.state(np.clip(ti, lo, hi))
                    break
        return out[0] if scalar else out

    def reintegrate(self, x, order=2):
        return integrate_piecewise(self.fields, self.breakpoints, x, monodromy=order >= 1,
                                   second_order=order >= 2)


def integrate_piecewise(fields, breakpoints, x0, monodromy=True, second_order=False) -> PiecewiseFlow:
    """Flow of a piecewise-autonomous field ``fields[k]`` on ``[breakpoints[k], breakpoints[k+1]]``."""
    if len(breakpoints) != len(fields) + 1:
        raise ValueError("need one more breakpoint than fields")
    segs = []
    x, Y, Z = np.asarray(x0, float), None, None
    for f, ta, tb in zip(fields, breakpoints[:-1], breakpoints[1:]):
        s = integrate_flow(f, x, ta, tb, monodromy=monodromy, second_order=second_order, Y0=Y, Z0=Z)
        segs.append(s)
        x, Y, Z = s.x1, s.monodromy, s.second
    return PiecewiseFlow(segs)


def symplectic_matrix(n):
    """Canonical form in ``(p, x)`` coordinates, for which ``z' = J grad F``."""
    J = np.zeros((2 * n, 2 * n))
    J[:n, n:] = -np.eye(n)
    J[n:, :n] = np.eye(n)
    return J


def _hamiltonian_rhs(field: VectorField, n, monodromy):
    def rhs(t, y):
        p, x = y[:n], y[n : 2 * n]
        Df = field.jacobian(x)
        dz = np.concatenate([-(p @ Df), field(x)])
        if not monodromy:
            return dz
        Phi = y[2 * n :].reshape(2 * n, 2 * n)
        Jz = np.zeros((2 * n, 2 * n))
        Jz[:n, :n] = -Df.T
        Jz[:n, n:] = -np.einsum("i,ijk->jk", p, field.hessian(x))
        Jz[n:, n:] = Df
        return np.concatenate([dz, (Jz @ Phi).ravel()])

    return rhs


@dataclass
class HamiltonianFlowSegment:
    """Flow of the Hamiltonian lift ``(-p Df, f)`` of ``field``; ``monodromy`` is 2n x 2n."""

    field: VectorField
    t0: float
    t1: float
    ell0: CotangentPoint
    ell1: CotangentPoint
    monodromy: Optional[np.ndarray] = None
    _sol: object = dc_field(default=None, repr=False)

    @property
    def n(self):
        return self.ell0.dim

    def point(self, t):
        """``[p, x]`` at time(s) ``t``; shape ``(2n,)`` or ``(len(t), 2n)``."""
        t = np.asarray(t, dtype=float)
        z0 = self.ell0.as_vector()
        if self._sol is None:
            return np.broadcast_to(z0, t.shape + (2 * self.n,)).copy()
        z = self._sol(t)[: 2 * self.n]
        return z.T if t.ndim else z

    def hamiltonian_values(self, t):
        z = np.atleast_2d(self.point(t))
        n = self.n
        return np.array([zi[:n] @ self.field(zi[n:]) for zi in z])


def integrate_hamiltonian(field: VectorField, ell0, t0, t1, monodromy=True, dense=True,
                          rtol=RTOL, atol=ATOL) -> HamiltonianFlowSegment:
    """Integrate ``x' = f(x), p' = -p Df(x)`` jointly, with the symplectic monodromy."""
    if not isinstance(ell0, CotangentPoint):
        ell0 = CotangentPoint.from_vector(ell0)
    n = ell0.dim
    if t1 == t0:
        return HamiltonianFlowSegment(field, t0, t1, ell0, ell0, np.eye(2 * n) if monodromy else None)
    y0 = [ell0.as_vector()]
    if monodromy:
        y0.append(np.eye(2 * n).ravel())
    sol = _run(_hamiltonian_rhs(field, n, monodromy), t0, t1, np.concatenate(y0), dense, rtol, atol)
    y = sol.y[:, -1]
    M = y[2 * n :].reshape(2 * n, 2 * n) if monodromy else None
    return HamiltonianFlowSegment(field, t0, t1, ell0, CotangentPoint.from_vector(y[: 2 * n]), M,
                                  sol.sol if dense else None)


def _second_order_data(flow, x):
    if np.array_equal(np.asarray(x, float), flow.x0) and flow.order >= 2:
        return flow.x1, flow.monodromy, flow.second
    s = flow.reintegrate(x, order=2)
    return s.x1, s.monodromy, s.second


def pullback_field(flow, g: VectorField) -> VectorField:
    """Transport ``g`` back along ``flow``: ``x -> M(x)^{-1} g(S(x))``.

    ``S`` is the flow map from ``flow.t0`` to ``flow.t1`` started at ``x`` and
    ``M`` its Jacobian.  Every evaluation away from ``flow.x0`` re-integrates;
    at ``flow.x0`` the stored data is reused.  The Jacobian is exact up to
    integration error: ``M^{-1} (Dg(S) M - D^2S[M^{-1} g(S), .])``.
    """
    if flow.t0 == flow.t1:
        return g
    cache = {}

    def data(x):
        key = np.asarray(x, float).tobytes()
        if key not in cache:
            if len(cache) > 64:
                cache.clear()
            cache[key] = _second_order_data(flow, x)
        return cache[key]

    def func(x):
        y, M, _ = data(x)
        return np.linalg.solve(M, g(y))

    def jac(x):
        y, M, Z = data(x)
        u = np.linalg.solve(M, g(y))
        return np.linalg.solve(M, g.jacobian(y) @ M - np.einsum("ijk,j->ik", Z, u))

    return VectorField(func, jac, dim=g.dim, name=f"pullback({g.name})")


def adjoint_pullback(flow, p):
    """Covector ``p M^{-1}`` (transport of a covector at ``flow.t0`` to ``flow.t1``)."""
    M = flow.monodromy
    if M is None:
        raise ValueError("flow has no monodromy")
    if np.linalg.cond(M) > 1e14:
        raise NumericalFailure("singular monodromy")
    return np.linalg.solve(M.T, np.asarray(p, float))


def export_trajectory_csv(path, times, states, covectors=None):
    """Write ``t, x1..xn[, p1..pn]`` rows with 17 significant digits."""
    states = np.atleast_2d(states)
    n = states.shape[1]
    header = ["t"] + [f"x{i + 1}" for i in range(n)]
    if covectors is not None:
        covectors = np.atleast_2d(covectors)
        header += [f"p{i + 1}" for i in range(n)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(np.atleast_1d(times)):
            row = [t, *states[k]] + ([] if covectors is None else list(covectors[k]))
            w.writerow([f"{v:.17g}" for v in row])

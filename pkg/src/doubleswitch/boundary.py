"""Endpoint manifolds, their tangent spaces and penalty functions.

An endpoint manifold is the regular zero set of ``m`` scalar constraints
``Phi_i(r, x)``.  Penalty functions have the form

    alpha(x) = sum_i c_i Phi_i(x) + (rho / 2) sum_i Phi_i(x)^2

with ``c`` chosen so that ``d alpha`` equals a prescribed covector at an
anchor point on the manifold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateConstraint, HestenesFailure, InfeasiblePoint, TransversalityViolation
from .fields import CotangentPoint, PolynomialMap, fd_jacobian

FEAS_TOL = 1e-8
RANK_TOL = 1e-8
RHO_LADDER = tuple(10.0 ** k for k in range(9))


@dataclass(frozen=True)
class Constraint:
    """Scalar constraint ``(r, x) -> Phi(r, x)`` with gradient and Hessian in ``x``."""

    value: Callable
    grad: Callable
    hess: Optional[Callable] = None

    def hessian(self, r, x):
        if self.hess is not None:
            return np.asarray(self.hess(r, x), float)
        return fd_jacobian(lambda y: np.asarray(self.grad(r, y), float), x,
                           np.maximum(1e-5, 1e-5 * np.abs(x)))


class ConstraintManifold:
    """Zero level set ``{x : Phi_i(r, x) = 0, i = 1..codim}`` in R^n."""

    def __init__(self, constraints: Sequence[Constraint], n, kind="custom", spec=None):
        self.constraints = list(constraints)
        self.n = int(n)
        self.kind = kind
        self.spec = spec or {}

    def __repr__(self):
        return f"ConstraintManifold({self.kind}, n={self.n}, codim={self.codim})"

    @property
    def codim(self):
        return len(self.constraints)

    @property
    def dim(self):
        return self.n - self.codim

    def values(self, r, x):
        return np.array([float(c.value(r, x)) for c in self.constraints])

    def gradients(self, r, x):
        if not self.constraints:
            return np.zeros((0, self.n))
        return np.array([np.asarray(c.grad(r, x), float) for c in self.constraints])

    def hessians(self, r, x):
        if not self.constraints:
            return np.zeros((0, self.n, self.n))
        return np.array([c.hessian(r, x) for c in self.constraints])

    def min_singular_value(self, r, x):
        G = self.gradients(r, x)
        if G.shape[0] == 0:
            return np.inf
        return float(np.linalg.svd(G, compute_uv=False)[-1])

    def check_independent(self, r, x, tol=RANK_TOL):
        s = self.min_singular_value(r, x)
        if s <= tol:
            raise DegenerateConstraint(f"constraint gradients dependent (sigma_min={s:.3g})")
        return s

    def scaled(self, factor):
        """Same zero set with every ``Phi_i`` multiplied by ``factor``."""
        f = float(factor)
        cons = [
            Constraint(
                (lambda c: lambda r, x: f * c.value(r, x))(c),
                (lambda c: lambda r, x: f * np.asarray(c.grad(r, x), float))(c),
                (lambda c: lambda r, x: f * c.hessian(r, x))(c),
            )
            for c in self.constraints
        ]
        return ConstraintManifold(cons, self.n, kind=self.kind, spec=dict(self.spec, scale=f))


@dataclass(frozen=True)
class BoundaryConditions:
    """Initial manifold ``N0`` and final manifold ``Nf``."""

    initial: ConstraintManifold
    final: ConstraintManifold

    @property
    def n(self):
        return self.initial.n


# -- builtin shapes ---------------------------------------------------------

def _shift(base, dr, r):
    if dr is None:
        return base
    return base + dr @ np.atleast_1d(r)


def point_manifold(x_ref, r_shift=None) -> ConstraintManifold:
    """``{x_ref + r_shift @ r}``: codimension n."""
    x_ref = np.array(x_ref, float)
    n = x_ref.size
    R = None if r_shift is None else np.array(r_shift, float).reshape(n, -1)
    cons = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cons.append(Constraint(
            (lambda i: lambda r, x: x[i] - _shift(x_ref, R, r)[i])(i),
            (lambda e: lambda r, x: e.copy())(e),
            lambda r, x: np.zeros((n, n)),
        ))
    return ConstraintManifold(cons, n, "point", {"x": x_ref.tolist()})


def hyperplane_manifold(normal, offset, r_shift=None) -> ConstraintManifold:
    """``{x : <normal, x> = offset + <r_shift, r>}``."""
    w = np.array(normal, float)
    n = w.size
    d = None if r_shift is None else np.array(r_shift, float).reshape(1, -1)
    c = Constraint(
        lambda r, x: w @ x - float(_shift(np.array([offset], float), d, r)[0]),
        lambda r, x: w.copy(),
        lambda r, x: np.zeros((n, n)),
    )
    return ConstraintManifold([c], n, "hyperplane", {"normal": w.tolist(), "offset": float(offset)})


def sphere_manifold(center, radius) -> ConstraintManifold:
    """``{x : |x - center|^2 = radius^2}``."""
    c0 = np.array(center, float)
    n = c0.size
    c = Constraint(
        lambda r, x: float((x - c0) @ (x - c0) - radius ** 2),
        lambda r, x: 2.0 * (x - c0),
        lambda r, x: 2.0 * np.eye(n),
    )
    return ConstraintManifold([c], n, "sphere", {"center": c0.tolist(), "radius": float(radius)})


def level_set_manifold(poly: PolynomialMap) -> ConstraintManifold:
    """Common zero set of the components of a polynomial map."""
    cons = [
        Constraint(
            (lambda i: lambda r, x: float(poly.value(x)[i]))(i),
            (lambda i: lambda r, x: poly.jacobian(x)[i])(i),
            (lambda i: lambda r, x: poly.hessian(x)[i])(i),
        )
        for i in range(poly.m)
    ]
    return ConstraintManifold(cons, poly.n, "level-set polynomial")


def ambient_manifold(n) -> ConstraintManifold:
    """No constraint at all (the whole space)."""
    return ConstraintManifold([], n, "ambient")


# -- operations ---------------------------------------------------------------

def _sign_fix(V):
    for j in range(V.shape[1]):
        col = V[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            V[:, j] = -col
    return V


def tangent_basis(m: ConstraintManifold, r, x, tol=RANK_TOL, check_feasible=True):
    """Orthonormal basis (n x dim) of ``ker DPhi(r, x)``.

    Columns come from the SVD of the stacked gradients, each flipped so that
    its first nonzero entry is positive.
    """
    x = np.asarray(x, float)
    res = m.values(r, x)
    if check_feasible and res.size and np.max(np.abs(res)) > FEAS_TOL:
        raise InfeasiblePoint(f"point off the manifold (|Phi|_inf = {np.max(np.abs(res)):.3g})")
    G = m.gradients(r, x)
    if G.shape[0] == 0:
        return np.eye(m.n)
    if G.shape[0] == m.n:
        m.check_independent(r, x, tol)
        return np.zeros((m.n, 0))
    _, s, Vt = np.linalg.svd(G, full_matrices=True)
    if s[-1] <= tol:
        raise DegenerateConstraint(f"constraint gradients dependent (sigma_min={s[-1]:.3g})")
    return _sign_fix(Vt[G.shape[0]:].T.copy())


def normal_basis(m: ConstraintManifold, r, x):
    """Orthonormal basis (n x codim) of the row space of ``DPhi(r, x)``."""
    G = m.gradients(r, x)
    if G.shape[0] == 0:
        return np.zeros((m.n, 0))
    U, _, _ = np.linalg.svd(G.T, full_matrices=False)
    return U


def multipliers(m: ConstraintManifold, r, x, covector, tol=FEAS_TOL):
    """Least-squares ``c`` with ``DPhi(x)^T c = covector``; raises on a residual above ``tol``."""
    G = m.gradients(r, x)
    covector = np.asarray(covector, float)
    if G.shape[0] == 0:
        resid = float(np.linalg.norm(covector, np.inf))
        if resid > tol:
            raise TransversalityViolation("covector must vanish on an unconstrained endpoint", resid)
        return np.zeros(0), resid
    c, *_ = np.linalg.lstsq(G.T, covector, rcond=None)
    resid = float(np.linalg.norm(G.T @ c - covector, np.inf))
    if resid > tol * max(1.0, np.linalg.norm(covector, np.inf)):
        raise TransversalityViolation(f"covector not in the span of the constraint gradients "
                                      f"(residual {resid:.3g})", resid)
    return c, resid


@dataclass
class PenaltyFunction:
    """``sum c_i Phi_i + (rho/2) sum Phi_i^2`` with ``c`` fixed at the anchor."""

    manifold: ConstraintManifold
    r: np.ndarray
    anchor: CotangentPoint
    sign: float
    rho: float
    coefficients: np.ndarray
    residual: float = 0.0

    def value(self, x):
        phi = self.manifold.values(self.r, x)
        return float(self.coefficients @ phi + 0.5 * self.rho * phi @ phi)

    def gradient(self, x):
        phi = self.manifold.values(self.r, x)
        G = self.manifold.gradients(self.r, x)
        return (self.coefficients + self.rho * phi) @ G

    def hessian(self, x):
        n = self.manifold.n
        if self.manifold.codim == 0:
            return np.zeros((n, n))
        phi = self.manifold.values(self.r, x)
        G = self.manifold.gradients(self.r, x)
        Hs = self.manifold.hessians(self.r, x)
        return np.einsum("i,ijk->jk", self.coefficients + self.rho * phi, Hs) + self.rho * G.T @ G

    def with_rho(self, rho):
        return PenaltyFunction(self.manifold, self.r, self.anchor, self.sign, float(rho),
                               self.coefficients, self.residual)


def build_penalty(m: ConstraintManifold, anchor: CotangentPoint, sign=1.0, rho=0.0, r=None) -> PenaltyFunction:
    """Penalty vanishing on ``m`` with differential ``sign * anchor.p`` at ``anchor.x``.

    Raises :class:`TransversalityViolation` when ``anchor.p`` is not a
    combination of the constraint gradients.
    """
    r = np.zeros(1) if r is None else np.atleast_1d(np.asarray(r, float))
    res = m.values(r, anchor.x)
    if res.size and np.max(np.abs(res)) > FEAS_TOL:
        raise InfeasiblePoint(f"anchor off the manifold (|Phi|_inf = {np.max(np.abs(res)):.3g})")
    c, resid = multipliers(m, r, anchor.x, sign * anchor.p)
    return PenaltyFunction(m, r, anchor, float(sign), float(rho), c, resid)


class PulledBackManifold(ConstraintManifold):
    """``S^{-1}(N)`` for a flow map ``S``: constraints ``Phi_j o S``.

    Gradients are ``DPhi(S(x)) M(x)``; Hessians use the second-order flow data.
    Evaluation away from the flow's base point re-integrates.
    """

    def __init__(self, base: ConstraintManifold, flow, r):
        super().__init__([], base.n, kind=f"pullback({base.kind})")
        self.base = base
        self.flow = flow
        self.r_flow = np.atleast_1d(np.asarray(r, float))
        self._cache = {}

    @property
    def codim(self):
        return self.base.codim

    def _data(self, x, order):
        x = np.asarray(x, float)
        if np.array_equal(x, self.flow.x0) and self.flow.order >= order:
            f = self.flow
            return f.x1, f.monodromy, f.second
        if self.flow.t0 == self.flow.t1:
            return x, np.eye(self.n), np.zeros((self.n,) * 3)
        key = (x.tobytes(), order)
        if key not in self._cache:
            if len(self._cache) > 64:
                self._cache.clear()
            s = self.flow.reintegrate(x, order=order)
            self._cache[key] = (s.x1, s.monodromy, s.second)
        return self._cache[key]

    def values(self, r, x):
        y, _, _ = self._data(x, 0 if self.flow.order == 0 else 1)
        return self.base.values(r, y)

    def gradients(self, r, x):
        y, M, _ = self._data(x, 1)
        return self.base.gradients(r, y) @ M

    def hessians(self, r, x):
        y, M, Z = self._data(x, 2)
        G = self.base.gradients(r, y)
        Hs = self.base.hessians(r, y)
        return np.einsum("ab,jac,cd->jbd", M, Hs, M) + np.einsum("jk,kbd->jbd", G, Z)


def pullback_manifold(m: ConstraintManifold, flow, r=None) -> ConstraintManifold:
    """Pre-image of ``m`` under the flow map of ``flow`` (identity flow -> ``m`` itself)."""
    if flow.t0 == flow.t1:
        return m
    return PulledBackManifold(m, flow, np.zeros(1) if r is None else r)


def choose_rho(extended_check: Callable[[float], dict], constrained_coercive=True,
               ladder: Sequence[float] = RHO_LADDER):
    """Smallest rung of ``ladder`` making every extended form positive definite.

    ``extended_check(rho)`` returns ``{nu: (coercive, min_eig)}``.  Returns
    ``(rho, {rho: result})``; raises :class:`HestenesFailure` if the
    constrained forms are not coercive or the ladder is exhausted.
    """
    if not constrained_coercive:
        raise HestenesFailure("constrained forms are not coercive; no penalty weight can help")
    history = {}
    for rho in ladder:
        out = extended_check(float(rho))
        history[float(rho)] = out
        if all(ok for ok, _ in out.values()):
            return float(rho), history
    raise HestenesFailure(f"no weight in {list(ladder)} makes the extended forms coercive")

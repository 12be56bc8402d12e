"""Second variation of the finite-dimensional switching-time sub-problem.

Variables are ``(dx, a1, b, a2)``: an initial-point variation and the length
variations of the three arcs ``h1, k_nu, h2``.  With ``Z = a1 g1 + b j_nu +
a2 g2`` built from the pullbacks of the arc fields to time 0, the form is

    D^2(alpha + beta^)[dx]^2 + 2 L_dx L_Z beta^ + L_Z L_Z beta^
        + a1 b L_[g1, j] beta^ + a1 a2 L_[g1, g2] beta^ + b a2 L_[j, g2] beta^

at ``x0``, where ``beta^ = beta o S_T`` and ``L_v L_w f = D^2 f[v, w] +
Df (Dw v)``.  It is restricted to the space where ``dx + Z(x0)`` is tangent
to the pulled-back final manifold, optionally with ``dx`` tangent to ``N0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Dict, Optional

import numpy as np
from scipy.linalg import null_space

from .boundary import (BoundaryConditions, HestenesFailure, PenaltyFunction, build_penalty, choose_rho,
                       tangent_basis)
from .extremal import BangBangExtremal, simulate
from .fields import CotangentPoint, VectorField, constant_field, derived_field, lie_bracket, linear_combination
from .flows import integrate_flow, integrate_piecewise, pullback_field

EIG_TOL = 1e-8
PAIRS = ((0, 1), (0, 2), (1, 2))

__all__ = [
    "PullbackFrame",
    "QuadraticFormReport",
    "SecondVariationResult",
    "build_frame",
    "assemble_form",
    "evaluate_form_direct",
    "constraint_space",
    "coercivity_test",
    "initial_penalty",
    "analyze",
]


@dataclass
class PullbackFrame:
    """Pulled-back arc fields and the pulled-back final penalty at ``x0``.

    ``fields`` holds ``g1, g2, j1, j2`` (and ``j`` for the middle field of a
    split switch); ``beta_grad`` / ``beta_hess`` are the gradient and Hessian
    of ``beta o S_T`` at ``x0``; ``final_gradients`` are the gradients of the
    final constraints composed with ``S_T`` (their kernel is the tangent
    space of the pulled-back final manifold).
    """

    x0: np.ndarray
    p0: np.ndarray
    r: np.ndarray
    times: tuple
    fields: Dict[str, VectorField]
    values: Dict[str, np.ndarray]
    jacobians: Dict[str, np.ndarray]
    beta: PenaltyFunction
    beta_grad: np.ndarray
    beta_hess: np.ndarray
    final_gradients: np.ndarray
    initial_basis: np.ndarray
    bounds: BoundaryConditions
    flow: object = dc_field(default=None, repr=False)

    @property
    def n(self):
        return self.x0.size

    def coefficient_fields(self, nu):
        return [self.fields["g1"], self.fields[f"j{nu}"], self.fields["g2"]]

    def coefficient_values(self, nu):
        return np.column_stack([self.values["g1"], self.values[f"j{nu}"], self.values["g2"]])

    def coefficient_jacobians(self, nu):
        return [self.jacobians["g1"], self.jacobians[f"j{nu}"], self.jacobians["g2"]]

    def beta_hat(self, x):
        """``beta(S_T(x))`` by re-integration (slow; for oracles)."""
        y = self.flow.reintegrate(x, order=0).x1
        return self.beta.value(y)

    def beta_hat_gradient(self, x):
        s = self.flow.reintegrate(x, order=1)
        return self.beta.gradient(s.x1) @ s.monodromy


@dataclass
class QuadraticFormReport:
    """Matrix of the form, the constraint space and the restricted spectrum."""

    nu: int
    matrix: np.ndarray
    space: str = "V0"
    constraint_basis: Optional[np.ndarray] = None
    reduced_spectrum: Optional[np.ndarray] = None
    coercive: Optional[bool] = None
    min_eig: Optional[float] = None
    rho_used: Optional[float] = None
    details: dict = dc_field(default_factory=dict)

    @property
    def dim(self):
        return 0 if self.constraint_basis is None else int(self.constraint_basis.shape[1])

    def value(self, v):
        v = np.asarray(v, float)
        return float(v @ self.matrix @ v)

    def to_dict(self):
        me = self.min_eig
        return {
            "nu": self.nu,
            "space": self.space,
            "dim": self.dim,
            "min_eig": me if me is None or np.isfinite(me) else "inf",
            "coercive": self.coercive,
            "rho_used": self.rho_used,
        }


def build_frame(sys, ext: BangBangExtremal, bounds: BoundaryConditions, tau=None) -> PullbackFrame:
    """Pullbacks of ``h1, h2, k1, k2`` to time 0 and the data of ``beta o S_T`` at ``x0``.

    For a double switch all four fields are pulled back along the reference
    flow over ``[0, tau]``.  For split switches ``ta < tb`` the outgoing
    fields ``h2`` and ``k_nu`` are pulled back from ``tb`` and ``ta``
    respectively.  ``tau`` overrides the switching instant (0 gives the
    fields themselves).
    """
    r = ext.param(sys)
    ta, tb = ext.switch_times
    # the override moves the pullback instant only, never the reference trajectory
    pa, pb = (ta, tb) if tau is None else (float(tau), float(tau))
    T = ext.T
    x0 = ext.ell0.x
    h1, h2 = derived_field(sys, r, "H1"), derived_field(sys, r, "H2")
    ks = {nu: derived_field(sys, r, f"K{nu}") for nu in (1, 2)}
    nu_mid = ext.nu
    flow_a = integrate_flow(h1, x0, 0.0, pa, monodromy=True, second_order=True)
    if pb > pa:
        flow_b = integrate_piecewise([h1, ks[nu_mid]], [0.0, pa, pb], x0, monodromy=True, second_order=True)
    else:
        flow_b = flow_a
    fields = {
        "g1": pullback_field(flow_a, h1),
        "g2": pullback_field(flow_b, h2),
    }
    for nu in (1, 2):
        fields[f"j{nu}"] = pullback_field(flow_a, ks[nu])
    tags = ext.arc_tags
    ref = integrate_piecewise([derived_field(sys, r, t) for t in tags], [0.0, ta, tb, T], x0,
                              monodromy=True, second_order=True)
    # final covector from the Hamiltonian simulation, for the penalty anchor
    traj = simulate(sys, BangBangExtremal(ext.ell0, ext.tau1, ext.tau2, T, ext.branch, r))
    ell_f = traj.ell_final
    beta = build_penalty(bounds.final, CotangentPoint(ell_f.p, ref.x1), sign=-1.0, rho=0.0, r=r)
    M, Z = ref.monodromy, ref.second
    g = beta.gradient(ref.x1)
    beta_grad = g @ M
    beta_hess = M.T @ beta.hessian(ref.x1) @ M + np.einsum("k,kij->ij", g, Z)
    beta_hess = 0.5 * (beta_hess + beta_hess.T)
    Gf = bounds.final.gradients(r, ref.x1) @ M if bounds.final.codim else np.zeros((0, x0.size))
    V0 = tangent_basis(bounds.initial, r, x0, check_feasible=False)
    values = {k: f(x0) for k, f in fields.items()}
    jacs = {k: f.jacobian(x0) for k, f in fields.items()}
    return PullbackFrame(x0, ext.ell0.p, r, (ta, tb, T), fields, values, jacs, beta, beta_grad, beta_hess,
                         Gf, V0, bounds, ref)


def initial_penalty(frame: PullbackFrame, rho=0.0) -> PenaltyFunction:
    """Penalty vanishing on ``N0`` with differential ``p0`` at ``x0``."""
    return build_penalty(frame.bounds.initial, CotangentPoint(frame.p0, frame.x0), sign=1.0, rho=rho,
                         r=frame.r)


def assemble_form(frame: PullbackFrame, alpha: PenaltyFunction, nu) -> QuadraticFormReport:
    """Symmetric ``(n+3) x (n+3)`` matrix of the second variation for branch ``nu``.

    Bracket coefficients ``L_[v,w] beta^`` are split equally over the two
    symmetric off-diagonal entries.
    """
    n = frame.n
    W = frame.coefficient_values(nu)
    DW = frame.coefficient_jacobians(nu)
    gam, Hb = frame.beta_grad, frame.beta_hess
    Mxx = alpha.hessian(frame.x0) + Hb
    C = np.column_stack([Hb @ W[:, k] + DW[k].T @ gam for k in range(3)])
    Q = np.array([[W[:, k] @ Hb @ W[:, l] + gam @ (DW[l] @ W[:, k]) for l in range(3)] for k in range(3)])
    Q = 0.5 * (Q + Q.T)
    brackets = {}
    for k, l in PAIRS:
        # [v, w] = Dw v - Dv w
        val = gam @ (DW[l] @ W[:, k] - DW[k] @ W[:, l])
        brackets[(k, l)] = val
        Q[k, l] += 0.5 * val
        Q[l, k] += 0.5 * val
    Mat = np.zeros((n + 3, n + 3))
    Mat[:n, :n] = 0.5 * (Mxx + Mxx.T)
    Mat[:n, n:] = C
    Mat[n:, :n] = C.T
    Mat[n:, n:] = Q
    return QuadraticFormReport(nu, Mat, rho_used=alpha.rho,
                               details={"brackets": {f"{k}{l}": v for (k, l), v in brackets.items()}})


def evaluate_form_direct(frame: PullbackFrame, alpha: PenaltyFunction, nu, dx, a) -> float:
    """Term-by-term value of the second variation, without the matrix.

    Uses generic Lie derivatives of ``beta^`` along the fields themselves and
    :func:`lie_bracket` for the bracket terms.
    """
    x0 = frame.x0
    dx = np.asarray(dx, float)
    a1, b, a2 = (float(v) for v in a)
    fg1, fj, fg2 = frame.coefficient_fields(nu)
    gam, Hb = frame.beta_grad, frame.beta_hess

    def LL(v, w):
        # L_v L_w beta^ at x0
        vx = v(x0)
        return float(vx @ Hb @ w(x0) + gam @ (w.jacobian(x0) @ vx))

    def Lb(v, w):
        return float(gam @ lie_bracket(v, w)(x0))

    Z = linear_combination([(a1, fg1), (b, fj), (a2, fg2)])
    D = constant_field(dx)
    total = dx @ (alpha.hessian(x0) + Hb) @ dx
    total += 2.0 * LL(D, Z)
    total += LL(Z, Z)
    total += a1 * b * Lb(fg1, fj) + a1 * a2 * Lb(fg1, fg2) + b * a2 * Lb(fj, fg2)
    return float(total)


def constraint_space(frame: PullbackFrame, nu, constrained_initial=True, rtol=1e-10):
    """Orthonormal basis (columns, in ``(dx, a1, b, a2)`` coordinates) of the admissible space.

    ``constrained_initial`` restricts ``dx`` to the tangent space of ``N0``;
    otherwise ``dx`` is free.  The sign constraint on ``b`` is dropped.
    """
    n = frame.n
    E = frame.initial_basis if constrained_initial else np.eye(n)
    m = E.shape[1]
    lift = np.zeros((n + 3, m + 3))
    lift[:n, :m] = E
    lift[n:, m:] = np.eye(3)
    G = frame.final_gradients
    if G.shape[0] == 0:
        K = np.eye(m + 3)
    else:
        L = G @ np.hstack([E, frame.coefficient_values(nu)])
        scale = max(1.0, np.linalg.norm(L, 2))
        K = null_space(L, rcond=rtol * scale / max(np.linalg.norm(L, 2), 1e-300))
    return lift @ K


def coercivity_test(report: QuadraticFormReport, basis=None, tol_eig=EIG_TOL) -> QuadraticFormReport:
    """Restrict to ``basis`` and decide coercivity: ``min_eig > tol_eig * |B^T M B|_2``."""
    B = report.constraint_basis if basis is None else basis
    report.constraint_basis = B
    if B is None or B.shape[1] == 0:
        report.reduced_spectrum = np.zeros(0)
        report.min_eig = float("inf")
        report.coercive = True
        return report
    R = B.T @ report.matrix @ B
    R = 0.5 * (R + R.T)
    ev = np.sort(np.linalg.eigvalsh(R))
    report.reduced_spectrum = ev
    report.min_eig = float(ev[0])
    report.coercive = bool(ev[0] > tol_eig * np.linalg.norm(R, 2))
    return report


@dataclass
class SecondVariationResult:
    """Forms on the constrained spaces ``V0_nu`` and on the extended spaces ``V_nu``."""

    frame: PullbackFrame
    constrained: Dict[int, QuadraticFormReport]
    extended: Dict[int, QuadraticFormReport]
    rho: Optional[float]
    hestenes_ok: bool
    message: str = ""

    @property
    def coercive(self):
        return all(r.coercive for r in self.constrained.values())

    def to_dict(self):
        return {
            "coercive": self.coercive,
            "rho": self.rho,
            "hestenes_ok": self.hestenes_ok,
            "message": self.message,
            "constrained": [r.to_dict() for r in self.constrained.values()],
            "extended": [r.to_dict() for r in self.extended.values()],
        }


def _form(frame, nu, rho, constrained, tol_eig):
    rep = assemble_form(frame, initial_penalty(frame, rho), nu)
    rep.space = "V0" if constrained else "V"
    rep.constraint_basis = constraint_space(frame, nu, constrained)
    return coercivity_test(rep, tol_eig=tol_eig)


def analyze(sys, bounds, ext, nus=(1, 2), tol_eig=EIG_TOL, frame=None, rho=None) -> SecondVariationResult:
    """Coercivity on ``V0_nu`` (with ``rho = 0``) and a Hestenes weight for ``V_nu``.

    With ``rho=None`` the weight comes from :func:`choose_rho`; a fixed value
    is used as given.  Hestenes failures are recorded, not raised.
    """
    frame = frame or build_frame(sys, ext, bounds)
    constrained = {nu: _form(frame, nu, 0.0, True, tol_eig) for nu in nus}
    ok = all(r.coercive for r in constrained.values())
    extended, chosen, msg, hest = {}, None, "", False
    if rho is not None:
        extended = {nu: _form(frame, nu, float(rho), False, tol_eig) for nu in nus}
        chosen, hest = float(rho), all(r.coercive for r in extended.values())
    else:
        cache = {}

        def check(w):
            cache[w] = {nu: _form(frame, nu, w, False, tol_eig) for nu in nus}
            return {nu: (rep.coercive, rep.min_eig) for nu, rep in cache[w].items()}

        try:
            chosen, _ = choose_rho(check, constrained_coercive=ok)
            extended, hest = cache[chosen], True
        except HestenesFailure as exc:
            msg = str(exc)
            if cache:
                extended = cache[max(cache)]
    for rep in constrained.values():
        rep.rho_used = chosen
    return SecondVariationResult(frame, constrained, extended, chosen, hest, msg)

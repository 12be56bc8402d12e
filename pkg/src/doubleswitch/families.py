"""Built-in problem families with an exact nominal double switch.

Every family is constructed the same way: fly ``h1`` from ``x0`` for ``tau``
to get the switching point ``x_d``, solve the three linear conditions

    <p_d, f0(x_d)> = 1,  <p_d, f1(x_d)> = 0,  <p_d, f2(x_d)> = 0

for the covector at the switch, and transport ``(p_d, x_d)`` backward along
``h1`` and forward along ``h2``.  Endpoint manifolds are points, or
hyperplanes whose normal is the endpoint covector, so transversality holds by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Dict

import numpy as np

from .boundary import BoundaryConditions, hyperplane_manifold, point_manifold
from .errors import FixtureFailure, InvalidArgument
from .extremal import BangBangExtremal
from .fields import (ControlAffineSystem, CotangentPoint, ParametricField, affine_parametric,
                     derived_field)
from .flows import integrate_flow, integrate_hamiltonian

CHECK_NAMES = ("pmp", "bang_regularity", "switch_regularity", "injectivity", "controllability")


@dataclass
class Fixture:
    """A problem together with its nominal extremal and the expected check verdicts."""

    id: str
    sys: ControlAffineSystem
    bounds: BoundaryConditions
    ext: BangBangExtremal
    expected: Dict[str, bool] = dc_field(default_factory=dict)
    info: dict = dc_field(default_factory=dict)

    def __iter__(self):
        # allows ``sys, bounds, ext = make_nominal(...)``
        return iter((self.sys, self.bounds, self.ext))


def _manifold(kind, x, p):
    if kind == "point":
        return point_manifold(x)
    if kind == "plane":
        return hyperplane_manifold(p, float(p @ x))
    raise InvalidArgument(f"unknown endpoint kind {kind!r}")


def construct_nominal(sys: ControlAffineSystem, x0, tau, T, initial="point", final="point",
                      covector_shift=None, fid="custom", expected=None) -> Fixture:
    """Nominal extremal with a double switch at ``tau`` and final time ``T``.

    ``covector_shift`` (optional) is added to the minimum-norm switching
    covector; it must lie in the null space of ``[f0 f1 f2](x_d)^T`` and is
    only needed when that matrix has rank below n.
    """
    if not 0.0 < tau < T:
        raise FixtureFailure(f"need 0 < tau < T, got tau={tau}, T={T}")
    r0 = sys.zero_param()
    x0 = np.asarray(x0, float)
    h1 = derived_field(sys, r0, "H1")
    h2 = derived_field(sys, r0, "H2")
    xd = integrate_flow(h1, x0, 0.0, tau, monodromy=False, dense=False).x1
    F = np.array([f(xd) for f in sys.fields(r0)])
    rhs = np.array([1.0, 0.0, 0.0])
    pd, *_ = np.linalg.lstsq(F, rhs, rcond=None)
    if covector_shift is not None:
        pd = pd + np.asarray(covector_shift, float)
    if np.max(np.abs(F @ pd - rhs)) > 1e-10:
        raise FixtureFailure("switching conditions unsatisfiable: f0(x_d) lies in span{f1, f2}(x_d)")
    back = integrate_hamiltonian(h1, CotangentPoint(pd, xd), tau, 0.0, monodromy=False, dense=False)
    ell0 = CotangentPoint(back.ell1.p, x0)
    fwd = integrate_hamiltonian(h2, CotangentPoint(pd, xd), tau, T, monodromy=False, dense=False)
    ellf = fwd.ell1
    bounds = BoundaryConditions(_manifold(initial, x0, ell0.p), _manifold(final, ellf.x, ellf.p))
    ext = BangBangExtremal(ell0, tau, tau, T, branch=1, r=r0)
    exp = {k: True for k in CHECK_NAMES}
    exp.update(expected or {})
    info = {"x_switch": xd, "p_switch": pd, "ell_final": ellf, "tau": tau, "T": T}
    return Fixture(fid, sys, bounds, ext, exp, info)


def _const(b, name):
    b = np.array(b, float)
    n = b.size
    return ParametricField(lambda r, x: b.copy(), lambda r, x: np.zeros((n, n)),
                           lambda r, x: np.zeros((n, n, n)), dim=n, name=name)


def linear_system(A, c, b1, b2, drift_direction=None, name="linear"):
    """``f0 = A x + c + r * drift_direction``, constant ``f1 = b1``, ``f2 = b2``."""
    A = np.array(A, float)
    n = A.shape[0]
    d = None if drift_direction is None else np.array(drift_direction, float).reshape(n, -1)
    k = 1 if d is None else d.shape[1]
    return ControlAffineSystem(n, affine_parametric(A, c, d, "f0"), _const(b1, "f1"), _const(b2, "f2"),
                               param_dim=k, name=name)


# -- registered families ----------------------------------------------------

LINEAR3D = dict(
    A=np.diag([0.1, -0.2, 0.3]),
    c=[0.0, -0.4, 0.0],
    b1=[1.0, 0.7, 0.9],
    b2=[-1.0, 1.0, 0.5],
    x0=[0.0, 0.0, 0.0],
    tau=1.0,
    T=2.0,
    drift_direction=[1.0, 0.0, 0.0],
    initial="point",
    final="point",
)


def _merge(defaults, params):
    out = dict(defaults)
    for k, v in (params or {}).items():
        if k not in defaults:
            raise InvalidArgument(f"unknown family parameter {k!r}")
        out[k] = v
    return out


def _linear_family(defaults, fid, expected=None, extra=None):
    def make(params=None):
        p = _merge(dict(defaults, **(extra or {})), params)
        sys = linear_system(p["A"], p["c"], p["b1"], p["b2"], p["drift_direction"], name=fid)
        return construct_nominal(sys, p["x0"], p["tau"], p["T"], p["initial"], p["final"],
                                 p.get("covector_shift"), fid=fid, expected=expected)
    return make


def _span_deficient(params=None):
    p = _merge(dict(
        A=np.diag([0.1, -0.2, 0.3, -0.1]),
        c=[0.0, -0.4, 0.0, 0.5],
        b1=[1.0, 0.7, 0.9, 0.0],
        b2=[-1.0, 1.0, 0.5, 0.0],
        x0=[0.0, 0.0, 0.0, 0.0],
        tau=1.0,
        T=2.0,
        drift_direction=[1.0, 0.0, 0.0, 0.0],
        initial="point",
        final="point",
    ), params)
    sys = linear_system(p["A"], p["c"], p["b1"], p["b2"], p["drift_direction"], name="span-deficient-4d")
    return construct_nominal(sys, p["x0"], p["tau"], p["T"], p["initial"], p["final"],
                             fid="span-deficient-4d", expected={"controllability": False})


SYMMETRIC_SWAP = dict(
    A=[[-0.1, 0.2, 0.1], [0.2, -0.1, 0.1], [0.05, 0.05, 0.3]],
    c=[0.2, 0.2, -0.4],
    b1=[1.0, 0.3, 0.5],
    b2=[0.3, 1.0, 0.5],
    x0=[0.0, 0.0, 0.0],
    tau=1.0,
    T=2.0,
    drift_direction=[1.0, -1.0, 0.0],
    initial="point",
    final="point",
)

PARALLEL_CONTROLS = dict(LINEAR3D, b2=[0.5, 0.35, 0.45], initial="plane")


def _crossing(params=None):
    # rotation drift; h1 and h2 circle around (0, -2) and (0, 2), and the
    # two arcs meet again at the mirror image of the switching point
    p = _merge(dict(
        omega=1.0,
        c=[0.0, 0.0],
        b1=[1.0, 0.0],
        kappa=1.0,
        x_switch=[-1.0, 0.0],
        tau=1.5,
        T=3.0,
        drift_direction=[1.0, 0.0],
    ), params)
    A = p["omega"] * np.array([[0.0, -1.0], [1.0, 0.0]])
    b1 = np.asarray(p["b1"], float)
    sys = linear_system(A, p["c"], b1, p["kappa"] * b1, p["drift_direction"], name="crossing-trajectory")
    h1 = derived_field(sys, sys.zero_param(), "H1")
    x0 = integrate_flow(h1, p["x_switch"], p["tau"], 0.0, monodromy=False, dense=False).x1
    return construct_nominal(sys, x0, p["tau"], p["T"], fid="crossing-trajectory",
                             expected={"injectivity": False})


def _quadratic_drift(A, c, eps, d):
    # A x + c + r d + eps * (x2 x3, x1^2, x1 x2)
    A, c, d = (np.array(v, float) for v in (A, c, d))
    H = np.zeros((3, 3, 3))
    H[0, 1, 2] = H[0, 2, 1] = eps
    H[1, 0, 0] = 2.0 * eps
    H[2, 0, 1] = H[2, 1, 0] = eps

    def func(r, x):
        return A @ x + c + d * float(np.atleast_1d(r)[0]) + eps * np.array([x[1] * x[2], x[0] ** 2, x[0] * x[1]])

    def jac(r, x):
        return A + np.einsum("ijk,k->ij", H, x)

    return ParametricField(func, jac, lambda r, x: H.copy(), dim=3, name="f0")


def _affine_control(b, B, name):
    b, B = np.array(b, float), np.array(B, float)
    return ParametricField(lambda r, x: b + B @ x, lambda r, x: B.copy(),
                           lambda r, x: np.zeros((3, 3, 3)), dim=3, name=name)


def _nonlinear3d(params=None):
    p = _merge(dict(
        A=np.diag([0.1, -0.2, 0.3]),
        c=[0.0, -0.4, 0.0],
        eps=0.2,
        b1=[1.0, 0.7, 0.9],
        B1=[[0.0, 0.0, 0.15], [0.0, 0.0, 0.0], [0.1, 0.0, 0.0]],
        b2=[-1.0, 1.0, 0.5],
        x0=[0.0, 0.0, 0.0],
        tau=1.0,
        T=2.0,
        drift_direction=[1.0, 0.0, 0.0],
        initial="point",
        final="point",
    ), params)
    sys = ControlAffineSystem(3, _quadratic_drift(p["A"], p["c"], p["eps"], p["drift_direction"]),
                              _affine_control(p["b1"], p["B1"], "f1"),
                              _affine_control(p["b2"], np.zeros((3, 3)), "f2"), name="nonlinear3d")
    return construct_nominal(sys, p["x0"], p["tau"], p["T"], p["initial"], p["final"], fid="nonlinear3d")


FAMILIES: Dict[str, Callable] = {}


def register_family(fid, factory):
    """Register ``factory(params) -> Fixture`` under ``fid``."""
    FAMILIES[fid] = factory


def family_ids():
    return sorted(FAMILIES)


def make_nominal(family_id, params=None) -> Fixture:
    """Build the registered family ``family_id``; unpacks as ``(sys, bounds, ext)``."""
    try:
        factory = FAMILIES[family_id]
    except KeyError:
        raise InvalidArgument(f"unknown family {family_id!r}; known: {family_ids()}") from None
    return factory(params)


register_family("linear3d", _linear_family(LINEAR3D, "linear3d"))
register_family("linear3d-plane", _linear_family(LINEAR3D, "linear3d-plane", extra={"final": "plane"}))
register_family("span-deficient-4d", _span_deficient)
register_family("parallel-controls", _linear_family(PARALLEL_CONTROLS, "parallel-controls"))
register_family("symmetric-swap", _linear_family(SYMMETRIC_SWAP, "symmetric-swap"))
register_family("crossing-trajectory", _crossing)
register_family("nonlinear3d", _nonlinear3d)

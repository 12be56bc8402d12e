"""Vector fields, control-affine systems and their Hamiltonian lifts.

A :class:`VectorField` bundles an evaluation callback with an optional analytic
Jacobian and Hessian; missing derivatives fall back to central finite
differences.  A :class:`ControlAffineSystem` holds the three parameter
dependent fields ``f0, f1, f2`` of

    x' = f0(r, x) + u1 f1(r, x) + u2 f2(r, x),   |u1|, |u2| <= 1

and produces the bang combinations ``h1, h2, k1, k2`` used along a
bang-bang extremal with a double switch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument

__all__ = [
    "VectorField",
    "ParametricField",
    "ControlAffineSystem",
    "CotangentPoint",
    "PolynomialMap",
    "DERIVED_TAGS",
    "constant_field",
    "linear_field",
    "zero_field",
    "linear_combination",
    "derived_field",
    "lie_bracket",
    "hamiltonian",
    "hamiltonian_gradient",
    "hamiltonian_vector",
    "symplectic_product",
    "lie_derivative",
    "second_lie_derivative",
    "fd_jacobian",
]

# (f0, f1, f2) coefficients of the bang combinations.
DERIVED_TAGS = {
    "F0": (1.0, 0.0, 0.0),
    "F1": (0.0, 1.0, 0.0),
    "F2": (0.0, 0.0, 1.0),
    "H1": (1.0, -1.0, -1.0),
    "H2": (1.0, 1.0, 1.0),
    "K1": (1.0, 1.0, -1.0),
    "K2": (1.0, -1.0, 1.0),
}


def _fd_steps(x):
    return np.maximum(1e-6, 1e-6 * np.abs(x))


def fd_jacobian(func, x, steps=None):
    """Central-difference Jacobian of ``func`` at ``x`` (one column per coordinate)."""
    x = np.asarray(x, dtype=float)
    h = _fd_steps(x) if steps is None else np.broadcast_to(steps, x.shape)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        cols.append((np.asarray(func(x + e), float) - np.asarray(func(x - e), float)) / (2 * h[i]))
    return np.stack(cols, axis=-1)


class VectorField:
    """Smooth map ``x -> v`` on R^n with first and second derivatives.

    Parameters
    ----------
    func : callable
        ``func(x) -> (n,)`` array.
    jac : callable, optional
        ``jac(x) -> (n, n)`` array, ``jac[i, j] = d v_i / d x_j``.
    hess : callable, optional
        ``hess(x) -> (n, n, n)`` array, ``hess[i, j, k] = d^2 v_i / d x_j d x_k``.
    dim : int, optional
        State dimension; checked against the arguments of :func:`lie_bracket`.
    """

    def __init__(self, func, jac=None, hess=None, dim=None, name=""):
        self._func = func
        self._jac = jac
        self._hess = hess
        self.dim = dim
        self.name = name

    def __repr__(self):
        return f"VectorField({self.name or '<anonymous>'}, dim={self.dim})"

    @property
    def has_jacobian(self):
        return self._jac is not None

    @property
    def has_hessian(self):
        return self._hess is not None

    def __call__(self, x):
        return np.asarray(self._func(np.asarray(x, dtype=float)), dtype=float)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        if self._jac is not None:
            return np.asarray(self._jac(x), dtype=float)
        return fd_jacobian(self, x)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        if self._hess is not None:
            return np.asarray(self._hess(x), dtype=float)
        if self._jac is not None:
            # FD of the analytic Jacobian: hess[i, j, k] = d/dx_k jac[i, j]
            steps = np.maximum(1e-5, 1e-5 * np.abs(x))
            return fd_jacobian(self.jacobian, x, steps)
        steps = np.maximum(1e-4, 1e-4 * np.abs(x))
        inner = lambda y: fd_jacobian(self, y, np.maximum(1e-4, 1e-4 * np.abs(y)))
        return fd_jacobian(inner, x, steps)

    # -- linear structure -------------------------------------------------
    def __add__(self, other):
        return linear_combination([(1.0, self), (1.0, other)])

    def __sub__(self, other):
        return linear_combination([(1.0, self), (-1.0, other)])

    def __neg__(self):
        return linear_combination([(-1.0, self)])

    def __mul__(self, scalar):
        return linear_combination([(float(scalar), self)])

    __rmul__ = __mul__


def linear_combination(terms, name=""):
    """Field ``sum c_i f_i`` with derivatives composed term by term."""
    terms = [(float(c), f) for c, f in terms]
    dims = {f.dim for _, f in terms if f.dim is not None}
    if len(dims) > 1:
        raise InvalidArgument(f"cannot combine fields of dimensions {sorted(dims)}")
    dim = dims.pop() if dims else None

    def func(x):
        return sum(c * f(x) for c, f in terms)

    jac = hess = None
    if all(f.has_jacobian for _, f in terms):
        jac = lambda x: sum(c * f.jacobian(x) for c, f in terms)
    if jac is not None:
        hess = lambda x: sum(c * f.hessian(x) for c, f in terms)
    return VectorField(func, jac, hess, dim=dim, name=name)


def constant_field(b, name=""):
    b = np.array(b, dtype=float)
    n = b.size
    return VectorField(
        lambda x: b.copy(),
        lambda x: np.zeros((n, n)),
        lambda x: np.zeros((n, n, n)),
        dim=n,
        name=name,
    )


def zero_field(n):
    return constant_field(np.zeros(n), name="zero")


def linear_field(A, c=None, name=""):
    """Affine field ``x -> A x + c``."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    c = np.zeros(n) if c is None else np.array(c, dtype=float)
    return VectorField(
        lambda x: A @ x + c,
        lambda x: A.copy(),
        lambda x: np.zeros((n, n, n)),
        dim=n,
        name=name,
    )


class PolynomialMap:
    """Polynomial map R^n -> R^m given as monomial lists per output component.

    ``components[i]`` is a sequence of ``(coefficient, exponents)`` pairs where
    ``exponents`` has length n.  Used by the config loader for user-supplied
    fields and level-set constraints.
    """

    def __init__(self, components, n):
        self.n = int(n)
        self.m = len(components)
        self._terms = []
        for comp in components:
            coefs = np.array([float(c) for c, _ in comp], dtype=float)
            pows = np.array([list(e) for _, e in comp], dtype=int).reshape(len(comp), self.n)
            if np.any(pows < 0):
                raise InvalidArgument("negative exponent in polynomial term")
            self._terms.append((coefs, pows))

    @staticmethod
    def _monomials(x, pows):
        # x**p with 0**0 == 1
        return np.prod(np.where(pows == 0, 1.0, x[None, :] ** np.maximum(pows, 0)), axis=1)

    def value(self, x):
        x = np.asarray(x, float)
        return np.array([c @ self._monomials(x, p) for c, p in self._terms])

    def jacobian(self, x):
        x = np.asarray(x, float)
        out = np.zeros((self.m, self.n))
        for i, (c, p) in enumerate(self._terms):
            for j in range(self.n):
                dp = p.copy()
                k = dp[:, j].astype(float)
                dp[:, j] = np.maximum(dp[:, j] - 1, 0)
                out[i, j] = (c * k) @ self._monomials(x, dp)
        return out

    def hessian(self, x):
        x = np.asarray(x, float)
        out = np.zeros((self.m, self.n, self.n))
        for i, (c, p) in enumerate(self._terms):
            for j in range(self.n):
                for k in range(j, self.n):
                    dp = p.copy()
                    fac = dp[:, j].astype(float)
                    dp[:, j] = np.maximum(dp[:, j] - 1, 0)
                    fac = fac * dp[:, k]
                    dp[:, k] = np.maximum(dp[:, k] - 1, 0)
                    val = (c * fac) @ self._monomials(x, dp)
                    out[i, j, k] = out[i, k, j] = val
        return out


class ParametricField:
    """Field family ``(r, x) -> v``; :meth:`at` freezes the parameter.

    Derivatives are with respect to ``x`` only: no differentiation in ``r``
    is needed anywhere (continuation treats ``r`` as data).
    """

    def __init__(self, func, jac=None, hess=None, dim=None, name=""):
        self.func = func
        self.jac = jac
        self.hess = hess
        self.dim = dim
        self.name = name

    @classmethod
    def fixed(cls, field: VectorField):
        """Wrap an ``r``-independent field."""
        return cls(
            lambda r, x: field(x),
            (lambda r, x: field.jacobian(x)) if field.has_jacobian else None,
            (lambda r, x: field.hessian(x)) if field.has_hessian else None,
            dim=field.dim,
            name=field.name,
        )

    def at(self, r) -> VectorField:
        r = np.atleast_1d(np.asarray(r, dtype=float))
        jac = None if self.jac is None else (lambda x: self.jac(r, x))
        hess = None if self.hess is None else (lambda x: self.hess(r, x))
        return VectorField(lambda x: self.func(r, x), jac, hess, dim=self.dim, name=self.name)


class ControlAffineSystem:
    """Drift ``f0`` and two controlled fields ``f1, f2``, all depending on ``r``.

    Parameters
    ----------
    dim : int
        State dimension n.
    drift, control1, control2 : ParametricField
    param_dim : int
        Dimension k of the parameter r.
    param_radius : float
        Radius R of the admissible parameter ball.
    """

    def __init__(self, dim, drift, control1, control2, param_dim=1, param_radius=np.inf, name=""):
        self.dim = int(dim)
        self.drift = drift
        self.controls = (control1, control2)
        self.param_dim = int(param_dim)
        self.param_radius = float(param_radius)
        self.name = name

    def check_param(self, r):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        if r.shape != (self.param_dim,):
            raise InvalidArgument(f"parameter must have shape ({self.param_dim},), got {r.shape}")
        if np.linalg.norm(r) > self.param_radius:
            raise InvalidArgument(f"|r| = {np.linalg.norm(r):g} exceeds radius {self.param_radius:g}")
        return r

    def zero_param(self):
        return np.zeros(self.param_dim)

    def fields(self, r):
        r = self.check_param(r)
        out = []
        for pf in (self.drift, *self.controls):
            f = pf.at(r)
            f.dim = self.dim
            out.append(f)
        return tuple(out)

    def field(self, tag, r):
        return derived_field(self, r, tag)

    def control_field(self, u, r):
        """Field ``f0 + u1 f1 + u2 f2`` for a fixed control value."""
        f0, f1, f2 = self.fields(r)
        return linear_combination([(1.0, f0), (u[0], f1), (u[1], f2)])


def derived_field(sys: ControlAffineSystem, r, tag: str) -> VectorField:
    """One of ``H1, H2, K1, K2`` (or ``F0, F1, F2``) at parameter ``r``."""
    try:
        coefs = DERIVED_TAGS[str(tag).upper()]
    except KeyError:
        raise InvalidArgument(f"unknown field tag {tag!r}") from None
    f = sys.fields(r)
    terms = [(c, fi) for c, fi in zip(coefs, f) if c != 0.0]
    out = linear_combination(terms, name=str(tag).upper())
    out.dim = sys.dim
    return out


def lie_bracket(f: VectorField, g: VectorField) -> VectorField:
    """``[f, g](x) = Dg(x) f(x) - Df(x) g(x)``; its Jacobian is taken by FD."""
    if f.dim is not None and g.dim is not None and f.dim != g.dim:
        raise InvalidArgument(f"dimension mismatch: {f.dim} vs {g.dim}")
    dim = f.dim if f.dim is not None else g.dim

    def func(x):
        return g.jacobian(x) @ f(x) - f.jacobian(x) @ g(x)

    return VectorField(func, dim=dim, name=f"[{f.name},{g.name}]")


@dataclass(frozen=True)
class CotangentPoint:
    """Covector-state pair ``(p, x)``; ``p`` is a row covector."""

    p: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(-1)
        x = np.array(self.x, dtype=float).reshape(-1)
        if p.shape != x.shape:
            raise InvalidArgument(f"covector and state sizes differ: {p.size} vs {x.size}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(x))):
            raise InvalidArgument("non-finite cotangent point")
        p.flags.writeable = False
        x.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "x", x)

    @property
    def dim(self):
        return self.x.size

    def as_vector(self):
        return np.concatenate([self.p, self.x])

    @classmethod
    def from_vector(cls, z):
        z = np.asarray(z, dtype=float)
        n = z.size // 2
        return cls(z[:n], z[n:])


def _check_dim(ell, f):
    if f.dim is not None and f.dim != ell.dim:
        raise InvalidArgument(f"dimension mismatch: point {ell.dim}, field {f.dim}")


def hamiltonian(ell: CotangentPoint, f: VectorField) -> float:
    """``F(p, x) = <p, f(x)>``."""
    _check_dim(ell, f)
    return float(ell.p @ f(ell.x))


def hamiltonian_gradient(f: VectorField, z):
    """Gradient of ``F`` in the ``(p, x)`` ordering at ``z = [p, x]``."""
    z = np.asarray(z, dtype=float)
    n = z.size // 2
    p, x = z[:n], z[n:]
    return np.concatenate([f(x), p @ f.jacobian(x)])


def hamiltonian_vector(f: VectorField, z):
    """Hamiltonian vector field ``(-p Df(x), f(x))`` at ``z = [p, x]``."""
    z = np.asarray(z, dtype=float)
    n = z.size // 2
    p, x = z[:n], z[n:]
    return np.concatenate([-(p @ f.jacobian(x)), f(x)])


def symplectic_product(ell: CotangentPoint, f: VectorField, g: VectorField) -> float:
    """``<p, [f, g](x)>``, the symplectic product of the lifts of f and g at ell."""
    _check_dim(ell, f)
    _check_dim(ell, g)
    return hamiltonian(ell, lie_bracket(f, g))


def lie_derivative(grad, field: VectorField, x) -> float:
    """``L_f gamma(x) = <D gamma(x), f(x)>`` for a function given by its gradient callback."""
    return float(np.asarray(grad(x)) @ field(x))


def second_lie_derivative(grad, hess, v: VectorField, w: VectorField, x) -> float:
    """``L_v L_w gamma(x) = D^2 gamma(x)[v, w] + <D gamma(x), Dw(x) v(x)>``."""
    vx = v(x)
    return float(vx @ np.asarray(hess(x)) @ w(x) + np.asarray(grad(x)) @ (w.jacobian(x) @ vx))


def parametric_polynomial(base: PolynomialMap, per_param: Sequence[Optional[PolynomialMap]] = ()):
    """ParametricField ``f(r, x) = P0(x) + sum_k r_k P_k(x)``."""
    per_param = list(per_param)
    n = base.n

    def _sum(method, r, x):
        out = getattr(base, method)(x)
        for rk, pk in zip(np.atleast_1d(r), per_param):
            if pk is not None and rk != 0.0:
                out = out + rk * getattr(pk, method)(x)
        return out

    return ParametricField(
        lambda r, x: _sum("value", r, x),
        lambda r, x: _sum("jacobian", r, x),
        lambda r, x: _sum("hessian", r, x),
        dim=n,
    )


def affine_parametric(A, c, dc_dr=None, name=""):
    """ParametricField ``(r, x) -> A x + c + dc_dr @ r``."""
    A = np.array(A, float)
    c = np.array(c, float)
    n = A.shape[0]
    B = None if dc_dr is None else np.array(dc_dr, float).reshape(n, -1)

    def func(r, x):
        out = A @ x + c
        if B is not None:
            out = out + B @ np.atleast_1d(r)
        return out

    return ParametricField(
        func,
        lambda r, x: A.copy(),
        lambda r, x: np.zeros((n, n, n)),
        dim=n,
        name=name,
    )


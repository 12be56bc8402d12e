"""Bang-bang extremals with (at most) one switch per control component."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .errors import InvalidArgument
from .fields import CotangentPoint, ControlAffineSystem, derived_field
from .flows import HamiltonianFlowSegment, integrate_hamiltonian

DOUBLE_TOL = 1e-9


@dataclass(frozen=True)
class BangBangExtremal:
    """Initial covector-state pair, per-component switching times and final time.

    Component ``i`` of the control is -1 on ``[0, tau_i)`` and +1 on
    ``(tau_i, T]``.  The middle arc is governed by ``k1`` when component 1
    switches first and by ``k2`` when component 2 does; ``branch`` decides
    which label a double switch (``tau1 == tau2``) carries.
    """

    ell0: CotangentPoint
    tau1: float
    tau2: float
    T: float
    branch: int = 1
    r: Optional[np.ndarray] = None

    def __post_init__(self):
        if not isinstance(self.ell0, CotangentPoint):
            object.__setattr__(self, "ell0", CotangentPoint.from_vector(self.ell0))
        for name in ("tau1", "tau2", "T"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.branch not in (1, 2):
            raise InvalidArgument(f"branch must be 1 or 2, got {self.branch}")
        if not (0.0 < min(self.tau1, self.tau2) <= max(self.tau1, self.tau2) < self.T):
            raise InvalidArgument(
                f"need 0 < min(tau) <= max(tau) < T, got tau=({self.tau1}, {self.tau2}), T={self.T}")
        if self.r is not None:
            object.__setattr__(self, "r", np.atleast_1d(np.asarray(self.r, float)))

    @property
    def n(self):
        return self.ell0.dim

    @property
    def switch_times(self):
        """``(first, second)`` switching instants."""
        return min(self.tau1, self.tau2), max(self.tau1, self.tau2)

    @property
    def gap(self):
        return self.tau2 - self.tau1

    @property
    def is_double(self):
        return abs(self.gap) <= DOUBLE_TOL

    @property
    def nu(self):
        if self.is_double:
            return self.branch
        return 1 if self.tau1 < self.tau2 else 2

    @property
    def arc_tags(self):
        return ("H1", f"K{self.nu}", "H2")

    @property
    def breakpoints(self):
        ta, tb = self.switch_times
        return [0.0, ta, tb, self.T]

    def control(self, t):
        t = np.asarray(t, float)
        u1 = np.where(t < self.tau1, -1.0, 1.0)
        u2 = np.where(t < self.tau2, -1.0, 1.0)
        return np.stack([u1, u2], axis=-1)

    def param(self, sys: ControlAffineSystem):
        return sys.zero_param() if self.r is None else self.r


@dataclass
class ExtremalTrajectory:
    """Simulated covector-state curve of a :class:`BangBangExtremal`."""

    ext: BangBangExtremal
    r: np.ndarray
    fields: tuple
    segments: list = dc_field(default_factory=list)

    @property
    def n(self):
        return self.ext.n

    def arc_index(self, t):
        """Index (0, 1, 2) of the arc containing ``t``; switch instants belong to the earlier arc."""
        bp = self.ext.breakpoints
        t = np.asarray(t, float)
        return np.clip(np.searchsorted(bp[1:-1], t, side="left"), 0, 2)

    def point(self, t):
        """``[p, x]`` at time(s) ``t``."""
        t = np.asarray(t, float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        idx = self.arc_index(tt)
        out = np.empty((tt.size, 2 * self.n))
        for k in range(3):
            sel = idx == k
            if np.any(sel):
                seg = self.segments[k]
                out[sel] = np.atleast_2d(seg.point(np.clip(tt[sel], seg.t0, seg.t1)))
        return out[0] if scalar else out

    def state(self, t):
        return self.point(t)[..., self.n:]

    def covector(self, t):
        return self.point(t)[..., : self.n]

    def cotangent(self, t) -> CotangentPoint:
        return CotangentPoint.from_vector(self.point(float(t)))

    @property
    def ell_first_switch(self) -> CotangentPoint:
        return self.segments[0].ell1

    @property
    def ell_second_switch(self) -> CotangentPoint:
        return self.segments[1].ell1

    @property
    def ell_final(self) -> CotangentPoint:
        return self.segments[2].ell1

    def grid(self, per_arc=2000):
        """Times covering each arc with ``per_arc`` points (arc endpoints included)."""
        bp = self.ext.breakpoints
        return [np.linspace(a, b, per_arc) if b > a else np.array([a]) for a, b in zip(bp[:-1], bp[1:])]


def simulate(sys: ControlAffineSystem, ext: BangBangExtremal, monodromy=False) -> ExtremalTrajectory:
    """Integrate the three Hamiltonian arcs ``H1, K_nu, H2`` of ``ext``."""
    r = sys.check_param(ext.param(sys))
    fields = tuple(derived_field(sys, r, tag) for tag in ext.arc_tags)
    bp = ext.breakpoints
    segs = []
    ell = ext.ell0
    for f, ta, tb in zip(fields, bp[:-1], bp[1:]):
        s: HamiltonianFlowSegment = integrate_hamiltonian(f, ell, ta, tb, monodromy=monodromy)
        segs.append(s)
        ell = s.ell1
    return ExtremalTrajectory(ext, r, fields, segs)

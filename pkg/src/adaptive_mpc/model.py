"""Problem definitions: dynamics, reference trajectories, cost and quantities of interest."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Union

import numpy as np

from .fem import ControlKind, assemble_mass
from .grid import SpaceMesh, interpolation_matrix


@dataclass(frozen=True)
class Linear:
    """x' = nu x'' + s x + B u (homogeneous Dirichlet for distributed control)."""

    nu: float = 0.1
    s: float = 0.0


@dataclass(frozen=True)
class Quasilinear:
    """x' = ((c x^2 + d) x')' + B u."""

    c: float = 0.1
    d: float = 0.1


Dynamics = Union[Linear, Quasilinear]


class Reference(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"
    EXP_INCREASING = "exp_increasing"
    ZERO = "zero"


@dataclass(frozen=True, eq=False)
class InitialState:
    """P1 function on its own mesh; the discrete initial value is its L2 projection."""

    mesh: SpaceMesh
    values: np.ndarray


@dataclass(frozen=True)
class ProblemSpec:
    L: float = 3.0
    T: float = 10.0
    dynamics: Dynamics = field(default_factory=Linear)
    control: ControlKind = ControlKind.DISTRIBUTED
    reference: Reference = Reference.STATIC
    alpha: float = 1e-3
    x0: InitialState | None = None
    f: Callable[[float, np.ndarray], np.ndarray] | None = None
    # absolute time of the horizon start; references are evaluated at t0 + t
    t0: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("Tikhonov parameter alpha must be positive")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if not self.L > 0:
            raise ValueError("domain length L must be positive")
        dyn = self.dynamics
        if isinstance(dyn, Linear) and not dyn.nu > 0:
            raise ValueError("diffusion nu must be positive")
        if isinstance(dyn, Quasilinear) and (not dyn.d > 0 or dyn.c < 0):
            raise ValueError("quasilinear diffusion needs d > 0 and c >= 0")
        object.__setattr__(self, "control", ControlKind(self.control))
        object.__setattr__(self, "reference", Reference(self.reference))

    @property
    def dirichlet(self) -> bool:
        return self.control is ControlKind.DISTRIBUTED

    @property
    def is_linear(self) -> bool:
        return isinstance(self.dynamics, Linear)


@dataclass(frozen=True)
class Qoi:
    """Quantity of interest: the full cost (tau=None) or its truncation to [0, tau]."""

    tau: float | None = None

    @classmethod
    def full(cls) -> "Qoi":
        return cls(None)

    @classmethod
    def truncated(cls, tau: float) -> "Qoi":
        if not tau > 0:
            raise ValueError("truncation time must be positive")
        return cls(float(tau))

    @property
    def is_full(self) -> bool:
        return self.tau is None

    def window_end(self, T: float) -> float:
        if self.tau is not None and self.tau > T:
            raise ValueError("truncation time exceeds the horizon")
        return T if self.tau is None else self.tau


def bump(s):
    """10 exp(1 - 1/(1 - s^2)) inside |s| < 1, zero outside."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    si = s[inside]
    out[inside] = 10.0 * np.exp(1.0 - 1.0 / (1.0 - si * si))
    return out if out.ndim else float(out)


def eval_reference(spec: ProblemSpec, t: float, w):
    """Reference trajectory at relative time t (absolute time spec.t0 + t)."""
    w = np.asarray(w, dtype=float)
    ta = spec.t0 + t
    ref = spec.reference
    if ref is Reference.STATIC:
        return bump((10.0 / 3.0) * np.abs(w - 1.5))
    if ref is Reference.DYNAMIC:
        peak = 1.5 - np.cos(np.pi * ta / 10.0)
        return bump((10.0 / 3.0) * np.abs(w - peak))
    if ref is Reference.EXP_INCREASING:
        return np.exp(ta / 2.0) * bump((10.0 / 3.0) * np.abs(w - spec.L))
    return np.zeros_like(w) if w.ndim else 0.0


def nodal_reference(spec: ProblemSpec, t: float, mesh: SpaceMesh) -> np.ndarray:
    return np.asarray(eval_reference(spec, t, mesh.nodes), dtype=float)


def nodal_source(spec: ProblemSpec, t: float, mesh: SpaceMesh) -> np.ndarray | None:
    if spec.f is None:
        return None
    return np.asarray(spec.f(spec.t0 + t, mesh.nodes), dtype=float)


def initial_on(spec: ProblemSpec, mesh: SpaceMesh) -> tuple[np.ndarray, np.ndarray]:
    """(load vector int x0 phi_i, mass matrix) for projecting x0 onto ``mesh``."""
    if spec.x0 is None:
        return np.zeros(mesh.n_nodes), None
    from .fem import cross_mass

    return cross_mass(mesh, spec.x0.mesh) @ spec.x0.values, assemble_mass(mesh)


def control_sq_norm(spec: ProblemSpec, mesh: SpaceMesh, u: np.ndarray) -> float:
    if spec.control is ControlKind.DISTRIBUTED:
        return float(u @ assemble_mass(mesh).matvec(u))
    return float(u @ u)


def _window_slabs(points: np.ndarray, a: float, b: float) -> np.ndarray:
    """Slab indices m (1-based) with (t_{m-1}, t_m] inside [a, b]; window must be slab-aligned."""
    if b < a:
        raise ValueError("empty or reversed window")
    for t in (a, b):
        if not np.any(points == t):
            raise ValueError(f"window end {t} is not a time grid point")
    m = np.arange(1, points.size)
    return m[(points[m - 1] >= a) & (points[m] <= b)]


def eval_cost(traj, u, spec: ProblemSpec, window: tuple[float, float]) -> float:
    """Box-rule cost 1/2 sum k_m (|x_m - x_d(t_m)|^2 + alpha |u_m|_U^2) over the window."""
    grid = traj.grid
    pts = grid.time.points
    total = 0.0
    for m in _window_slabs(pts, *window):
        mesh = grid.meshes[m]
        km = pts[m] - pts[m - 1]
        e = traj.values[m] - nodal_reference(spec, pts[m], mesh)
        track = float(e @ assemble_mass(mesh).matvec(e))
        total += 0.5 * km * (track + spec.alpha * control_sq_norm(spec, mesh, u.values[m - 1]))
    return total


def eval_qoi(traj, u, spec: ProblemSpec, qoi: Qoi) -> float:
    return eval_cost(traj, u, spec, (0.0, qoi.window_end(traj.grid.time.T)))


def window_mask(points: np.ndarray, qoi: Qoi) -> np.ndarray:
    """Boolean per slab (index m-1) telling whether slab m lies in the QOI window."""
    end = qoi.window_end(float(points[-1]))
    if not np.any(points == end):
        raise ValueError(f"truncation time {end} is not a time grid point")
    return points[1:] <= end


def sample_function(mesh: SpaceMesh, values, pts) -> np.ndarray:
    return interpolation_matrix(mesh, np.ravel(pts)) @ values

"""dG(0)cG(1) space-time functions and transfer between grids."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import ControlKind, assemble_mass, assemble_stiffness
from .grid import SpaceTimeGrid, common_refinement, interpolation_matrix, prolong


@dataclass(frozen=True, eq=False)
class DgTrajectory:
    """Piecewise constant in time, P1 in space.

    ``values[0]`` is the initial value on mesh 0, ``values[m]`` the value on slab
    I_m = (t_{m-1}, t_m] (its left limit at t_m) on mesh m.
    """

    grid: SpaceTimeGrid
    values: tuple[np.ndarray, ...]

    def __post_init__(self):
        vals = tuple(np.asarray(v, dtype=float) for v in self.values)
        if len(vals) != self.grid.M + 1:
            raise ValueError("one coefficient vector per mesh required")
        for v, mesh in zip(vals, self.grid.meshes):
            if v.shape != (mesh.n_nodes,):
                raise ValueError("coefficient length does not match mesh")
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> "DgTrajectory":
        return cls(grid, tuple(np.zeros(m.n_nodes) for m in grid.meshes))

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def slabs(self) -> tuple[np.ndarray, ...]:
        return self.values[1:]

    def value_minus(self, m: int) -> np.ndarray:
        return self.values[m]

    def value_plus(self, m: int) -> np.ndarray:
        if not 0 <= m < self.grid.M:
            raise IndexError("right limit only defined for 0 <= m < M")
        return self.values[m + 1]

    def __add__(self, other: "DgTrajectory") -> "DgTrajectory":
        return DgTrajectory(self.grid, tuple(a + b for a, b in zip(self.values, other.values)))

    def __sub__(self, other: "DgTrajectory") -> "DgTrajectory":
        return DgTrajectory(self.grid, tuple(a - b for a, b in zip(self.values, other.values)))

    def __mul__(self, s: float) -> "DgTrajectory":
        return DgTrajectory(self.grid, tuple(s * a for a in self.values))

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class ControlTrajectory:
    """Per-slab controls: nodal on the slab mesh (distributed) or endpoint pairs (Neumann)."""

    grid: SpaceTimeGrid
    values: tuple[np.ndarray, ...]
    kind: ControlKind = ControlKind.DISTRIBUTED

    def __post_init__(self):
        vals = tuple(np.asarray(v, dtype=float) for v in self.values)
        if len(vals) != self.grid.M:
            raise ValueError("one control per slab required")
        kind = ControlKind(self.kind)
        for m, v in enumerate(vals, start=1):
            n = self.grid.meshes[m].n_nodes if kind is ControlKind.DISTRIBUTED else 2
            if v.shape != (n,):
                raise ValueError("control shape does not match its kind")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "kind", kind)

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid, kind: ControlKind | str) -> "ControlTrajectory":
        kind = ControlKind(kind)
        if kind is ControlKind.DISTRIBUTED:
            return cls(grid, tuple(np.zeros(m.n_nodes) for m in grid.meshes[1:]), kind)
        return cls(grid, tuple(np.zeros(2) for _ in range(grid.M)), kind)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.values)

    @classmethod
    def from_flat(cls, grid: SpaceTimeGrid, kind, vec: np.ndarray) -> "ControlTrajectory":
        kind = ControlKind(kind)
        sizes = [m.n_nodes if kind is ControlKind.DISTRIBUTED else 2 for m in grid.meshes[1:]]
        parts = np.split(np.asarray(vec, dtype=float), np.cumsum(sizes)[:-1])
        return cls(grid, tuple(parts), kind)


def jump(traj: DgTrajectory, m: int) -> np.ndarray:
    """[v]_m = v_m^+ - v_m^- as nodal values on the common refinement of meshes m, m+1."""
    if not 0 <= m < traj.grid.M:
        raise IndexError("jump index out of range")
    a, b = traj.grid.meshes[m], traj.grid.meshes[m + 1]
    common = common_refinement(a, b)
    return prolong(traj.values[m + 1], b, common) - prolong(traj.values[m], a, common)


def _enclosing_slabs(source_pts: np.ndarray, target_pts: np.ndarray) -> np.ndarray:
    if not np.all(np.isin(source_pts, target_pts)) or source_pts[-1] != target_pts[-1]:
        raise ValueError("target time grid is not a refinement of the source")
    # slab (t_{j-1}, t_j] of the target lies in source slab m with t_{m-1} < t_j <= t_m
    return np.searchsorted(source_pts, target_pts[1:], side="left")


def transfer(traj: DgTrajectory, target: SpaceTimeGrid) -> DgTrajectory:
    """Carry a trajectory to a refined time grid, interpolating onto the target meshes."""
    src = traj.grid
    parent = _enclosing_slabs(src.time.points, target.time.points)
    vals = [_interp(traj.values[0], src.meshes[0], target.meshes[0])]
    for j, m in enumerate(parent, start=1):
        vals.append(_interp(traj.values[m], src.meshes[m], target.meshes[j]))
    return DgTrajectory(target, tuple(vals))


def transfer_control(u: ControlTrajectory, target: SpaceTimeGrid) -> ControlTrajectory:
    src = u.grid
    parent = _enclosing_slabs(src.time.points, target.time.points)
    vals = []
    for j, m in enumerate(parent, start=1):
        v = u.values[m - 1]
        if u.kind is ControlKind.DISTRIBUTED:
            v = _interp(v, src.meshes[m], target.meshes[j])
        vals.append(v.copy())
    return ControlTrajectory(target, tuple(vals), u.kind)


def _interp(values: np.ndarray, source, target) -> np.ndarray:
    if source.same_as(target):
        return values.copy()
    return interpolation_matrix(source, target.nodes) @ values


def l2v_norm(traj: DgTrajectory, l2_part: bool = True, grad_part_coeff: float = 0.0) -> np.ndarray:
    """Per-slab |v|_L2 + sqrt(coeff) |v'|_L2 (either part optional); index m-1 for slab m."""
    out = np.zeros(traj.grid.M)
    for m in range(1, traj.grid.M + 1):
        mesh = traj.grid.meshes[m]
        v = traj.values[m]
        val = 0.0
        if l2_part:
            val += np.sqrt(max(float(v @ assemble_mass(mesh).matvec(v)), 0.0))
        if grad_part_coeff > 0:
            g = float(v @ assemble_stiffness(mesh, 1.0).matvec(v))
            val += np.sqrt(grad_part_coeff) * np.sqrt(max(g, 0.0))
        out[m - 1] = val
    return out


def inner(a_vals: np.ndarray, a_mesh, b_vals: np.ndarray, b_mesh) -> float:
    """Exact L2 inner product of two P1 functions living on different meshes."""
    from .fem import cross_mass

    if a_mesh.same_as(b_mesh):
        return float(a_vals @ assemble_mass(a_mesh).matvec(b_vals))
    return float(a_vals @ (cross_mass(a_mesh, b_mesh) @ b_vals))

"""Time partitions, 1D spatial meshes and space-time grids.

Every slab of a space-time grid carries its own mesh; inner products between
slabs are evaluated on the common refinement of the two meshes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "TimeGrid",
    "SpaceMesh",
    "SpaceTimeGrid",
    "refine_time",
    "refine_space",
    "uniform_refine",
    "common_refinement",
    "prolong",
    "interpolation_matrix",
]


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeGrid:
    points: np.ndarray
    protected: tuple[float, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise GridError("time grid needs at least two points")
        if pts[0] != 0.0:
            raise GridError("time grid must start at 0")
        if np.any(np.diff(pts) <= 0):
            raise GridError("time points must be strictly increasing")
        for tau in self.protected:
            if not np.any(pts == tau):
                raise GridError(f"protected time {tau} is not a grid point")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, T: float, n_intervals: int, protect: tuple[float, ...] = ()) -> "TimeGrid":
        pts = np.linspace(0.0, T, n_intervals + 1)
        pts[-1] = T
        for tau in protect:
            if not 0.0 < tau <= T:
                raise GridError(f"protected time {tau} outside (0, {T}]")
            i = int(np.argmin(np.abs(pts - tau)))
            if abs(pts[i] - tau) < 1e-12 * max(1.0, T):
                pts[i] = tau
            else:
                pts = np.sort(np.append(pts, tau))
        return cls(pts, tuple(protect))

    @property
    def M(self) -> int:
        return self.points.size - 1

    @property
    def T(self) -> float:
        return float(self.points[-1])

    @property
    def k(self) -> np.ndarray:
        return np.diff(self.points)

    def index_of(self, t: float) -> int:
        """Index m with points[m] == t; raises if t is not a grid point."""
        hit = np.flatnonzero(self.points == t)
        if hit.size == 0:
            raise GridError(f"{t} is not a time grid point")
        return int(hit[0])


@dataclass(frozen=True, eq=False)
class SpaceMesh:
    nodes: np.ndarray
    levels: np.ndarray = field(default=None)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise GridError("mesh needs at least two nodes")
        if nodes[0] != 0.0:
            raise GridError("mesh must start at 0")
        if np.any(np.diff(nodes) <= 0):
            raise GridError("mesh nodes must be strictly increasing")
        levels = self.levels
        if levels is None:
            levels = np.zeros(nodes.size - 1, dtype=int)
        levels = np.asarray(levels, dtype=int)
        if levels.shape != (nodes.size - 1,):
            raise GridError("one refinement level per element required")
        nodes.setflags(write=False)
        levels.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "levels", levels)

    @classmethod
    def uniform(cls, L: float, n_elements: int) -> "SpaceMesh":
        nodes = np.linspace(0.0, L, n_elements + 1)
        nodes[-1] = L
        return cls(nodes)

    @property
    def L(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def n_elements(self) -> int:
        return self.nodes.size - 1

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])

    def same_as(self, other: "SpaceMesh") -> bool:
        return self is other or (
            self.nodes.size == other.nodes.size and np.array_equal(self.nodes, other.nodes)
        )


@dataclass(frozen=True, eq=False)
class SpaceTimeGrid:
    time: TimeGrid
    meshes: tuple[SpaceMesh, ...]

    def __post_init__(self):
        meshes = tuple(self.meshes)
        if len(meshes) != self.time.M + 1:
            raise GridError(f"expected {self.time.M + 1} meshes, got {len(meshes)}")
        L = meshes[0].L
        if any(m.L != L for m in meshes):
            raise GridError("all meshes must share the domain [0, L]")
        object.__setattr__(self, "meshes", meshes)

    @classmethod
    def uniform(cls, time: TimeGrid, mesh: SpaceMesh) -> "SpaceTimeGrid":
        return cls(time, (mesh,) * (time.M + 1))

    @property
    def M(self) -> int:
        return self.time.M

    @property
    def L(self) -> float:
        return self.meshes[0].L

    @property
    def space_dofs(self) -> int:
        return sum(m.n_nodes for m in self.meshes)

    def to_json(self) -> str:
        return json.dumps(
            {"time": self.time.points.tolist(), "meshes": [m.nodes.tolist() for m in self.meshes]}
        )

    @classmethod
    def from_json(cls, text: str, protected: tuple[float, ...] = ()) -> "SpaceTimeGrid":
        data = json.loads(text)
        return cls(TimeGrid(np.array(data["time"]), protected), tuple(SpaceMesh(np.array(n)) for n in data["meshes"]))


def _check_marks(marks, n: int, what: str) -> list[int]:
    marks = sorted(set(int(i) for i in marks))
    if marks and (marks[0] < 0 or marks[-1] >= n):
        raise GridError(f"{what} index out of range")
    return marks


def refine_time(grid: TimeGrid, marks) -> TimeGrid:
    """Bisect the marked slabs (1-based slab indices)."""
    marks = _check_marks([m - 1 for m in marks], grid.M, "slab")
    if not marks:
        return grid
    pts = grid.points
    mids = 0.5 * (pts[np.array(marks)] + pts[np.array(marks) + 1])
    return TimeGrid(np.sort(np.concatenate([pts, mids])), grid.protected)


def refine_space(mesh: SpaceMesh, marks) -> SpaceMesh:
    marks = _check_marks(marks, mesh.n_elements, "element")
    if not marks:
        return mesh
    idx = np.array(marks)
    nodes = mesh.nodes
    mids = 0.5 * (nodes[idx] + nodes[idx + 1])
    new_nodes = np.concatenate([nodes, mids])
    order = np.argsort(new_nodes, kind="stable")
    split = np.ones(mesh.n_elements, dtype=int)
    split[idx] = 2
    levels = np.repeat(mesh.levels, split)
    bumped = np.repeat(np.where(split == 2, 1, 0), split)
    return SpaceMesh(new_nodes[order], levels + bumped)


def uniform_refine(mesh: SpaceMesh, n: int) -> SpaceMesh:
    if n < 0:
        raise GridError("number of refinements must be nonnegative")
    for _ in range(n):
        mesh = refine_space(mesh, range(mesh.n_elements))
    return mesh


def common_refinement(a: SpaceMesh, b: SpaceMesh) -> SpaceMesh:
    if a.L != b.L:
        raise GridError("meshes cover different domains")
    if a.same_as(b):
        return a
    return SpaceMesh(np.union1d(a.nodes, b.nodes))


def interpolation_matrix(source: SpaceMesh, points: np.ndarray) -> sp.csr_matrix:
    """Sparse matrix evaluating a P1 function on ``source`` at ``points``."""
    points = np.asarray(points, dtype=float)
    nodes = source.nodes
    e = np.clip(np.searchsorted(nodes, points, side="right") - 1, 0, source.n_elements - 1)
    t = (points - nodes[e]) / (nodes[e + 1] - nodes[e])
    rows = np.repeat(np.arange(points.size), 2)
    cols = np.column_stack([e, e + 1]).ravel()
    vals = np.column_stack([1.0 - t, t]).ravel()
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(points.size, source.n_nodes))
    mat.eliminate_zeros()
    return mat


def prolong(values, source: SpaceMesh, target: SpaceMesh) -> np.ndarray:
    """Represent a P1 function on ``source`` exactly on a finer ``target``."""
    values = np.asarray(values, dtype=float)
    if values.shape != (source.n_nodes,):
        raise GridError("coefficient count does not match source mesh")
    if source.same_as(target):
        return values.copy()
    if source.L != target.L or not np.all(np.isin(source.nodes, target.nodes)):
        raise GridError("target mesh does not contain every source node")
    return np.interp(target.nodes, source.nodes, values)

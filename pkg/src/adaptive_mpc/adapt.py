"""Dörfler marking and the budgeted solve-estimate-mark-refine loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .dwr import Indicators, estimate
from .grid import SpaceTimeGrid, refine_space, refine_time
from .model import ProblemSpec, Qoi, window_mask
from .solver import HessianMode, KktSolution, SecondarySolution, SolverError, solve_ocp, solve_secondary
from .trajectory import ControlTrajectory, transfer_control

log = logging.getLogger(__name__)


class AdaptMode(str, Enum):
    TIME_ONLY = "time"
    SPACE_ONLY = "space"
    SPACE_TIME = "space_time"


@dataclass(frozen=True)
class AdaptConfig:
    """Refinement policy and budgets (``None`` budget: unlimited)."""

    mode: AdaptMode = AdaptMode.TIME_ONLY
    theta: float | None = None
    max_time_points: int | None = None
    max_space_dofs_total: int | None = None
    max_rounds: int = 20
    theta_time: float = 0.5
    theta_space: float = 0.3
    hessian: HessianMode = HessianMode.EXACT

    def __post_init__(self):
        object.__setattr__(self, "mode", AdaptMode(self.mode))
        object.__setattr__(self, "hessian", HessianMode(self.hessian))
        for th in (self.theta, self.theta_time, self.theta_space):
            if th is not None and not 0.0 < th <= 1.0:
                raise ValueError("Dörfler fraction must lie in (0, 1]")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")

    @property
    def time_fraction(self) -> float:
        return self.theta if self.theta is not None else self.theta_time

    @property
    def space_fraction(self) -> float:
        return self.theta if self.theta is not None else self.theta_space


def mark(values, theta: float) -> list[int]:
    """Smallest set of largest entries whose sum reaches theta times the total."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        return []
    if np.any(v < 0):
        raise ValueError("marking needs nonnegative values")
    total = v.sum()
    if total <= 0:
        return []
    order = np.argsort(-v, kind="stable")
    csum = np.cumsum(v[order])
    n = int(np.searchsorted(csum, theta * total * (1.0 - 1e-12), side="left")) + 1
    return sorted(int(i) for i in order[:min(n, v.size)])


@dataclass
class AdaptResult:
    grid: SpaceTimeGrid
    solution: KktSolution
    secondary: SecondarySolution
    indicators: Indicators
    history: list = field(default_factory=list)


def _time_children(old: SpaceTimeGrid, new_time) -> SpaceTimeGrid:
    parent = np.searchsorted(old.time.points, new_time.points[1:], side="left")
    meshes = [old.meshes[0]] + [old.meshes[m] for m in parent]
    return SpaceTimeGrid(new_time, tuple(meshes))


def _refine_time_step(grid: SpaceTimeGrid, ind: Indicators, cfg: AdaptConfig):
    marks = mark(np.abs(ind.time), cfg.time_fraction)
    order = sorted(marks, key=lambda i: (-abs(ind.time[i]), i))
    n_time, n_space = grid.M + 1, grid.space_dofs
    chosen = []
    for i in order:
        add_space = grid.meshes[i + 1].n_nodes
        if cfg.max_time_points is not None and n_time + 1 > cfg.max_time_points:
            break
        if cfg.max_space_dofs_total is not None and n_space + add_space > cfg.max_space_dofs_total:
            break
        n_time += 1
        n_space += add_space
        chosen.append(i + 1)
    if not chosen:
        return None
    return _time_children(grid, refine_time(grid.time, chosen))


def _refine_space_step(grid: SpaceTimeGrid, ind: Indicators, cfg: AdaptConfig):
    pairs = [(m, e) for m, s in enumerate(ind.space) for e in range(s.size)]
    flat = np.abs(np.concatenate(ind.space))
    marks = mark(flat, cfg.space_fraction)
    order = sorted(marks, key=lambda i: (-flat[i], i))
    room = None if cfg.max_space_dofs_total is None else cfg.max_space_dofs_total - grid.space_dofs
    if room is not None:
        order = order[:max(room, 0)]
    if not order:
        return None
    per_mesh: dict[int, list[int]] = {}
    for i in order:
        m, e = pairs[i]
        per_mesh.setdefault(m, []).append(e)
    meshes = list(grid.meshes)
    for m, elems in per_mesh.items():
        meshes[m] = refine_space(meshes[m], elems)
    return SpaceTimeGrid(grid.time, tuple(meshes))


def qoi_value(sol: KktSolution, qoi: Qoi) -> float:
    disc = sol.disc
    return disc.cost(sol.x, sol.u.flat(), window_mask(disc.pts, qoi))


def adapt_loop(spec: ProblemSpec, qoi: Qoi, cfg: AdaptConfig, grid: SpaceTimeGrid,
               warm: ControlTrajectory | None = None) -> AdaptResult:
    """Solve, estimate and refine until a budget or the round limit is reached."""
    if qoi.tau is not None and not np.any(grid.time.points == qoi.tau):
        raise ValueError("initial time grid must contain the truncation time")
    if cfg.max_time_points is not None and grid.M + 1 > cfg.max_time_points:
        raise ValueError("initial grid exceeds the time budget")
    if cfg.max_space_dofs_total is not None and grid.space_dofs > cfg.max_space_dofs_total:
        raise ValueError("initial grid exceeds the space budget")
    history = []
    u0 = warm
    for rnd in range(cfg.max_rounds):
        if u0 is not None and u0.grid is not grid:
            u0 = transfer_control(u0, grid)
        sol = solve_ocp(grid, spec, u0, cfg.hessian)
        if not sol.info["converged"]:
            raise SolverError(f"OCP solve did not converge in round {rnd}")
        chi = solve_secondary(grid, spec, sol, qoi, cfg.hessian)
        ind = estimate(sol, chi, qoi, cfg.hessian)
        history.append({
            "round": rnd,
            "time_points": grid.M + 1,
            "space_dofs_total": grid.space_dofs,
            "qoi_value": qoi_value(sol, qoi),
            "eta_k": ind.eta_k,
            "eta_h": ind.eta_h,
        })
        log.info("round %d: %d time points, %d space dofs, eta_k %.3e, eta_h %.3e",
                 rnd, grid.M + 1, grid.space_dofs, ind.eta_k, ind.eta_h)
        if rnd == cfg.max_rounds - 1:
            break
        if cfg.mode is AdaptMode.TIME_ONLY:
            new = _refine_time_step(grid, ind, cfg)
        elif cfg.mode is AdaptMode.SPACE_ONLY:
            new = _refine_space_step(grid, ind, cfg)
        elif abs(ind.eta_k) >= abs(ind.eta_h):
            new = _refine_time_step(grid, ind, cfg)
        else:
            new = _refine_space_step(grid, ind, cfg)
        if new is None:
            break
        grid, u0 = new, sol.u
    return AdaptResult(grid, sol, chi, ind, history)


def write_history_csv(path, history: list) -> None:
    cols = ["round", "time_points", "space_dofs_total", "qoi_value", "eta_k", "eta_h"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row[c] if isinstance(row[c], (int, np.integer)) else format(float(row[c]), ".17g") for c in cols])

"""Receding-horizon control with adaptive open-loop solves; decay diagnostics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .adapt import AdaptConfig, adapt_loop
from .dwr import Indicators
from .fem import ControlKind
from .grid import SpaceMesh, SpaceTimeGrid, TimeGrid, uniform_refine
from .model import InitialState, ProblemSpec, Qoi
from .solver import Discretization, KktSolution, SecondarySolution, SolverError
from .trajectory import DgTrajectory

log = logging.getLogger(__name__)


class RefinementQoi(str, Enum):
    FULL = "full"
    TRUNCATED = "truncated"


@dataclass(frozen=True)
class MpcConfig:
    tau: float = 0.5
    n_steps: int = 4
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    # 0 means: simulate on the open-loop breakpoints only
    sim_time_points_per_tau: int = 51
    sim_uniform_refs: int = 5
    refinement_qoi: RefinementQoi = RefinementQoi.TRUNCATED
    initial_time_intervals: int = 10
    initial_elements: int = 12
    initial_space_refs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "refinement_qoi", RefinementQoi(self.refinement_qoi))
        if not self.tau > 0:
            raise ValueError("implementation horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.sim_time_points_per_tau == 1 or self.sim_time_points_per_tau < 0:
            raise ValueError("sim_time_points_per_tau must be 0 or at least 2")
        if self.sim_uniform_refs < 0 or self.initial_space_refs < 0:
            raise ValueError("refinement counts must be nonnegative")

    def initial_mesh(self, L: float) -> SpaceMesh:
        return uniform_refine(SpaceMesh.uniform(L, self.initial_elements), self.initial_space_refs)

    def initial_grid(self, spec: ProblemSpec) -> SpaceTimeGrid:
        time = TimeGrid.uniform(spec.T, self.initial_time_intervals, (self.tau,))
        return SpaceTimeGrid.uniform(time, self.initial_mesh(spec.L))


@dataclass
class ClosedLoopResult:
    closed_loop_cost: float
    step_costs: list
    open_loop_qoi: list
    # (absolute start, absolute end, control values, mesh or None for boundary pairs)
    implemented_control: list
    # per step: (absolute start time, simulated DgTrajectory)
    simulated: list
    time_points: list
    space_dofs: list

    @property
    def horizon_end(self) -> float:
        return self.implemented_control[-1][1] if self.implemented_control else 0.0


def _sim_time(tau: float, ocp_points: np.ndarray, per_tau: int) -> TimeGrid:
    brk = ocp_points[ocp_points <= tau]
    pts = brk if per_tau == 0 else np.union1d(np.linspace(0.0, tau, per_tau), brk)
    pts[-1] = tau
    return TimeGrid(np.unique(pts))


def simulate_step(spec: ProblemSpec, sol: KktSolution, tau: float, sim_mesh: SpaceMesh, per_tau: int):
    """Run the plant over [0, tau] with the open-loop control held on its slabs.

    ``spec.x0`` is the current plant state; returns (trajectory, flat control, discretization).
    """
    ocp_grid = sol.grid
    m_tau = ocp_grid.time.index_of(tau)
    time = _sim_time(tau, ocp_grid.time.points, per_tau)
    grid = SpaceTimeGrid.uniform(time, sim_mesh)
    parent = np.searchsorted(ocp_grid.time.points, time.points[1:], side="left")
    parts = []
    for m in parent:
        if m > m_tau:
            raise AssertionError("simulation slab outside the implementation window")
        u = sol.u.values[m - 1]
        if spec.control is ControlKind.DISTRIBUTED:
            u = np.interp(sim_mesh.nodes, ocp_grid.meshes[m].nodes, u)
        parts.append(u)
    disc = Discretization(grid, replace(spec, T=tau))
    u_flat = np.concatenate(parts)
    return disc.solve_forward(u_flat), u_flat, disc


def mpc_run(spec: ProblemSpec, cfg: MpcConfig) -> ClosedLoopResult:
    if cfg.tau > spec.T:
        raise ValueError("implementation horizon exceeds the prediction horizon")
    sim_mesh = uniform_refine(cfg.initial_mesh(spec.L), cfg.sim_uniform_refs)
    state = spec.x0 if spec.x0 is not None else InitialState(sim_mesh, np.zeros(sim_mesh.n_nodes))
    qoi = Qoi.truncated(cfg.tau) if cfg.refinement_qoi is RefinementQoi.TRUNCATED else Qoi.full()
    res = ClosedLoopResult(0.0, [], [], [], [], [], [])
    for k in range(cfg.n_steps):
        t_abs = spec.t0 + k * cfg.tau
        spec_k = replace(spec, t0=t_abs, x0=state)
        try:
            out = adapt_loop(spec_k, qoi, cfg.adapt, cfg.initial_grid(spec))
            traj, u_flat, disc = simulate_step(spec_k, out.solution, cfg.tau, sim_mesh, cfg.sim_time_points_per_tau)
        except (SolverError, np.linalg.LinAlgError) as exc:
            raise SolverError(f"MPC step {k} failed: {exc}") from exc
        step_cost = disc.cost(traj, u_flat)
        sol = out.solution
        m_tau = sol.grid.time.index_of(cfg.tau)
        for m in range(1, m_tau + 1):
            mesh = sol.grid.meshes[m] if spec.control is ControlKind.DISTRIBUTED else None
            pts = sol.grid.time.points
            res.implemented_control.append((t_abs - spec.t0 + pts[m - 1], t_abs - spec.t0 + pts[m], sol.u.values[m - 1].copy(), mesh))
        res.step_costs.append(step_cost)
        res.open_loop_qoi.append(out.history[-1]["qoi_value"])
        res.simulated.append((t_abs, traj))
        res.time_points.append(sol.grid.M + 1)
        res.space_dofs.append(sol.grid.space_dofs)
        log.info("MPC step %d: step cost %.6g, %d time points, %d space dofs",
                 k, step_cost, sol.grid.M + 1, sol.grid.space_dofs)
        state = InitialState(sim_mesh, traj.values[-1].copy())
    res.closed_loop_cost = float(sum(res.step_costs))
    return res


class DecayFitError(ValueError):
    pass


@dataclass(frozen=True)
class DecayFit:
    slope: float
    intercept: float
    points_used: int


def fit_decay(t, values, window: tuple[float, float], floor: float) -> DecayFit:
    """Least-squares line through (t, log value) on the window, ignoring values <= floor."""
    a, b = window
    if not a < b:
        raise DecayFitError("empty fit window")
    if not floor > 0:
        raise DecayFitError("floor must be positive")
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if np.any(v < 0):
        raise DecayFitError("values must be nonnegative")
    sel = (t >= a) & (t <= b) & (v > floor)
    n = int(sel.sum())
    if n < 3:
        raise DecayFitError(f"only {n} usable points in [{a}, {b}]")
    slope, intercept = np.polyfit(t[sel], np.log(v[sel]), 1)
    return DecayFit(float(slope), float(intercept), n)


def slab_norms(traj: DgTrajectory) -> np.ndarray:
    from .fem import assemble_mass

    return np.array([np.sqrt(max(float(v @ assemble_mass(mesh).matvec(v)), 0.0))
                     for v, mesh in zip(traj.values[1:], traj.grid.meshes[1:])])


def control_norms(disc: Discretization, values) -> np.ndarray:
    return np.array([np.sqrt(max(float(u @ disc.ctrl[m].riesz().matvec(u)), 0.0))
                     for m, u in enumerate(values, start=1)])


def decay_report(base: KktSolution, chi: SecondarySolution, indicators: Indicators, tau: float,
                 floor: float = 1e-11, window: tuple[float, float] | None = None) -> dict:
    """Per-slab secondary norms and indicators with exponential fits on [2 tau, 0.6 T]."""
    grid = base.grid
    T = grid.time.T
    window = window or (2 * tau, 0.6 * T)
    series = {
        "t": grid.time.points[1:].copy(),
        "v_norm": slab_norms(chi.v),
        "q_norm": control_norms(base.disc, chi.q.values),
        "z_norm": slab_norms(chi.z),
        "eta_k_abs": np.abs(indicators.time),
        "eta_h_abs": np.array([np.abs(s).sum() for s in indicators.space[1:]]),
    }
    fits = {}
    for name in ("v_norm", "q_norm", "z_norm", "eta_k_abs", "eta_h_abs"):
        try:
            fits[name] = fit_decay(series["t"], series[name], window, floor)
        except DecayFitError as exc:
            fits[name] = str(exc)
    return {"series": series, "fits": fits, "window": window, "floor": floor, "tau": tau}

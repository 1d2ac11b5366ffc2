"""Command-line batch runner: JSON configs in, CSV tables and JSON summaries out.

Exit status: 0 on success, 1 on configuration or filesystem errors, 2 when a
solver fails to converge.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import AdaptConfig, AdaptMode, adapt_loop, write_history_csv
from .dwr import estimate, write_indicators_csv
from .grid import SpaceMesh, SpaceTimeGrid, TimeGrid
from .model import Linear, ProblemSpec, Qoi, Quasilinear
from .mpc import ClosedLoopResult, MpcConfig, RefinementQoi, control_norms, decay_report, mpc_run, slab_norms
from .solver import SolverError, solve_ocp, solve_secondary

log = logging.getLogger(__name__)

EXPERIMENTS = ("solve_ocp", "mpc", "decay", "sweep")
WORKERS_ENV = "ADAPTIVE_MPC_WORKERS"

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DecayConfig:
    time_intervals: int = 100
    elements: int = 24
    window: tuple[float, float] | None = None
    floor: float = 1e-11
    secondary_rtol: float = 1e-13
    maxiter: int = 20000


@dataclass(frozen=True)
class SweepConfig:
    budgets: tuple[int, ...] = (5, 8, 11, 21, 31, 41)
    # which budget the listed values cap: "time" points or total "space" dofs
    budget_kind: str = "time"
    alphas: tuple[float, ...] = ()
    policies: tuple[str, ...] = ("full", "truncated")


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    problem: ProblemSpec
    qoi: Qoi
    adapt: AdaptConfig
    mpc: MpcConfig
    seed: int = 0
    out_dir: str | None = None
    decay: DecayConfig = field(default_factory=DecayConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


# ---------------------------------------------------------------- parsing

def _section(doc: dict, key: str, path: str) -> dict:
    val = doc.get(key, {})
    if not isinstance(val, dict):
        raise ConfigError(f"{path}{key}: expected an object")
    return val


def _check_keys(sec: dict, allowed, path: str) -> None:
    for k in sec:
        if k not in allowed:
            raise ConfigError(f"{path}{k}: unknown field")


def _num(sec: dict, key: str, default, path: str, kind=float):
    if key not in sec or sec[key] is None:
        return default
    v = sec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}{key}: expected a number")
    if kind is int:
        if float(v) != int(v):
            raise ConfigError(f"{path}{key}: expected an integer")
        return int(v)
    if not np.isfinite(v):
        raise ConfigError(f"{path}{key}: must be finite")
    return float(v)


def _choice(sec: dict, key: str, default: str, options, path: str) -> str:
    v = sec.get(key, default)
    if v not in options:
        raise ConfigError(f"{path}{key}: expected one of {sorted(options)}, got {v!r}")
    return v


def _parse_problem(sec: dict) -> ProblemSpec:
    p = "problem."
    _check_keys(sec, {"L", "T", "dynamics", "control", "reference", "alpha"}, p)
    dyn_sec = _section(sec, "dynamics", p)
    dp = p + "dynamics."
    kind = _choice(dyn_sec, "kind", "linear", ("linear", "quasilinear"), dp)
    if kind == "linear":
        _check_keys(dyn_sec, {"kind", "nu", "s"}, dp)
        dyn = Linear(_num(dyn_sec, "nu", 0.1, dp), _num(dyn_sec, "s", 0.0, dp))
    else:
        _check_keys(dyn_sec, {"kind", "c", "d"}, dp)
        dyn = Quasilinear(_num(dyn_sec, "c", 0.1, dp), _num(dyn_sec, "d", 0.1, dp))
    try:
        return ProblemSpec(
            L=_num(sec, "L", 3.0, p),
            T=_num(sec, "T", 10.0, p),
            dynamics=dyn,
            control=_choice(sec, "control", "distributed", ("distributed", "neumann"), p),
            reference=_choice(sec, "reference", "static", ("static", "dynamic", "exp_increasing", "zero"), p),
            alpha=_num(sec, "alpha", 1e-3, p),
        )
    except ValueError as exc:
        raise ConfigError(f"problem: {exc}") from exc


def _parse_adapt(sec: dict) -> AdaptConfig:
    p = "adapt."
    _check_keys(sec, {"mode", "theta", "theta_time", "theta_space", "max_time_points",
                      "max_space_dofs_total", "max_rounds", "hessian"}, p)
    try:
        return AdaptConfig(
            mode=_choice(sec, "mode", "time", [m.value for m in AdaptMode], p),
            theta=_num(sec, "theta", None, p),
            max_time_points=_num(sec, "max_time_points", None, p, int),
            max_space_dofs_total=_num(sec, "max_space_dofs_total", None, p, int),
            max_rounds=_num(sec, "max_rounds", 20, p, int),
            theta_time=_num(sec, "theta_time", 0.5, p),
            theta_space=_num(sec, "theta_space", 0.3, p),
            hessian=_choice(sec, "hessian", "exact", ("exact", "gauss_newton"), p),
        )
    except ValueError as exc:
        raise ConfigError(f"adapt: {exc}") from exc


def _parse_mpc(sec: dict, adapt: AdaptConfig, policy: str) -> MpcConfig:
    p = "mpc."
    _check_keys(sec, {"tau", "n_steps", "sim_time_points_per_tau", "sim_uniform_refs",
                      "initial_time_intervals", "initial_elements", "initial_space_refs"}, p)
    try:
        return MpcConfig(
            tau=_num(sec, "tau", 0.5, p),
            n_steps=_num(sec, "n_steps", 4, p, int),
            adapt=adapt,
            sim_time_points_per_tau=_num(sec, "sim_time_points_per_tau", 51, p, int),
            sim_uniform_refs=_num(sec, "sim_uniform_refs", 5, p, int),
            refinement_qoi=policy,
            initial_time_intervals=_num(sec, "initial_time_intervals", 10, p, int),
            initial_elements=_num(sec, "initial_elements", 12, p, int),
            initial_space_refs=_num(sec, "initial_space_refs", 0, p, int),
        )
    except ValueError as exc:
        raise ConfigError(f"mpc: {exc}") from exc


def _parse_decay(sec: dict) -> DecayConfig:
    p = "decay."
    _check_keys(sec, {"time_intervals", "elements", "window", "floor", "secondary_rtol", "maxiter"}, p)
    window = sec.get("window")
    if window is not None:
        if not (isinstance(window, list) and len(window) == 2):
            raise ConfigError(f"{p}window: expected [start, end]")
        window = (_num({"a": window[0]}, "a", 0.0, p + "window."), _num({"b": window[1]}, "b", 0.0, p + "window."))
        if not window[0] < window[1]:
            raise ConfigError(f"{p}window: start must be below end")
    cfg = DecayConfig(
        time_intervals=_num(sec, "time_intervals", 100, p, int),
        elements=_num(sec, "elements", 24, p, int),
        window=window,
        floor=_num(sec, "floor", 1e-11, p),
        secondary_rtol=_num(sec, "secondary_rtol", 1e-13, p),
        maxiter=_num(sec, "maxiter", 20000, p, int),
    )
    if cfg.time_intervals < 1 or cfg.elements < 2 or not cfg.floor > 0 or cfg.maxiter < 1:
        raise ConfigError(f"{p}: sizes must be positive, elements at least 2, floor positive")
    return cfg


def _parse_sweep(sec: dict, adapt: AdaptConfig) -> SweepConfig:
    p = "sweep."
    _check_keys(sec, {"budgets", "budget_kind", "alphas", "policies"}, p)
    default_kind = "time" if adapt.mode is AdaptMode.TIME_ONLY else "space"
    budgets = sec.get("budgets", list(SweepConfig.budgets))
    alphas = sec.get("alphas", [])
    policies = sec.get("policies", list(SweepConfig.policies))
    for name, seq in (("budgets", budgets), ("alphas", alphas), ("policies", policies)):
        if not isinstance(seq, list):
            raise ConfigError(f"{p}{name}: expected a list")
    budgets = tuple(_num({"v": b}, "v", 0, f"{p}budgets[{i}].", int) for i, b in enumerate(budgets))
    alphas = tuple(_num({"v": a}, "v", 0.0, f"{p}alphas[{i}].") for i, a in enumerate(alphas))
    for i, pol in enumerate(policies):
        if pol not in ("full", "truncated"):
            raise ConfigError(f"{p}policies[{i}]: expected 'full' or 'truncated'")
    if not budgets or any(b < 2 for b in budgets):
        raise ConfigError(f"{p}budgets: need at least one budget, each at least 2")
    if any(not a > 0 for a in alphas):
        raise ConfigError(f"{p}alphas: Tikhonov parameter alpha must be positive")
    if not policies:
        raise ConfigError(f"{p}policies: need at least one policy")
    kind = _choice(sec, "budget_kind", default_kind, ("time", "space"), p)
    return SweepConfig(budgets, kind, alphas, tuple(policies))


def parse_config(text: str, experiment: str | None = None) -> RunConfig:
    """Validate a JSON document and fill defaults; ``experiment`` comes from the subcommand."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("top level: expected an object")
    _check_keys(doc, {"experiment", "problem", "qoi", "adapt", "mpc", "decay", "sweep", "seed", "out_dir"}, "")
    exp = doc.get("experiment", experiment)
    if exp is None:
        raise ConfigError("experiment: missing")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment: expected one of {list(EXPERIMENTS)}, got {exp!r}")
    if experiment is not None and exp != experiment:
        raise ConfigError(f"experiment: config says {exp!r} but the command runs {experiment!r}")
    for key, owner in (("decay", "decay"), ("sweep", "sweep")):
        if key in doc and exp != owner:
            raise ConfigError(f"{key}: only valid for the {owner} experiment")

    problem = _parse_problem(_section(doc, "problem", ""))
    adapt = _parse_adapt(_section(doc, "adapt", ""))
    qsec = _section(doc, "qoi", "")
    _check_keys(qsec, {"kind", "tau"}, "qoi.")
    policy = _choice(qsec, "kind", "truncated", ("full", "truncated"), "qoi.")
    mpc = _parse_mpc(_section(doc, "mpc", ""), adapt, policy)
    if mpc.tau > problem.T:
        raise ConfigError(f"mpc.tau: implementation horizon {mpc.tau} exceeds T = {problem.T}")
    qtau = _num(qsec, "tau", mpc.tau, "qoi.")
    if policy == "truncated":
        if not 0 < qtau <= problem.T:
            raise ConfigError(f"qoi.tau: must lie in (0, T], got {qtau}")
        if exp in ("mpc", "sweep") and qtau != mpc.tau:
            raise ConfigError("qoi.tau: must equal mpc.tau for closed-loop runs")
        qoi = Qoi.truncated(qtau)
    else:
        if "tau" in qsec:
            raise ConfigError("qoi.tau: not allowed for the full cost")
        qoi = Qoi.full()
    seed = _num(doc, "seed", 0, "", int)
    out_dir = doc.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir: expected a string")
    decay = _parse_decay(_section(doc, "decay", "")) if exp == "decay" else DecayConfig()
    sweep = _parse_sweep(_section(doc, "sweep", ""), adapt) if exp == "sweep" else SweepConfig()
    return RunConfig(exp, problem, qoi, adapt, mpc, seed, out_dir, decay, sweep)


# ---------------------------------------------------------------- output helpers

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if hasattr(obj, "value"):
        return obj.value
    return obj


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_summary(cfg: RunConfig) -> dict:
    dyn = cfg.problem.dynamics
    dyn_d = {"kind": "linear" if isinstance(dyn, Linear) else "quasilinear", **asdict(dyn)}
    prob = {"L": cfg.problem.L, "T": cfg.problem.T, "dynamics": dyn_d, "control": cfg.problem.control,
            "reference": cfg.problem.reference, "alpha": cfg.problem.alpha}
    mpc = {k: v for k, v in asdict(cfg.mpc).items() if k != "adapt"}
    return {"experiment": cfg.experiment, "problem": prob, "qoi": {"tau": cfg.qoi.tau},
            "adapt": asdict(cfg.adapt), "mpc": mpc, "seed": cfg.seed}


# ---------------------------------------------------------------- experiments

def write_trajectory_csv(path: Path, sol) -> None:
    """One row per slab: m, t_m, k_m and the L2 norms of state, control and adjoint."""
    grid = sol.grid
    pts, k = grid.time.points, grid.time.k
    xn, ln = slab_norms(sol.x), slab_norms(sol.lam)
    un = control_norms(sol.disc, sol.u.values)
    rows = [(m, pts[m], k[m - 1], grid.meshes[m].n_nodes, xn[m - 1], un[m - 1], ln[m - 1])
            for m in range(1, grid.M + 1)]
    _write_csv(path, ["m", "t_m", "k_m", "n_nodes", "state_l2", "control_norm", "adjoint_l2"], rows)


def run_solve_ocp(cfg: RunConfig, out: Path) -> dict:
    grid = cfg.mpc.initial_grid(cfg.problem)
    if cfg.qoi.tau is not None and cfg.qoi.tau != cfg.mpc.tau:
        grid = SpaceTimeGrid.uniform(TimeGrid.uniform(cfg.problem.T, cfg.mpc.initial_time_intervals,
                                                      (cfg.qoi.tau,)), cfg.mpc.initial_mesh(cfg.problem.L))
    res = adapt_loop(cfg.problem, cfg.qoi, cfg.adapt, grid)
    write_history_csv(out / "history.csv", res.history)
    write_indicators_csv(out / "indicators.csv", res.indicators, res.grid)
    write_trajectory_csv(out / "trajectory.csv", res.solution)
    last = res.history[-1]
    return {"rounds": len(res.history), "qoi_value": last["qoi_value"], "eta_k": last["eta_k"],
            "eta_h": last["eta_h"], "time_points": last["time_points"],
            "space_dofs_total": last["space_dofs_total"],
            "outer_iterations": res.solution.info["outer_iterations"]}


def _budget(adapt: AdaptConfig):
    return adapt.max_time_points if adapt.mode is AdaptMode.TIME_ONLY else adapt.max_space_dofs_total


def _closed_loop_rows(policy: str, budget, res: ClosedLoopResult, tau: float):
    total = 0.0
    for i, cost in enumerate(res.step_costs):
        total += cost
        yield (policy, budget, i, i * tau, cost, res.open_loop_qoi[i], total, res.time_points[i], res.space_dofs[i])


CLOSED_LOOP_HEADER = ["policy", "budget", "step", "t_start", "step_cost", "open_loop_qoi",
                      "cumulative_closed_loop_cost", "time_points", "space_dofs"]


def run_mpc(cfg: RunConfig, out: Path, compare: bool) -> dict:
    policies = ("full", "truncated") if compare else (cfg.mpc.refinement_qoi.value,)
    rows, summary = [], {}
    for pol in policies:
        res = mpc_run(cfg.problem, replace(cfg.mpc, refinement_qoi=pol))
        rows.extend(_closed_loop_rows(pol, _budget(cfg.adapt), res, cfg.mpc.tau))
        summary[pol] = {"closed_loop_cost": res.closed_loop_cost, "step_costs": res.step_costs}
    _write_csv(out / "closed_loop.csv", CLOSED_LOOP_HEADER, rows)
    if not compare:
        return {"policy": policies[0], **summary[policies[0]]}
    return {"policies": summary,
            "truncated_minus_full": summary["truncated"]["closed_loop_cost"] - summary["full"]["closed_loop_cost"]}


def run_decay(cfg: RunConfig, out: Path) -> dict:
    d = cfg.decay
    tau = cfg.qoi.tau if cfg.qoi.tau is not None else cfg.mpc.tau
    time = TimeGrid.uniform(cfg.problem.T, d.time_intervals, (tau,))
    grid = SpaceTimeGrid.uniform(time, SpaceMesh.uniform(cfg.problem.L, d.elements))
    base = solve_ocp(grid, cfg.problem, None, cfg.adapt.hessian, maxiter=d.maxiter)
    if not base.info["converged"]:
        raise SolverError("open-loop solve did not converge")
    chi = solve_secondary(grid, cfg.problem, base, cfg.qoi, cfg.adapt.hessian, rtol=d.secondary_rtol, maxiter=d.maxiter)
    ind = estimate(base, chi, cfg.qoi, cfg.adapt.hessian)
    rep = decay_report(base, chi, ind, tau, floor=d.floor, window=d.window)
    names = ["v_norm", "q_norm", "z_norm", "eta_k_abs", "eta_h_abs"]
    s = rep["series"]
    rows = [(m + 1, s["t"][m], *(s[n][m] for n in names)) for m in range(len(s["t"]))]
    _write_csv(out / "decay.csv", ["m", "t_m", *names], rows)
    fits = {}
    for n in names:
        f = rep["fits"][n]
        fits[n] = {"error": f} if isinstance(f, str) else asdict(f)
    return {"window": list(rep["window"]), "floor": rep["floor"], "fits": fits, "eta_k": ind.eta_k, "eta_h": ind.eta_h}


def _arm(args):
    """One sweep arm; top level so that worker processes can import it."""
    spec, mcfg = args
    try:
        res = mpc_run(spec, mcfg)
    except SolverError as exc:
        return {"error": str(exc)}
    return {"closed_loop_cost": res.closed_loop_cost, "time_points": max(res.time_points),
            "space_dofs_total": max(res.space_dofs)}


def worker_count() -> int:
    n = os.cpu_count() or 1
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            cap = int(env)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV}: expected an integer") from exc
        if cap < 1:
            raise ConfigError(f"{WORKERS_ENV}: must be at least 1")
        n = min(n, cap)
    return n


def sweep_arms(cfg: RunConfig) -> list[tuple[int, float, str]]:
    alphas = cfg.sweep.alphas or (cfg.problem.alpha,)
    return [(b, a, p) for b in cfg.sweep.budgets for a in alphas for p in cfg.sweep.policies]


def run_sweep(cfg: RunConfig, out: Path) -> dict:
    arms = sweep_arms(cfg)
    jobs = []
    for budget, alpha, pol in arms:
        cap = {"max_time_points": budget} if cfg.sweep.budget_kind == "time" else {"max_space_dofs_total": budget}
        mcfg = replace(cfg.mpc, refinement_qoi=pol, adapt=replace(cfg.adapt, **cap))
        jobs.append((replace(cfg.problem, alpha=alpha), mcfg))
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_arm, jobs))
    else:
        results = [_arm(j) for j in jobs]
    arm_dir = out / "arms"
    arm_dir.mkdir(exist_ok=True)
    for i, ((budget, alpha, pol), r) in enumerate(zip(arms, results)):
        _write_json(arm_dir / f"arm_{i:03d}.json", {"budget": budget, "alpha": alpha, "policy": pol, **r})
    rows = [(budget, alpha, pol, r.get("closed_loop_cost", float("nan")), r.get("time_points", 0),
             r.get("space_dofs_total", 0), "error" not in r)
            for (budget, alpha, pol), r in zip(arms, results)]
    _write_csv(out / "sweep.csv", ["budget", "alpha", "policy", "closed_loop_cost", "max_time_points",
                                   "max_space_dofs_total", "converged"], rows)
    failed = [i for i, r in enumerate(results) if "error" in r]
    if failed:
        raise SolverError(f"{len(failed)} sweep arm(s) failed to converge: {failed}")
    return {"rows": len(rows), "budget_kind": cfg.sweep.budget_kind}


# ---------------------------------------------------------------- entry points

def run(cfg: RunConfig, out_dir: str | os.PathLike, compare_policies: bool = False) -> int:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        log.error("cannot write to %s: %s", out, exc)
        return EXIT_CONFIG
    try:
        if cfg.experiment == "solve_ocp":
            summary = run_solve_ocp(cfg, out)
        elif cfg.experiment == "mpc":
            summary = run_mpc(cfg, out, compare_policies)
        elif cfg.experiment == "decay":
            summary = run_decay(cfg, out)
        else:
            summary = run_sweep(cfg, out)
    except SolverError as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("filesystem error: %s", exc)
        return EXIT_CONFIG
    _write_json(out / "summary.json", {"config": _config_summary(cfg), "result": summary, "version": __version__})
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adaptive-mpc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("solve-ocp", "mpc", "decay", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--out", default=None, help="output directory (default: out_dir from the config, else ./out)")
        if name == "mpc":
            sp.add_argument("--compare-policies", action="store_true", help="run both refinement policies")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        text = Path(args.config).read_text()
        cfg = parse_config(text, args.command.replace("-", "_"))
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return EXIT_CONFIG
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    out = args.out or cfg.out_dir or "out"
    return run(cfg, out, getattr(args, "compare_policies", False))


if __name__ == "__main__":
    sys.exit(main())

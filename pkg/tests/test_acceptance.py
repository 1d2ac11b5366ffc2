"""Acceptance checks 1 to 9.

Each check returns (passed, detail) and prints one line. Run this file with
``python3 tests/test_acceptance.py`` for the summary alone, or through pytest.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adaptive_mpc import InitialState, Linear, ProblemSpec, Qoi, Quasilinear, SpaceMesh, SpaceTimeGrid, TimeGrid
from adaptive_mpc.adapt import AdaptConfig, adapt_loop
from adaptive_mpc.dwr import discrete_weight, estimate, residuals_dual, residuals_primal
from adaptive_mpc.grid import refine_space, uniform_refine
from adaptive_mpc.model import window_mask
from adaptive_mpc.mpc import MpcConfig, fit_decay, mpc_run
from adaptive_mpc.solver import (
    Discretization,
    KktSolution,
    backward_operator_form,
    forward_operator_form,
    hessian_apply,
    reduced_gradient,
    solve_adjoint,
    solve_forward,
    solve_ocp,
    solve_secondary,
)
from adaptive_mpc.trajectory import ControlTrajectory, DgTrajectory, inner

from conftest import random_grid
from oracles import DenseKkt

RESULTS = {}


def _report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok, detail


def _random_traj(rng, grid, dirichlet=False):
    vals = [rng.normal(size=m.n_nodes) for m in grid.meshes]
    if dirichlet:
        for v in vals:
            v[0] = v[-1] = 0.0
    return DgTrajectory(grid, tuple(vals))


# ---------------------------------------------------------------- 1
def check_structural_identities(n_grids=100, seed=1):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_sym = worst_jump = 0.0
    for i in range(n_grids):
        g = random_grid(rng, max_slabs=8, max_nodes=9)
        dyn = Linear(0.1, rng.uniform(0, 1)) if i % 2 else Quasilinear(rng.uniform(0, 1), rng.uniform(0.05, 1))
        spec = ProblemSpec(T=g.time.T, dynamics=dyn)
        disc = Discretization(g, spec)
        jac = disc.linearize(_random_traj(rng, g)).jac
        v, z = _random_traj(rng, g), _random_traj(rng, g)
        lhs = backward_operator_form(disc, jac, z, v)
        rhs = forward_operator_form(disc, jac, v, z)
        scale = max(abs(lhs), abs(rhs), 1e-300)
        worst_sym = max(worst_sym, abs(lhs - rhs) / scale)

        vals, meshes = v.values, g.meshes
        sq = [inner(a, m, a, m) for a, m in zip(vals, meshes)]
        left = sq[0]
        right = 0.5 * (sq[-1] + sq[0])
        for m in range(1, g.M + 1):
            cross = inner(vals[m], meshes[m], vals[m - 1], meshes[m - 1])
            left += sq[m] - cross
            right += 0.5 * (sq[m - 1] - 2.0 * cross + sq[m])
        worst_jump = max(worst_jump, abs(left - right) / max(abs(left), abs(right)))
    dt = time.perf_counter() - t0
    ok = worst_sym <= 1e-10 and worst_jump <= 1e-10 and dt < 10
    return _report(1, ok, f"adjoint symmetry {worst_sym:.1e}, jump energy {worst_jump:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------- 2
def check_derivatives(seed=2):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    g = SpaceTimeGrid.uniform(TimeGrid.uniform(3.0, 6), SpaceMesh.uniform(3.0, 8))
    errs = []
    for dyn in (Linear(0.1, 0.3), Quasilinear(0.1, 0.1)):
        spec = ProblemSpec(T=3.0, dynamics=dyn, reference="dynamic")
        disc = Discretization(g, spec)
        n = int(disc.ctrl_offsets[-1])
        u = disc.control(0.5 * rng.normal(size=n))
        x = solve_forward(g, spec, u, disc)
        lam = solve_adjoint(g, spec, x, u, disc=disc)
        grad = reduced_gradient(g, spec, x, u, lam, disc, dual=True).flat()
        cost = lambda w: disc.cost(disc.solve_forward(w), w)
        eps = 1e-5
        fd = np.array([(cost(u.flat() + eps * e) - cost(u.flat() - eps * e)) / (2 * eps) for e in np.eye(n)])
        g_err = np.linalg.norm(fd - grad) / np.linalg.norm(grad)

        def grad_at(w):
            xw = disc.solve_forward(w)
            return disc.gradient_dual(w, disc.linearize(xw).backward(disc.tracking_load(xw)))

        du = disc.control(rng.normal(size=n))
        hd = hessian_apply(g, spec, KktSolution(x, u, lam, {}, disc), du, dual=True).flat()
        e = 1e-4
        fdh = (grad_at(u.flat() + e * du.flat()) - grad_at(u.flat() - e * du.flat())) / (2 * e)
        h_err = np.linalg.norm(fdh - hd) / np.linalg.norm(hd)
        errs.append((type(dyn).__name__, g_err, h_err))
    dt = time.perf_counter() - t0
    ok = all(ge <= 1e-5 and he <= 1e-4 for _, ge, he in errs) and dt < 30
    detail = ", ".join(f"{name} grad {ge:.1e} hess {he:.1e}" for name, ge, he in errs)
    return _report(2, ok, f"{detail}, {dt:.1f}s")


# ---------------------------------------------------------------- 3
def check_dense_oracle():
    t0 = time.perf_counter()
    tg = TimeGrid(np.array([0.0, 0.5, 1.2, 2.0]))
    meshes = tuple(SpaceMesh(np.array([0.0, a, 3.0])) for a in (1.5, 1.0, 2.0, 1.2))
    g = SpaceTimeGrid(tg, meshes)
    x0 = InitialState(SpaceMesh.uniform(3.0, 4), np.array([0.0, 0.7, 1.1, 0.4, 0.0]))
    worst = 0.0
    for ctrl in ("distributed", "neumann"):
        spec = ProblemSpec(T=2.0, dynamics=Linear(0.1, 0.3), control=ctrl, reference="dynamic", alpha=1e-2, x0=x0)
        dense = DenseKkt(g, spec)
        x, u, lam = dense.solve()
        sol = solve_ocp(g, spec)
        mine = np.concatenate([dense.free_values(sol.x), sol.u.flat(), dense.free_values(sol.lam)])
        ref = np.concatenate([x, u, lam])
        worst = max(worst, np.abs(mine - ref).max())
        for qoi, window in ((Qoi.full(), [True] * 3), (Qoi.truncated(0.5), [True, False, False])):
            v, q, z = dense.secondary(x, u, window)
            chi = solve_secondary(g, spec, sol, qoi, rtol=1e-12)
            mine = np.concatenate([dense.free_values(chi.v), chi.q.flat(), dense.free_values(chi.z)])
            worst = max(worst, np.abs(mine - np.concatenate([v, q, z])).max())
    dt = time.perf_counter() - t0
    return _report(3, worst <= 1e-8 and dt < 5, f"max coefficient deviation {worst:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------- 4
def _weight_norm(disc, traj):
    return np.sqrt(sum(disc.k[m] * inner(v, mesh, v, mesh)
                       for m, (v, mesh) in enumerate(zip(traj.values, traj.grid.meshes)) if m > 0))


def _qoi_derivative_norm(sol, qoi):
    """Dual norm of (I'_x, I'_u), the right-hand side of the secondary system."""
    disc = sol.disc
    mask = window_mask(disc.pts, qoi)
    loads = disc.tracking_load(sol.x, mask)
    total = 0.0
    iu = np.zeros(sol.u.flat().size)
    for m in range(1, disc.M + 1):
        if not mask[m - 1]:
            continue
        fr = np.arange(disc.grid.meshes[m].n_nodes)[disc.free]
        lm = loads[m][fr]
        total += float(lm @ np.linalg.solve(disc.mass[m].toarray()[np.ix_(fr, fr)], lm)) / disc.k[m]
        o = disc.ctrl_offsets
        iu[o[m - 1]:o[m]] = disc.k[m] * disc.spec.alpha * disc.ctrl[m].riesz().matvec(sol.u.values[m - 1])
    return np.sqrt(total + float(iu @ disc.riesz(iu)))


def check_galerkin_orthogonality(seed=4):
    rng = np.random.default_rng(seed)
    tg = TimeGrid.uniform(10.0, 6, (0.5,))
    mesh = SpaceMesh.uniform(3.0, 8)
    g = SpaceTimeGrid(tg, tuple(mesh if i % 2 else refine_space(mesh, [2, 3]) for i in range(tg.M + 1)))
    worst = 0.0
    rtol = 1e-9
    cases = [(Linear(0.1, 0.0), "distributed", "static"), (Quasilinear(0.1, 0.1), "neumann", "dynamic"),
             (Linear(0.1, 0.2), "neumann", "exp_increasing")]
    for dyn, ctrl, ref in cases:
        x0 = InitialState(SpaceMesh.uniform(3.0, 4), np.array([0.0, 0.5, 0.8, 0.3, 0.0]))
        spec = ProblemSpec(dynamics=dyn, control=ctrl, reference=ref, x0=x0)
        sol = solve_ocp(g, spec)
        disc = sol.disc
        tol_primal = sol.info["tolerance"]
        for qoi in (Qoi.full(), Qoi.truncated(0.5)):
            chi = solve_secondary(g, spec, sol, qoi, rtol=rtol)
            tol_dual = rtol * max(chi.info["rhs_norm"], _qoi_derivative_norm(sol, qoi))
            for _ in range(3):
                states = [_random_traj(rng, g, spec.dirichlet) for _ in range(4)]
                ctrl_flat = rng.normal(size=sol.u.flat().size)
                wq = discrete_weight(ControlTrajectory.from_flat(g, ctrl, ctrl_flat))
                st_norms = [_weight_norm(disc, s) for s in states]
                u_norm = np.sqrt(disc.u_inner(ctrl_flat, ctrl_flat))
                ws = [discrete_weight(s) for s in states]
                primal = residuals_primal(sol, ws[0], wq, ws[1])
                dual = residuals_dual(sol, chi, qoi, ws[2], wq, ws[3])
                scaled = [abs(primal[0].total) / (tol_primal * st_norms[0]),
                          abs(primal[1].total) / (tol_primal * u_norm),
                          abs(primal[2].total) / (tol_primal * st_norms[1]),
                          abs(dual[0].total) / (tol_dual * st_norms[2]),
                          abs(dual[1].total) / (tol_dual * u_norm),
                          abs(dual[2].total) / (tol_dual * st_norms[3])]
                worst = max(worst, max(scaled))
    return _report(4, worst <= 10.0, f"largest residual / (tolerance x weight norm) = {worst:.2e} (limit 10)")


# ---------------------------------------------------------------- 5
def _q_norms(alpha, maxiter=20000):
    g = SpaceTimeGrid.uniform(TimeGrid.uniform(10.0, 100, (0.5,)), SpaceMesh.uniform(3.0, 24))
    spec = ProblemSpec(alpha=alpha)
    sol = solve_ocp(g, spec, maxiter=maxiter)
    chi = solve_secondary(g, spec, sol, Qoi.truncated(0.5), rtol=1e-13, maxiter=maxiter)
    disc = sol.disc
    qn = np.array([np.sqrt(max(q @ disc.ctrl[m].riesz().matvec(q), 0.0)) for m, q in enumerate(chi.q.values, 1)])
    return g.time.points[1:], qn


def check_decay():
    t0 = time.perf_counter()
    floor = 1e-11
    t, qn = _q_norms(1e-3)
    slope = fit_decay(t, qn, (1.0, 6.0), floor).slope
    head = qn[t <= 0.5].max()
    tail = max(qn[t >= 2.0].max(), floor)
    drop = np.log10(head / tail)
    slopes = {}
    for alpha in (1e-1, 1e-3, 1e-5):
        ta, qa = (t, qn) if alpha == 1e-3 else _q_norms(alpha)
        slopes[alpha] = abs(fit_decay(ta, qa, (0.6, 6.0), floor).slope)
    dt = time.perf_counter() - t0
    monotone = slopes[1e-1] <= slopes[1e-3] <= slopes[1e-5]
    ok = slope < 0 and drop >= 4 and monotone and dt < 120
    sw = ", ".join(f"{a:g}: {s:.2f}" for a, s in slopes.items())
    return _report(5, ok, f"slope {slope:.2f} on [1, 6], drop {drop:.1f} decades, |slope| by alpha {{{sw}}}, {dt:.0f}s")


# ---------------------------------------------------------------- 6
def check_localization():
    t0 = time.perf_counter()
    spec = ProblemSpec(dynamics=Linear(0.1, 0.4), alpha=1e-1)
    tg = TimeGrid.uniform(10.0, 10, (0.5,))
    mesh = uniform_refine(SpaceMesh.uniform(3.0, 12), 2)
    added = {}
    for name, qoi in (("truncated", Qoi.truncated(0.5)), ("full", Qoi.full())):
        res = adapt_loop(spec, qoi, AdaptConfig(mode="time", max_time_points=41, max_rounds=60),
                         SpaceTimeGrid.uniform(tg, mesh))
        added[name] = np.setdiff1d(res.grid.time.points, tg.points)
    trunc_ok = added["truncated"].size > 0 and added["truncated"].max() <= 2.0
    full_ok = np.any(added["full"] > 5.0)

    spec_s = ProblemSpec()
    g = SpaceTimeGrid.uniform(TimeGrid.uniform(10.0, 20, (0.5,)), SpaceMesh.uniform(3.0, 12))
    res = adapt_loop(spec_s, Qoi.truncated(0.5),
                     AdaptConfig(mode="space", max_space_dofs_total=2 * g.space_dofs, max_rounds=60), g)
    pts = res.grid.time.points
    late = [res.grid.meshes[m].same_as(g.meshes[m]) for m in range(1, len(pts)) if pts[m - 1] >= 2.0]
    frac = float(np.mean(late))
    refined = res.grid.space_dofs > g.space_dofs
    dt = time.perf_counter() - t0
    ok = trunc_ok and full_ok and frac >= 0.9 and refined
    return _report(6, ok, f"truncated max added point {added['truncated'].max():.3f}, "
                          f"full points beyond T/2: {int((added['full'] > 5.0).sum())}, "
                          f"unrefined slabs beyond t=2: {100 * frac:.0f}%, {dt:.0f}s")


# ---------------------------------------------------------------- 7
def _closed_loop(spec, make, budgets):
    return {b: (mpc_run(spec, make(b, "full")).closed_loop_cost,
                mpc_run(spec, make(b, "truncated")).closed_loop_cost) for b in budgets}


def check_closed_loop():
    t0 = time.perf_counter()

    def time_mode(tau):
        return lambda b, pol: MpcConfig(tau=tau, adapt=AdaptConfig(mode="time", max_time_points=b, max_rounds=60),
                                        refinement_qoi=pol, initial_time_intervals=1, initial_elements=6,
                                        initial_space_refs=3)

    unstable = _closed_loop(ProblemSpec(dynamics=Linear(0.1, 0.4), alpha=1e-1), time_mode(0.5), (11, 21, 41))
    boundary = _closed_loop(ProblemSpec(control="neumann", reference="dynamic", alpha=1e-3), time_mode(1.0),
                            (11, 21, 41))

    def space_mode(b, pol):
        return MpcConfig(tau=0.5, adapt=AdaptConfig(mode="space", max_space_dofs_total=b, max_rounds=60),
                         refinement_qoi=pol, initial_time_intervals=40, initial_elements=6, initial_space_refs=1,
                         sim_time_points_per_tau=0)

    growing = _closed_loop(ProblemSpec(reference="exp_increasing", alpha=1e-3), space_mode, (533, 820, 1230))

    def ordered(table):
        levels = sorted(table)
        return all(tr <= fu for fu, tr in table.values()) and table[levels[-1]][1] < table[levels[-1]][0]

    levels = sorted(growing)
    full = np.array([growing[b][0] for b in levels])
    trunc = np.array([growing[b][1] for b in levels])
    full_flat = (full[0] - full[1:].min()) / full[0] < 1e-3
    trunc_gain = trunc[-1] < trunc[0]
    dt = time.perf_counter() - t0
    ok = ordered(unstable) and ordered(boundary) and full_flat and trunc_gain and dt < 600

    def fmt(table):
        return " ".join(f"{b}:{fu:.4f}/{tr:.4f}" for b, (fu, tr) in sorted(table.items()))

    return _report(7, ok, f"full/truncated unstable [{fmt(unstable)}] boundary [{fmt(boundary)}] "
                          f"growing [{fmt(growing)}], {dt:.0f}s")


# ---------------------------------------------------------------- 8, 9
SMOOTH_T = 2.0


def _smooth_spec():
    fine = SpaceMesh.uniform(3.0, 3072)
    x0 = InitialState(fine, np.sin(np.pi * fine.nodes / 3.0) * (1.0 + fine.nodes))
    return ProblemSpec(T=SMOOTH_T, dynamics=Linear(0.1, 0.5), reference="zero", alpha=1e-1, x0=x0)


def _smooth_cost(spec, n_int, n_el, estimate_error=False):
    g = SpaceTimeGrid.uniform(TimeGrid.uniform(SMOOTH_T, n_int), SpaceMesh.uniform(3.0, n_el))
    sol = solve_ocp(g, spec)
    value = sol.disc.cost(sol.x, sol.u.flat())
    if not estimate_error:
        return value, None
    chi = solve_secondary(g, spec, sol, Qoi.full())
    return value, estimate(sol, chi, Qoi.full())


def check_effectivity():
    t0 = time.perf_counter()
    spec = _smooth_spec()
    ratios = []
    for n_int, n_el in ((8, 6), (16, 12), (32, 24)):
        value, ind = _smooth_cost(spec, n_int, n_el, True)
        ref, _ = _smooth_cost(spec, 4 * n_int, 4 * n_el)
        ratios.append(abs(ind.eta_k + ind.eta_h) / abs(ref - value))
    dt = time.perf_counter() - t0
    ok = all(0.2 <= r <= 5.0 for r in ratios)
    return _report(8, ok, "effectivity " + ", ".join(f"{r:.2f}" for r in ratios) + f", {dt:.1f}s")


def check_orders():
    t0 = time.perf_counter()
    spec = _smooth_spec()
    steps = np.array([16, 32, 64])
    ref, _ = _smooth_cost(spec, 512, 12)
    err_k = [abs(ref - _smooth_cost(spec, n, 12)[0]) for n in steps]
    order_k = np.polyfit(np.log(SMOOTH_T / steps), np.log(err_k), 1)[0]
    elems = np.array([6, 12, 24])
    ref, _ = _smooth_cost(spec, 8, 192)
    err_h = [abs(ref - _smooth_cost(spec, 8, n)[0]) for n in elems]
    order_h = np.polyfit(np.log(3.0 / elems), np.log(err_h), 1)[0]
    dt = time.perf_counter() - t0
    ok = abs(order_k - 1.0) <= 0.3 and abs(order_h - 2.0) <= 0.3
    return _report(9, ok, f"order in k {order_k:.2f}, order in h {order_h:.2f}, {dt:.1f}s")


CHECKS = {1: check_structural_identities, 2: check_derivatives, 3: check_dense_oracle,
          4: check_galerkin_orthogonality, 5: check_decay, 6: check_localization, 7: check_closed_loop,
          8: check_effectivity, 9: check_orders}


@pytest.mark.parametrize("n", sorted(CHECKS))
def test_criterion(n):
    ok, detail = CHECKS[n]()
    assert ok, detail


if __name__ == "__main__":
    chosen = [int(a) for a in sys.argv[1:]] or sorted(CHECKS)
    outcomes = [CHECKS[n]()[0] for n in chosen]
    sys.exit(0 if all(outcomes) else 1)

"""Dual-weighted residual estimation: weights, the six residual forms, indicators.

Test functions on slab m are linear in time, given by their right limit at
t_{m-1} (``plus``) and left limit at t_m (``minus``); data are frozen at t_m on
each slab, so the slab integral of a term tested with such a function equals
k_m times the term tested with the mean (plus + minus)/2. Spatial integrals run
over 3-point Gauss rules on the common refinement of meshes m-1 and m, which is
exact for every integrand that occurs (piecewise polynomials of degree <= 5).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .fem import ControlKind, gauss_points
from .grid import SpaceMesh, common_refinement
from .model import Linear, Qoi, nodal_source, window_mask
from .solver import Discretization, HessianMode, KktSolution, SecondarySolution
from .trajectory import ControlTrajectory, DgTrajectory


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpaceFunction:
    """Sum of scaled P1 functions and element bubbles 4 s (1 - s) on given meshes."""

    parts: tuple = ()

    @classmethod
    def p1(cls, mesh: SpaceMesh, coeffs: np.ndarray, scale: float = 1.0) -> "SpaceFunction":
        return cls((("p1", mesh, np.asarray(coeffs, dtype=float), scale),))

    @classmethod
    def bubble(cls, mesh: SpaceMesh, coeffs: np.ndarray) -> "SpaceFunction":
        return cls((("bubble", mesh, np.asarray(coeffs, dtype=float), 1.0),))

    def __add__(self, other: "SpaceFunction") -> "SpaceFunction":
        return SpaceFunction(self.parts + other.parts)

    def __sub__(self, other: "SpaceFunction") -> "SpaceFunction":
        return self + other * -1.0

    def __mul__(self, s: float) -> "SpaceFunction":
        return SpaceFunction(tuple((k, m, c, sc * s) for k, m, c, sc in self.parts))

    __rmul__ = __mul__

    def sample(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and derivatives at points strictly inside elements of every mesh involved."""
        val = np.zeros(pts.shape)
        der = np.zeros(pts.shape)
        for kind, mesh, c, sc in self.parts:
            nodes = mesh.nodes
            e = np.clip(np.searchsorted(nodes, pts, side="right") - 1, 0, mesh.n_elements - 1)
            h = nodes[e + 1] - nodes[e]
            s = (pts - nodes[e]) / h
            if kind == "p1":
                val += sc * (c[e] * (1.0 - s) + c[e + 1] * s)
                der += sc * (c[e + 1] - c[e]) / h
            else:
                val += sc * c[e] * 4.0 * s * (1.0 - s)
                der += sc * c[e] * 4.0 * (1.0 - 2.0 * s) / h
        return val, der

    def endpoints(self) -> np.ndarray:
        out = np.zeros(2)
        for kind, _, c, sc in self.parts:
            if kind == "p1":
                out += sc * np.array([c[0], c[-1]])
        return out


ZERO = SpaceFunction()


@dataclass(frozen=True, eq=False)
class Weight:
    """Test function over the whole grid.

    ``plus[m]``/``minus[m]`` for m = 1..M (index 0 unused) are SpaceFunctions for
    states and distributed controls, or length-2 arrays for boundary controls;
    ``initial`` is the test value at t_0 (states only). ``None`` means zero.
    """

    plus: tuple
    minus: tuple
    initial: SpaceFunction | None = None

    def mean(self, m: int):
        p, q = self.plus[m], self.minus[m]
        if p is None and q is None:
            return None
        if p is None:
            return q * 0.5
        if q is None:
            return p * 0.5
        return (p + q) * 0.5

    def scaled(self, s: float) -> "Weight":
        f = lambda w: None if w is None else w * s  # noqa: E731
        return Weight(tuple(f(w) for w in self.plus), tuple(f(w) for w in self.minus), f(self.initial))


def _p1_slabs(traj: DgTrajectory) -> list[SpaceFunction]:
    return [SpaceFunction.p1(mesh, v) for mesh, v in zip(traj.grid.meshes, traj.values)]


def _control_slab(u: ControlTrajectory, m: int):
    """Slab m control as a test object (SpaceFunction or pair); m is 1-based."""
    v = u.values[m - 1]
    if u.kind is ControlKind.DISTRIBUTED:
        return SpaceFunction.p1(u.grid.meshes[m], v)
    return v.copy()


def reconstruct_time(traj: DgTrajectory | ControlTrajectory) -> Weight:
    """Piecewise linear interpolation through the slab values minus the dG(0) function.

    On slab m the weight is linear, equal to y_{m-1} - y_m at t_{m-1} and zero at t_m.
    Controls have no value at t_0; on the first slab the line through the first two
    slab values is extrapolated.
    """
    M = traj.grid.M
    if M < 2:
        raise EstimatorError("time reconstruction needs at least two slabs")
    plus = [None] * (M + 1)
    minus = [None] * (M + 1)
    if isinstance(traj, DgTrajectory):
        f = _p1_slabs(traj)
        for m in range(1, M + 1):
            plus[m] = f[m - 1] - f[m]
        return Weight(tuple(plus), tuple(minus), None)
    k = traj.grid.time.k
    for m in range(2, M + 1):
        plus[m] = _control_slab(traj, m - 1) - _control_slab(traj, m)
    u1, u2 = traj.values[0], traj.values[1]
    if traj.kind is ControlKind.DISTRIBUTED:
        meshes = traj.grid.meshes
        u2 = np.interp(meshes[1].nodes, meshes[2].nodes, u2)
        plus[1] = SpaceFunction.p1(meshes[1], u2 - u1, -k[0] / k[1])
    else:
        plus[1] = -(u2 - u1) * k[0] / k[1]
    return Weight(tuple(plus), tuple(minus), None)


def reconstruct_space(values: np.ndarray, mesh: SpaceMesh) -> np.ndarray:
    """Bubble coefficients (patch quadratic minus linear at element midpoints)."""
    if mesh.n_elements < 2:
        raise EstimatorError("space reconstruction needs at least two elements")
    y = np.asarray(values, dtype=float)
    h = mesh.h
    slopes = np.diff(y) / h
    # second divided difference of the patch centered at each interior node
    dd = np.diff(slopes) / (h[:-1] + h[1:])
    left = -dd * h[:-1] ** 2 / 4.0  # element i of patch i+1 (left half)
    right = -dd * h[1:] ** 2 / 4.0  # element i+1 of patch i+1 (right half)
    acc = np.zeros(mesh.n_elements)
    cnt = np.zeros(mesh.n_elements)
    acc[:-1] += left
    cnt[:-1] += 1
    acc[1:] += right
    cnt[1:] += 1
    return acc / cnt


def space_weight(traj: DgTrajectory | ControlTrajectory) -> Weight:
    """Constant-in-time hierarchical enrichment of each slab value."""
    grid = traj.grid
    M = grid.M
    slabs = [None] * (M + 1)
    initial = None
    if isinstance(traj, DgTrajectory):
        for m in range(M + 1):
            mesh = grid.meshes[m]
            f = SpaceFunction.bubble(mesh, reconstruct_space(traj.values[m], mesh))
            if m == 0:
                initial = f
            else:
                slabs[m] = f
    elif traj.kind is ControlKind.DISTRIBUTED:
        for m in range(1, M + 1):
            mesh = grid.meshes[m]
            slabs[m] = SpaceFunction.bubble(mesh, reconstruct_space(traj.values[m - 1], mesh))
    return Weight(tuple(slabs), tuple(slabs), initial)


def discrete_weight(traj: DgTrajectory | ControlTrajectory) -> Weight:
    """A member of the discrete test space as a Weight (plus = minus = slab value)."""
    M = traj.grid.M
    if isinstance(traj, DgTrajectory):
        f = _p1_slabs(traj)
        return Weight(tuple([None] + f[1:]), tuple([None] + f[1:]), f[0])
    slabs = [None] + [_control_slab(traj, m) for m in range(1, M + 1)]
    return Weight(tuple(slabs), tuple(slabs), None)


# ------------------------------------------------------------------ quadrature
class _Quad:
    """Gauss rule on the common refinement of two meshes, localized to ``owner`` elements."""

    def __init__(self, a: SpaceMesh, b: SpaceMesh, owner: SpaceMesh):
        e = common_refinement(a, b)
        self.pts, self.wts = gauss_points(e)
        self.parent = np.searchsorted(owner.nodes, e.midpoints, side="right") - 1
        self.n_owner = owner.n_elements
        self._cache: dict[int, tuple] = {}

    def s(self, f):
        if f is None:
            z = np.zeros(self.pts.shape)
            return z, z
        key = id(f)
        if key not in self._cache:
            self._cache[key] = (f, f.sample(self.pts))
        return self._cache[key][1]

    def localize(self, integrand: np.ndarray) -> np.ndarray:
        per = (integrand * self.wts).sum(axis=1)
        return np.bincount(self.parent, weights=per, minlength=self.n_owner)


@dataclass
class FormValue:
    """One residual form evaluated and localized.

    ``time[m-1]`` collects slab m (initial terms go to slab 1); ``space[m]`` the
    elements of mesh m (index 0: initial mesh).
    """

    time: np.ndarray
    space: list

    @property
    def total(self) -> float:
        return float(self.time.sum())

    @property
    def space_total(self) -> float:
        return float(sum(s.sum() for s in self.space))

    def __add__(self, other: "FormValue") -> "FormValue":
        return FormValue(self.time + other.time, [a + b for a, b in zip(self.space, other.space)])

    def __mul__(self, s: float) -> "FormValue":
        return FormValue(self.time * s, [a * s for a in self.space])

    __rmul__ = __mul__


class _Acc:
    def __init__(self, grid):
        self.time = np.zeros(grid.M)
        self.space = [np.zeros(m.n_elements) for m in grid.meshes]

    def add(self, m: int, loc: np.ndarray) -> None:
        self.space[m] += loc
        self.time[max(m, 1) - 1] += loc.sum()

    def add_point(self, m: int, side: int, value: float) -> None:
        self.space[m][0 if side == 0 else -1] += value
        self.time[max(m, 1) - 1] += value

    def result(self) -> FormValue:
        return FormValue(self.time, self.space)


class _Context:
    """Sampled discrete data shared by all forms on one grid."""

    def __init__(self, base: KktSolution, mode: HessianMode = HessianMode.EXACT):
        if base.disc is None:
            raise EstimatorError("solution carries no discretization; use solve_ocp output")
        disc = base.disc
        self.disc: Discretization = disc
        self.base = base
        self.spec = disc.spec
        self.grid = disc.grid
        self.mode = HessianMode(mode)
        g = self.grid
        self.quads = [None] + [_Quad(g.meshes[m - 1], g.meshes[m], g.meshes[m]) for m in range(1, g.M + 1)]
        x0 = self.spec.x0
        self.quad0 = _Quad(g.meshes[0], x0.mesh if x0 is not None else g.meshes[0], g.meshes[0])
        self.fn = {}
        for name, tr in (("x", base.x), ("lam", base.lam)):
            self.fn[name] = _p1_slabs(tr)
        self.fn["xd"] = [None] + [SpaceFunction.p1(g.meshes[m], disc.xd[m]) for m in range(1, g.M + 1)]
        self.fn["f"] = [None] + [
            None if self.spec.f is None else SpaceFunction.p1(g.meshes[m], nodal_source(self.spec, disc.pts[m], g.meshes[m]))
            for m in range(1, g.M + 1)
        ]
        self.neumann = self.spec.control is ControlKind.NEUMANN

    def add_traj(self, name: str, traj: DgTrajectory) -> None:
        self.fn[name] = _p1_slabs(traj)

    # pointwise kernels on sampled (value, derivative) pairs
    def a_form(self, X, P):
        dyn = self.spec.dynamics
        if isinstance(dyn, Linear):
            return dyn.nu * X[1] * P[1] - dyn.s * X[0] * P[0]
        return (dyn.c * X[0] ** 2 + dyn.d) * X[1] * P[1]

    def a_lin(self, X, Phi, Lam):
        dyn = self.spec.dynamics
        if isinstance(dyn, Linear):
            return dyn.nu * Phi[1] * Lam[1] - dyn.s * Phi[0] * Lam[0]
        kappa = dyn.c * X[0] ** 2 + dyn.d
        return (kappa * Phi[1] + 2.0 * dyn.c * X[0] * X[1] * Phi[0]) * Lam[1]

    def a_second(self, X, V, Phi, Lam):
        dyn = self.spec.dynamics
        if isinstance(dyn, Linear) or self.mode is HessianMode.GAUSS_NEWTON:
            return 0.0
        c = dyn.c
        return 2.0 * c * (Phi[0] * V[0] * X[1] + X[0] * V[0] * Phi[1] + X[0] * Phi[0] * V[1]) * Lam[1]


def _check_weight(w: Weight, grid) -> None:
    if len(w.plus) != grid.M + 1 or len(w.minus) != grid.M + 1:
        raise EstimatorError("weight does not match the grid")


def _state_adjoint_form(ctx: _Context, phi: Weight, adj: str, extra=None) -> FormValue:
    """sum_m [k <a'(x_m) phi_bar, adj_m> + <phi_m^- - phi_{m-1}^-, adj_m>] + <phi_0, adj_0> + extra terms.

    ``extra(m, q, Pbar)`` returns an additional integrand multiplying k_m.
    """
    _check_weight(phi, ctx.grid)
    acc = _Acc(ctx.grid)
    A = ctx.fn[adj]
    x = ctx.fn["x"]
    for m in range(1, ctx.grid.M + 1):
        q = ctx.quads[m]
        k = ctx.disc.k[m]
        pbar = phi.mean(m)
        Pbar = q.s(pbar)
        Lm = q.s(A[m])
        integrand = 0.0
        if pbar is not None:
            integrand = k * ctx.a_lin(q.s(x[m]), Pbar, Lm)
            if extra is not None:
                integrand = integrand + k * extra(m, q, Pbar)
        prev = phi.initial if m == 1 else phi.minus[m - 1]
        integrand = integrand + (q.s(phi.minus[m])[0] - q.s(prev)[0]) * Lm[0]
        acc.add(m, q.localize(np.broadcast_to(integrand, q.pts.shape)))
    if phi.initial is not None:
        q = ctx.quad0
        acc.add(0, q.localize(q.s(phi.initial)[0] * q.s(A[0])[0]))
    return acc.result()


def _control_form(ctx: _Context, psi: Weight, ctrl: ControlTrajectory, adj: str,
                  extra: ControlTrajectory | None = None, mask=None) -> FormValue:
    """sum_m k [alpha <ctrl_m, psi_bar>_U - <B psi_bar, adj_m>] + sum_{window} k alpha <extra_m, psi_bar>_U."""
    _check_weight(psi, ctx.grid)
    acc = _Acc(ctx.grid)
    alpha = ctx.spec.alpha
    A = ctx.fn[adj]
    for m in range(1, ctx.grid.M + 1):
        pbar = psi.mean(m)
        if pbar is None:
            continue
        k = ctx.disc.k[m]
        coef = alpha * ctrl.values[m - 1]
        if extra is not None and mask[m - 1]:
            coef = coef + alpha * extra.values[m - 1]
        if ctx.neumann:
            lam_ends = A[m].endpoints()
            vals = k * (coef * pbar - pbar * lam_ends)
            acc.add_point(m, 0, vals[0])
            acc.add_point(m, 1, vals[1])
        else:
            q = ctx.quads[m]
            P = q.s(pbar)
            C = q.s(SpaceFunction.p1(ctx.grid.meshes[m], coef))
            acc.add(m, q.localize(k * (C[0] * P[0] - P[0] * q.s(A[m])[0])))
    return acc.result()


def _state_form(ctx: _Context, phi: Weight, y: str, lin_x: bool, ctrl: ControlTrajectory,
                with_source: bool, init_residual: bool) -> FormValue:
    """sum_m [<y_m - y_{m-1}, phi_m^+> + k <a(y_m) or a'(x_m) y_m - B ctrl_m - f, phi_bar>] + initial term."""
    _check_weight(phi, ctx.grid)
    acc = _Acc(ctx.grid)
    Y = ctx.fn[y]
    x = ctx.fn["x"]
    for m in range(1, ctx.grid.M + 1):
        q = ctx.quads[m]
        k = ctx.disc.k[m]
        pbar = phi.mean(m)
        integrand = np.zeros(q.pts.shape)
        if phi.plus[m] is not None:
            integrand = integrand + (q.s(Y[m])[0] - q.s(Y[m - 1])[0]) * q.s(phi.plus[m])[0]
        if pbar is not None:
            P = q.s(pbar)
            Ym = q.s(Y[m])
            term = ctx.a_lin(q.s(x[m]), Ym, P) if lin_x else ctx.a_form(Ym, P)
            if with_source and ctx.fn["f"][m] is not None:
                term = term - q.s(ctx.fn["f"][m])[0] * P[0]
            if ctx.neumann:
                ends = k * ctrl.values[m - 1] * pbar.endpoints()
                acc.add_point(m, 0, -ends[0])
                acc.add_point(m, 1, -ends[1])
            else:
                C = q.s(SpaceFunction.p1(ctx.grid.meshes[m], ctrl.values[m - 1]))
                term = term - C[0] * P[0]
            integrand = integrand + k * term
        acc.add(m, q.localize(integrand))
    if phi.initial is not None:
        q = ctx.quad0
        P = q.s(phi.initial)
        val = q.s(Y[0])[0]
        if init_residual and ctx.spec.x0 is not None:
            val = val - q.s(SpaceFunction.p1(ctx.spec.x0.mesh, ctx.spec.x0.values))[0]
        acc.add(0, q.localize(val * P[0]))
    return acc.result()


def _tracking(ctx: _Context, m: int, q: _Quad, Pbar):
    return (q.s(ctx.fn["x"][m])[0] - q.s(ctx.fn["xd"][m])[0]) * Pbar[0]


def residuals_primal(base: KktSolution, w_v: Weight, w_q: Weight, w_z: Weight,
                     ctx: _Context | None = None) -> tuple[FormValue, FormValue, FormValue]:
    """(rho^lam(w_v), rho^u(w_q), rho^x(w_z)): first-order optimality residuals."""
    ctx = ctx or _Context(base)
    r_lam = _state_adjoint_form(ctx, w_v, "lam", extra=lambda m, q, P: _tracking(ctx, m, q, P))
    r_u = _control_form(ctx, w_q, base.u, "lam")
    r_x = _state_form(ctx, w_z, "x", False, base.u, True, True)
    return r_lam, r_u, r_x


def residuals_dual(base: KktSolution, chi: SecondarySolution, qoi: Qoi, w_x: Weight, w_u: Weight, w_lam: Weight,
                   mode: HessianMode | str = HessianMode.EXACT,
                   ctx: _Context | None = None) -> tuple[FormValue, FormValue, FormValue]:
    """(rho^z(w_x), rho^q(w_u), rho^v(w_lam)): residuals of the secondary system including I'."""
    if ctx is None:
        ctx = _Context(base, mode)
    if chi.v.grid is not base.x.grid and chi.v.grid.to_json() != base.x.grid.to_json():
        raise EstimatorError("secondary solution lives on a different grid")
    ctx.add_traj("v", chi.v)
    ctx.add_traj("z", chi.z)
    mask = window_mask(ctx.disc.pts, qoi)
    x = ctx.fn["x"]

    def extra_z(m, q, P):
        V = q.s(ctx.fn["v"][m])
        val = V[0] * P[0] + ctx.a_second(q.s(x[m]), V, P, q.s(ctx.fn["lam"][m]))
        if mask[m - 1]:
            val = val + _tracking(ctx, m, q, P)
        return val

    r_z = _state_adjoint_form(ctx, w_x, "z", extra=extra_z)
    r_q = _control_form(ctx, w_u, chi.q, "z", extra=base.u, mask=mask)
    r_v = _state_form(ctx, w_lam, "v", True, chi.q, False, False)
    return r_z, r_q, r_v


@dataclass
class Indicators:
    """Signed DWR indicators; time[m-1] for slab m, space[m][e] for element e of mesh m."""

    time: np.ndarray
    space: list
    forms: dict = field(default_factory=dict, repr=False)

    @property
    def eta_k(self) -> float:
        return float(self.time.sum())

    @property
    def eta_h(self) -> float:
        return float(sum(s.sum() for s in self.space))

    def space_per_slab(self) -> np.ndarray:
        return np.array([s.sum() for s in self.space])


def estimate(base: KktSolution, chi: SecondarySolution, qoi: Qoi,
             mode: HessianMode | str = HessianMode.EXACT) -> Indicators:
    """Time and space estimators, each one half of the sum of the six weighted residuals."""
    ctx = _Context(base, mode)
    forms = {}
    for label, recon in (("time", reconstruct_time), ("space", space_weight)):
        wv, wq, wz = recon(chi.v), recon(chi.q), recon(chi.z)
        wx, wu, wl = recon(base.x), recon(base.u), recon(base.lam)
        primal = residuals_primal(base, wv, wq, wz, ctx)
        dual = residuals_dual(base, chi, qoi, wx, wu, wl, mode, ctx)
        forms[label] = dict(zip(("lam", "u", "x", "z", "q", "v"), primal + dual))
    tot_t = sum(forms["time"].values(), FormValue(np.zeros(base.x.grid.M), [np.zeros(m.n_elements) for m in base.x.grid.meshes]))
    tot_h = sum(forms["space"].values(), FormValue(np.zeros(base.x.grid.M), [np.zeros(m.n_elements) for m in base.x.grid.meshes]))
    return Indicators(0.5 * tot_t.time, [0.5 * s for s in tot_h.space], forms)


def write_indicators_csv(path, ind: Indicators, grid) -> None:
    """Long format: one row per (slab, element); slab 0 rows hold the initial mesh."""
    pts = grid.time.points
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "t_m", "eta_k_m", "element_index", "element_midpoint", "eta_h_m_e"])
        for m, mesh in enumerate(grid.meshes):
            etak = 0.0 if m == 0 else ind.time[m - 1]
            for e, (mid, val) in enumerate(zip(mesh.midpoints, ind.space[m])):
                w.writerow([m, _fmt(pts[m]), _fmt(etak), e, _fmt(mid), _fmt(val)])


def _fmt(v: float) -> str:
    return format(float(v), ".17g")

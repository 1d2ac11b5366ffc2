"""Forward, adjoint and linearized solves; reduced gradient/Hessian; Newton-CG.

Sign convention: the dynamics are written as ``x' + a(x) = B u + f`` with the
positive elliptic part ``a`` (``a(x) = nu K x - s M x`` or the quasilinear
diffusion). The Lagrangian adds ``<x' + a(x) - B u - f, lam>`` so the gradient
reads ``alpha R u - B^* lam``.

Per slab the state equation is

    M_m x_m + k_m a_m(x_m) = C_m x_{m-1} + k_m (B u_m + f_m),

where ``C_m`` is the exact cross-mesh mass matrix (L2 coupling through the
common refinement of meshes m-1 and m). The adjoint runs backward with
``(M_m + k_m a'(x_m)^T) lam_m = C_{m+1}^T lam_{m+1} - k_m M_m (x_m - x_d(t_m))``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    ControlKind,
    TriFactor,
    TriMatrix,
    assemble_control,
    assemble_mass,
    assemble_quasilinear_hessian,
    assemble_quasilinear_jacobian,
    assemble_quasilinear_residual,
    assemble_stiffness,
    cross_mass,
)
from .grid import SpaceTimeGrid
from .model import Linear, ProblemSpec, Qoi, initial_on, nodal_reference, nodal_source, window_mask
from .trajectory import ControlTrajectory, DgTrajectory

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-11
NEWTON_MAXIT = 25
LINEAR_CG_RTOL = 1e-9
LINEAR_CG_MAXIT = 500
OUTER_TOL = 1e-8
OUTER_MAXIT = 50
ARMIJO_SIGMA = 1e-4
ARMIJO_MAX_HALVINGS = 30


class SolverError(RuntimeError):
    pass


class NewtonError(SolverError):
    def __init__(self, slab: int, history: list[float]):
        super().__init__(f"Newton failed on slab {slab}; residual history {history}")
        self.slab = slab
        self.history = history


class HessianMode(str, Enum):
    EXACT = "exact"
    GAUSS_NEWTON = "gauss_newton"


class Discretization:
    """Per-slab matrices and data of one problem on one space-time grid."""

    def __init__(self, grid: SpaceTimeGrid, spec: ProblemSpec):
        if abs(grid.time.T - spec.T) > 1e-12 * spec.T or abs(grid.L - spec.L) > 1e-12 * spec.L:
            raise ValueError("grid does not match the problem's horizon/domain")
        self.grid = grid
        self.spec = spec
        self.pts = grid.time.points
        self.k = np.concatenate([[0.0], grid.time.k])  # k[m] for slab m
        self.M = grid.M
        self.free = slice(1, -1) if spec.dirichlet else slice(None)
        meshes = grid.meshes

        cache: dict[int, tuple] = {}
        self.mass: list[TriMatrix] = []
        self.elliptic: list[TriMatrix | None] = []
        self.ctrl = []
        for mesh in meshes:
            key = id(mesh)
            if key not in cache:
                mass = assemble_mass(mesh)
                ell = None
                if isinstance(spec.dynamics, Linear):
                    ell = assemble_stiffness(mesh, spec.dynamics.nu) - mass * spec.dynamics.s
                cache[key] = (mass, ell, assemble_control(mesh, spec.control))
            mass, ell, ctrl = cache[key]
            self.mass.append(mass)
            self.elliptic.append(ell)
            self.ctrl.append(ctrl)

        self.cross: list = [None]
        for m in range(1, self.M + 1):
            same = meshes[m].same_as(meshes[m - 1])
            self.cross.append(None if same else cross_mass(meshes[m], meshes[m - 1]))

        self.xd = [None] + [nodal_reference(spec, self.pts[m], meshes[m]) for m in range(1, self.M + 1)]
        self.load_f = [None]
        for m in range(1, self.M + 1):
            fm = nodal_source(spec, self.pts[m], meshes[m])
            self.load_f.append(None if fm is None else self.mass[m].matvec(fm))

        self._mass0_factor = TriFactor(self.mass[0].restrict(self.free))
        load0, _ = initial_on(spec, meshes[0])
        self.x_init = self._solve_free(self._mass0_factor, load0, meshes[0].n_nodes)

        # free-node layout of slabs 1..M in global (flat) vectors
        fr = self.free
        sizes = [len(range(meshes[m].n_nodes)[fr]) for m in range(1, self.M + 1)]
        self.free_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.mass_global = sp.block_diag(
            [(self.mass[m] * self.k[m]).restrict(fr).tosparse() for m in range(1, self.M + 1)], format="csr")
        n = int(self.free_offsets[-1])
        rows, cols, vals = [], [], []
        for m in range(2, self.M + 1):
            c = self.cross[m] if self.cross[m] is not None else self.mass[m].tosparse()
            c = sp.coo_matrix(sp.csr_matrix(c)[fr, :][:, fr])
            rows.append(c.row + self.free_offsets[m - 1])
            cols.append(c.col + self.free_offsets[m - 2])
            vals.append(c.data)
        if rows:
            self.coupling_global = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        else:
            self.coupling_global = sp.csr_matrix((n, n))
        self._linear_lin = None

        # control space layout: flat vectors, Riesz matrix W = blockdiag(k_m R_m)
        self.ctrl_sizes = np.array([self.ctrl[m].size for m in range(1, self.M + 1)])
        self.ctrl_offsets = np.concatenate([[0], np.cumsum(self.ctrl_sizes)])
        blocks = [self.ctrl[m].riesz().tosparse() * self.k[m] for m in range(1, self.M + 1)]
        self.W = sp.block_diag(blocks, format="csc")
        self._W_lu = spla.splu(self.W)
        bblocks = []
        for m in range(1, self.M + 1):
            ctrl = self.ctrl[m]
            if ctrl.kind is ControlKind.DISTRIBUTED:
                b = ctrl.mass.tosparse()
            else:
                b = sp.csr_matrix((np.ones(2), ([0, meshes[m].n_nodes - 1], [0, 1])), shape=(meshes[m].n_nodes, 2))
            bblocks.append(sp.csr_matrix(b)[fr, :] * self.k[m])
        self.B_global = sp.block_diag(bblocks, format="csr")

    # ------------------------------------------------------------------ helpers
    def _solve_free(self, factor: TriFactor, rhs: np.ndarray, n: int, transpose: bool = False) -> np.ndarray:
        out = np.zeros(n)
        out[self.free] = factor.solve(rhs[self.free], transpose=transpose)
        return out

    def couple(self, m: int, prev: np.ndarray) -> np.ndarray:
        """C_m prev: mesh m-1 function tested against mesh m hats."""
        if self.cross[m] is None:
            return self.mass[m].matvec(prev)
        return self.cross[m] @ prev

    def couple_T(self, m: int, nxt: np.ndarray) -> np.ndarray:
        """C_m^T nxt: mesh m function tested against mesh m-1 hats."""
        if self.cross[m] is None:
            return self.mass[m].rmatvec(nxt)
        return self.cross[m].T @ nxt

    def a_apply(self, m: int, x: np.ndarray) -> np.ndarray:
        if self.elliptic[m] is not None:
            return self.elliptic[m].matvec(x)
        dyn = self.spec.dynamics
        return assemble_quasilinear_residual(self.grid.meshes[m], x, dyn.c, dyn.d)

    def a_jacobian(self, m: int, x: np.ndarray) -> TriMatrix:
        if self.elliptic[m] is not None:
            return self.elliptic[m]
        dyn = self.spec.dynamics
        return assemble_quasilinear_jacobian(self.grid.meshes[m], x, dyn.c, dyn.d)

    def a_hessian(self, m: int, x: np.ndarray, lam: np.ndarray) -> TriMatrix | None:
        if self.elliptic[m] is not None:
            return None
        return assemble_quasilinear_hessian(self.grid.meshes[m], x, lam, self.spec.dynamics.c)

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        o = self.ctrl_offsets
        return [flat[o[m - 1]:o[m]] for m in range(1, self.M + 1)]

    def riesz(self, dual: np.ndarray) -> np.ndarray:
        return self._W_lu.solve(dual)

    def u_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(a @ (self.W @ b))

    def control(self, flat: np.ndarray) -> ControlTrajectory:
        return ControlTrajectory(self.grid, tuple(p.copy() for p in self.split(flat)), self.spec.control)

    def tracking_residual(self, m: int, x: np.ndarray) -> np.ndarray:
        """M_m (x_m - x_d(t_m))."""
        return self.mass[m].matvec(x - self.xd[m])

    def loads_to_flat(self, loads: list) -> np.ndarray:
        out = np.zeros(int(self.free_offsets[-1]))
        o = self.free_offsets
        for m in range(1, self.M + 1):
            if loads[m] is not None:
                out[o[m - 1]:o[m]] = loads[m][self.free]
        return out

    def traj_from_flat(self, flat: np.ndarray, initial: np.ndarray | None) -> DgTrajectory:
        """Slab values from a flat free-node vector; ``initial=None`` builds the dual initial value."""
        o = self.free_offsets
        meshes = self.grid.meshes
        vals = [None]
        for m in range(1, self.M + 1):
            v = np.zeros(meshes[m].n_nodes)
            v[self.free] = flat[o[m - 1]:o[m]]
            vals.append(v)
        if initial is None:
            initial = self._solve_free(self._mass0_factor, self.couple_T(1, vals[1]), meshes[0].n_nodes)
        vals[0] = initial
        return DgTrajectory(self.grid, tuple(vals))

    # ------------------------------------------------------------------ solves
    def solve_forward(self, u_flat: np.ndarray, guess: DgTrajectory | None = None) -> DgTrajectory:
        if self.spec.is_linear:
            loads = [None] + [None if f is None else self.k[m] * f for m, f in enumerate(self.load_f[1:], start=1)]
            lin = self.linearize(None)
            rhs = self.loads_to_flat(loads) + self.B_global @ u_flat
            rhs[:self.free_offsets[1]] += self.couple(1, self.x_init)[self.free]
            return self.traj_from_flat(lin.forward_flat(rhs), self.x_init)
        us = self.split(u_flat)
        meshes = self.grid.meshes
        xs = [self.x_init]
        for m in range(1, self.M + 1):
            rhs = self.couple(m, xs[-1]) + self.k[m] * self.ctrl[m].apply(us[m - 1])
            if self.load_f[m] is not None:
                rhs = rhs + self.k[m] * self.load_f[m]
            start = guess.values[m] if guess is not None else self._initial_guess(m, xs[-1])
            xs.append(self._newton_slab(m, rhs, start))
        return DgTrajectory(self.grid, tuple(xs))

    def _initial_guess(self, m: int, prev: np.ndarray) -> np.ndarray:
        meshes = self.grid.meshes
        if meshes[m].same_as(meshes[m - 1]):
            return prev.copy()
        return np.interp(meshes[m].nodes, meshes[m - 1].nodes, prev)

    def _newton_slab(self, m: int, rhs: np.ndarray, x: np.ndarray) -> np.ndarray:
        fr, k, mass = self.free, self.k[m], self.mass[m]

        def residual(y):
            return (mass.matvec(y) + k * self.a_apply(m, y) - rhs)[fr]

        x = x.copy()
        if self.spec.dirichlet:
            x[0] = x[-1] = 0.0
        r = residual(x)
        rn = float(np.linalg.norm(r))
        history = [rn]
        converged_at = None
        for it in range(NEWTON_MAXIT + 1):
            # one extra full step past the tolerance removes the iteration error
            # from derivative computations (quadratic convergence makes it free)
            if rn <= NEWTON_TOL and converged_at is None:
                converged_at = it
            if converged_at is not None and it > converged_at:
                return x
            if it == NEWTON_MAXIT:
                break
            jac = (mass + self.a_jacobian(m, x) * k).restrict(fr)
            dx = np.zeros_like(x)
            dx[fr] = TriFactor(jac).solve(-r)
            step = 1.0
            for _ in range(30):
                trial = x + step * dx
                rt = residual(trial)
                rtn = float(np.linalg.norm(rt))
                if rtn < rn or rtn <= NEWTON_TOL:
                    break
                step *= 0.5
            if converged_at is not None and rtn > rn:
                return x
            x, r, rn = trial, rt, rtn
            history.append(rn)
        if rn <= NEWTON_TOL:
            return x
        raise NewtonError(m, history)

    def cost(self, x: DgTrajectory, u_flat: np.ndarray, mask: np.ndarray | None = None) -> float:
        us = self.split(u_flat)
        total = 0.0
        for m in range(1, self.M + 1):
            if mask is not None and not mask[m - 1]:
                continue
            e = x.values[m] - self.xd[m]
            ru = self.ctrl[m].riesz().matvec(us[m - 1])
            total += 0.5 * self.k[m] * (e @ self.mass[m].matvec(e) + self.spec.alpha * (us[m - 1] @ ru))
        return float(total)

    def tracking_load(self, x: DgTrajectory, mask: np.ndarray | None = None) -> list:
        """Dual loads -k_m M_m (x_m - x_d) on window slabs (index m), zero elsewhere."""
        loads = [None]
        for m in range(1, self.M + 1):
            if mask is not None and not mask[m - 1]:
                loads.append(None)
            else:
                loads.append(-self.k[m] * self.tracking_residual(m, x.values[m]))
        return loads

    def linearize(self, x: DgTrajectory, lam: DgTrajectory | None = None,
                  mode: HessianMode = HessianMode.EXACT) -> "Linearization":
        if self.spec.is_linear:
            if self._linear_lin is None:
                self._linear_lin = Linearization(self, None, None, HessianMode.GAUSS_NEWTON)
            return self._linear_lin
        return Linearization(self, x, lam, HessianMode(mode))

    def gradient_dual(self, u_flat: np.ndarray, lam: DgTrajectory) -> np.ndarray:
        lam_flat = self.loads_to_flat(lam.values)
        return self.spec.alpha * (self.W @ u_flat) - self.B_global.T @ lam_flat


class Linearization:
    """Frozen linearization a'(x_m) per slab.

    The linearized state operator of all slabs is assembled as one block lower
    bidiagonal sparse matrix (diagonal blocks M_m + k_m a'(x_m), subdiagonal
    blocks -C_m, free nodes only) and factorized once; a forward sweep is one
    solve with it and a backward sweep one solve with its transpose.
    """

    def __init__(self, disc: Discretization, x: DgTrajectory | None, lam: DgTrajectory | None, mode: HessianMode):
        self.disc = disc
        self.x = x
        self.lam = lam
        self.mode = mode
        M, fr = disc.M, disc.free
        if disc.spec.is_linear:
            self.jac = [None] + [disc.elliptic[m] for m in range(1, M + 1)]
        else:
            self.jac = [None] + [disc.a_jacobian(m, x.values[m]) for m in range(1, M + 1)]
        self.hess = [None] * (M + 1)
        if lam is not None and mode is HessianMode.EXACT and not disc.spec.is_linear:
            self.hess = [None] + [disc.a_hessian(m, x.values[m], lam.values[m]) for m in range(1, M + 1)]
        diag = [(disc.mass[m] + self.jac[m] * disc.k[m]).restrict(fr).tosparse() for m in range(1, M + 1)]
        S = sp.block_diag(diag, format="csr") - disc.coupling_global
        self._lu = spla.splu(S.tocsc())
        G = disc.mass_global
        if any(h is not None for h in self.hess):
            G = G + sp.block_diag([(self.hess[m] * disc.k[m]).restrict(fr).tosparse() for m in range(1, M + 1)],
                                  format="csr")
        self.G = G

    def forward_flat(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(rhs)

    def backward_flat(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(rhs, trans="T")

    def forward(self, loads: list, initial: np.ndarray | None = None) -> DgTrajectory:
        """(M_m + k_m J_m) v_m = C_m v_{m-1} + loads[m]; v_0 = initial (default 0)."""
        d = self.disc
        rhs = d.loads_to_flat(loads)
        if initial is not None:
            rhs[:d.free_offsets[1]] += d.couple(1, initial)[d.free]
        v0 = np.zeros(d.grid.meshes[0].n_nodes) if initial is None else initial
        return d.traj_from_flat(self.forward_flat(rhs), v0)

    def backward(self, loads: list) -> DgTrajectory:
        """(M_m + k_m J_m^T) z_m = C_{m+1}^T z_{m+1} + loads[m], z_{M+1} = 0; M_0 z_0 = C_1^T z_1."""
        d = self.disc
        z = self.backward_flat(d.loads_to_flat(loads))
        return d.traj_from_flat(z, None)

    def state_loads(self, du_flat: np.ndarray) -> list:
        d = self.disc
        dus = d.split(du_flat)
        return [None] + [d.k[m] * d.ctrl[m].apply(dus[m - 1]) for m in range(1, d.M + 1)]

    def second_order_loads(self, v: DgTrajectory) -> list:
        """-k_m (M_m v_m + H_m v_m): L_xx applied to v as backward loads."""
        d = self.disc
        loads = [None]
        for m in range(1, d.M + 1):
            val = d.mass[m].matvec(v.values[m])
            if self.hess[m] is not None:
                val = val + self.hess[m].matvec(v.values[m])
            loads.append(-d.k[m] * val)
        return loads

    def hessian_dual(self, du_flat: np.ndarray) -> np.ndarray:
        d = self.disc
        dx = self.forward_flat(d.B_global @ du_flat)
        dlam = self.backward_flat(-(self.G @ dx))
        return d.spec.alpha * (d.W @ du_flat) - d.B_global.T @ dlam


def _add_loads(a: list, b: list) -> list:
    out = []
    for x, y in zip(a, b):
        if x is None:
            out.append(y)
        elif y is None:
            out.append(x)
        else:
            out.append(x + y)
    return out


@dataclass(frozen=True, eq=False)
class KktSolution:
    x: DgTrajectory
    u: ControlTrajectory
    lam: DgTrajectory
    info: dict = field(default_factory=dict)
    disc: Discretization | None = field(default=None, repr=False)

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.x.grid


def pcg(apply_h, b: np.ndarray, x0: np.ndarray, riesz, tol: float, maxiter: int,
        negative_curvature_exit: bool = False) -> tuple[np.ndarray, int, bool, float]:
    """Conjugate gradients for H x = b in the control Hilbert space (Riesz map as preconditioner).

    Stops when the dual residual norm drops to ``tol``. Returns (x, iterations, converged, residual norm).
    """
    x = x0.copy()
    r = b - apply_h(x) if np.any(x) else b.copy()
    z = riesz(r)
    rz = float(r @ z)
    res = np.sqrt(max(rz, 0.0))
    if res <= tol:
        return x, 0, True, res
    p = z.copy()
    for it in range(1, maxiter + 1):
        hp = apply_h(p)
        curv = float(p @ hp)
        if curv <= 0:
            if negative_curvature_exit:
                if it == 1:
                    return z.copy(), it, False, res
                return x, it, False, res
            raise SolverError("nonpositive curvature in CG")
        step = rz / curv
        x += step * p
        r -= step * hp
        z = riesz(r)
        rz_new = float(r @ z)
        res = np.sqrt(max(rz_new, 0.0))
        if res <= tol:
            return x, it, True, res
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter, False, res


def solve_forward(grid: SpaceTimeGrid, spec: ProblemSpec, u: ControlTrajectory,
                  disc: Discretization | None = None) -> DgTrajectory:
    disc = disc or Discretization(grid, spec)
    return disc.solve_forward(u.flat())


def solve_adjoint(grid: SpaceTimeGrid, spec: ProblemSpec, x: DgTrajectory, u: ControlTrajectory,
                  qoi: Qoi | None = None, disc: Discretization | None = None) -> DgTrajectory:
    """Backward sweep driven by the tracking term on the cost window (default: whole horizon)."""
    disc = disc or Discretization(grid, spec)
    mask = None if qoi is None else window_mask(disc.pts, qoi)
    return disc.linearize(x).backward(disc.tracking_load(x, mask))


def reduced_gradient(grid: SpaceTimeGrid, spec: ProblemSpec, x: DgTrajectory, u: ControlTrajectory,
                     lam: DgTrajectory, disc: Discretization | None = None,
                     dual: bool = False) -> ControlTrajectory:
    """Per slab alpha R_u u_m - B^* lam_m.

    With ``dual=True`` the box-rule weighted dual vector k_m (alpha R_u u_m - B^* lam_m) is
    returned, i.e. the derivative of the discrete cost with respect to the control coefficients.
    Otherwise the Riesz representative alpha u_m - R_u^{-1} B^* lam_m is returned.
    """
    disc = disc or Discretization(grid, spec)
    g = disc.gradient_dual(u.flat(), lam)
    return disc.control(g if dual else disc.riesz(g))


def hessian_apply(grid: SpaceTimeGrid, spec: ProblemSpec, base: KktSolution, du: ControlTrajectory,
                  mode: HessianMode | str = HessianMode.EXACT, dual: bool = False) -> ControlTrajectory:
    disc = base.disc if base.disc is not None and base.disc.grid is grid else Discretization(grid, spec)
    lin = disc.linearize(base.x, base.lam, HessianMode(mode))
    hd = lin.hessian_dual(du.flat())
    return disc.control(hd if dual else disc.riesz(hd))


def _reduced_cost(disc: Discretization, u_flat: np.ndarray, guess=None) -> tuple[float, DgTrajectory]:
    x = disc.solve_forward(u_flat, guess)
    return disc.cost(x, u_flat), x


def solve_ocp(grid: SpaceTimeGrid, spec: ProblemSpec, warm: ControlTrajectory | None = None,
              mode: HessianMode | str = HessianMode.EXACT, disc: Discretization | None = None,
              maxiter: int = LINEAR_CG_MAXIT) -> KktSolution:
    """Solve the discrete optimality system in the reduced (control) space.

    ``maxiter`` caps CG iterations (the linear solve and each inner Newton solve).
    """
    disc = disc or Discretization(grid, spec)
    mode = HessianMode(mode)
    n = int(disc.ctrl_offsets[-1])
    u = np.zeros(n) if warm is None else warm.flat().copy()
    if u.size != n:
        raise ValueError("warm start does not match the grid")
    if spec.is_linear:
        return _solve_linear(disc, u, maxiter)
    return _solve_newton_cg(disc, u, mode, maxiter)


def _solve_linear(disc: Discretization, u: np.ndarray, maxiter: int) -> KktSolution:
    lin0 = disc.linearize(None)
    # gradient at zero control gives the right-hand side: H u = -g(0)
    x0 = disc.solve_forward(np.zeros_like(u))
    lam0 = lin0.backward(disc.tracking_load(x0))
    b = -disc.gradient_dual(np.zeros_like(u), lam0)
    bnorm = np.sqrt(max(float(b @ disc.riesz(b)), 0.0))
    tol = LINEAR_CG_RTOL * bnorm
    u, its, ok, _ = pcg(lin0.hessian_dual, b, u, disc.riesz, tol, maxiter)
    x = disc.solve_forward(u)
    lam = lin0.backward(disc.tracking_load(x))
    g = disc.gradient_dual(u, lam)
    gnorm = np.sqrt(max(float(g @ disc.riesz(g)), 0.0))
    info = {"outer_iterations": 1, "cg_iterations": its, "grad_norm": gnorm, "grad_norm_zero": bnorm,
            "tolerance": tol, "converged": bool(ok or gnorm <= tol), "history": [(0, bnorm, 1.0), (1, gnorm, 1.0)]}
    if not info["converged"]:
        log.warning("linear CG hit the iteration cap (%d), |g| = %.3e", its, gnorm)
    return KktSolution(x, disc.control(u), lam, info, disc)


def _solve_newton_cg(disc: Discretization, u: np.ndarray, mode: HessianMode, maxiter: int) -> KktSolution:
    J, x = _reduced_cost(disc, u)
    history = []
    total_cg = 0
    g0norm = None
    converged = False
    outer = 0
    for outer in range(OUTER_MAXIT + 1):
        lin = disc.linearize(x, None, mode)
        lam = lin.backward(disc.tracking_load(x))
        g = disc.gradient_dual(u, lam)
        gr = disc.riesz(g)
        gnorm = np.sqrt(max(float(g @ gr), 0.0))
        if g0norm is None:
            g0norm = gnorm
        history.append((outer, gnorm, 1.0 if not history else history[-1][2]))
        if gnorm <= OUTER_TOL:
            converged = True
            break
        if outer == OUTER_MAXIT:
            break
        lin = disc.linearize(x, lam, mode)
        inner_tol = min(0.1, np.sqrt(gnorm)) * gnorm
        s, its, _, _ = pcg(lin.hessian_dual, -g, np.zeros_like(u), disc.riesz, inner_tol, maxiter,
                           negative_curvature_exit=True)
        total_cg += its
        slope = float(g @ s)
        if slope >= 0:
            s, slope = -gr, -gnorm**2
        t = 1.0
        for _ in range(ARMIJO_MAX_HALVINGS + 1):
            try:
                Jt, xt = _reduced_cost(disc, u + t * s, x)
                # near the optimum the decrease drops below the rounding level of J
                if Jt <= J + ARMIJO_SIGMA * t * slope + 64 * np.finfo(float).eps * abs(J):
                    break
            except NewtonError:
                pass
            t *= 0.5
        else:
            if gnorm <= 10 * OUTER_TOL or abs(t * slope) < 1e-15 * max(1.0, abs(J)):
                converged = gnorm <= 10 * OUTER_TOL
                break
            raise SolverError(f"line search failed at outer iteration {outer}, |g| = {gnorm:.3e}")
        u = u + t * s
        J, x = Jt, xt
        history[-1] = (outer, gnorm, t)
    info = {"outer_iterations": outer, "cg_iterations": total_cg, "grad_norm": gnorm, "grad_norm_zero": g0norm,
            "tolerance": OUTER_TOL, "converged": converged, "history": history}
    if not converged:
        log.warning("Newton-CG stopped without convergence, |g| = %.3e", gnorm)
    return KktSolution(x, disc.control(u), lam, info, disc)


@dataclass(frozen=True, eq=False)
class SecondarySolution:
    v: DgTrajectory
    q: ControlTrajectory
    z: DgTrajectory
    info: dict = field(default_factory=dict)


def solve_secondary(grid: SpaceTimeGrid, spec: ProblemSpec, base: KktSolution, qoi: Qoi,
                    mode: HessianMode | str = HessianMode.EXACT, rtol: float = LINEAR_CG_RTOL,
                    maxiter: int = LINEAR_CG_MAXIT) -> SecondarySolution:
    """Solve L''(xi) chi = -(I'_x, 0, I'_u, 0, 0) for chi = (v, q, z) by reduced CG on q."""
    disc = base.disc if base.disc is not None and base.disc.grid is grid else Discretization(grid, spec)
    mask = window_mask(disc.pts, qoi)
    lin = disc.linearize(base.x, base.lam, HessianMode(mode))
    qoi_loads = disc.tracking_load(base.x, mask)
    z_data = lin.backward(qoi_loads)
    us = base.u.values
    b_parts = []
    for m in range(1, disc.M + 1):
        ctrl = disc.ctrl[m]
        iu = spec.alpha * ctrl.riesz().matvec(us[m - 1]) if mask[m - 1] else np.zeros(ctrl.size)
        b_parts.append(-disc.k[m] * (iu - ctrl.apply_adjoint(z_data.values[m])))
    b = np.concatenate(b_parts)
    bnorm = np.sqrt(max(float(b @ disc.riesz(b)), 0.0))
    n = b.size
    if bnorm == 0.0:
        q = np.zeros(n)
        its, ok = 0, True
    else:
        q, its, ok, _ = pcg(lin.hessian_dual, b, np.zeros(n), disc.riesz, rtol * bnorm, maxiter)
        if not ok:
            raise SolverError(f"secondary CG did not converge in {maxiter} iterations")
    v = lin.forward(lin.state_loads(q))
    z = lin.backward(_add_loads(lin.second_order_loads(v), qoi_loads))
    return SecondarySolution(v, disc.control(q), z, {"cg_iterations": its, "rhs_norm": bnorm, "converged": ok})


# ---------------------------------------------------------------- operator forms
def _cross_inner(disc: Discretization, m: int, a_m: np.ndarray, b_prev: np.ndarray) -> float:
    """<a on mesh m, b on mesh m-1> exactly."""
    return float(a_m @ disc.couple(m, b_prev))


def forward_operator_form(disc: Discretization, jac: list, v: DgTrajectory, phi: DgTrajectory) -> float:
    """Time-stepping form of the linearized state operator applied to v, tested with phi.

    sum_m <[v]_{m-1}, phi_{m-1}^+> + sum_m k_m <a'(x_m) v_m, phi_m> + <v_0^-, phi_0^->
    (the time-derivative terms vanish for piecewise constants).
    """
    total = float(phi.values[0] @ disc.mass[0].matvec(v.values[0]))
    for m in range(1, disc.M + 1):
        pm = phi.values[m]
        total += float(pm @ disc.mass[m].matvec(v.values[m])) - _cross_inner(disc, m, pm, v.values[m - 1])
        total += disc.k[m] * float(pm @ jac[m].matvec(v.values[m]))
    return total


def backward_operator_form(disc: Discretization, jac: list, v: DgTrajectory, phi: DgTrajectory) -> float:
    """Backward counterpart: -sum_m <[v]_{m-1}, phi_{m-1}^-> + sum_m k_m <a'(x_m)^* v_m, phi_m> + <v_M^-, phi_M^->."""
    M = disc.M
    total = float(phi.values[M] @ disc.mass[M].matvec(v.values[M]))
    for m in range(1, M + 1):
        prev = phi.values[m - 1]
        jump_term = _cross_inner(disc, m, v.values[m], prev) - float(prev @ disc.mass[m - 1].matvec(v.values[m - 1]))
        total -= jump_term
        total += disc.k[m] * float(phi.values[m] @ jac[m].rmatvec(v.values[m]))
    return total

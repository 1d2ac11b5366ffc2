"""P1 finite element assembly on 1D meshes.

Constant-coefficient forms use closed-form element matrices; the quasilinear
diffusion ``(c x^2 + d) x'`` is integrated with 3-point Gauss quadrature, which
is exact for every integrand arising here.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack

from .grid import SpaceMesh, common_refinement, interpolation_matrix

GAUSS3_POINTS = np.array([0.5 - np.sqrt(15.0) / 10.0, 0.5, 0.5 + np.sqrt(15.0) / 10.0])
GAUSS3_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0


class ControlKind(str, Enum):
    DISTRIBUTED = "distributed"
    NEUMANN = "neumann"


@dataclass(frozen=True, eq=False)
class TriMatrix:
    """Tridiagonal matrix stored by its three diagonals."""

    sub: np.ndarray
    main: np.ndarray
    sup: np.ndarray

    @property
    def n(self) -> int:
        return self.main.size

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = self.main * v
        out[1:] += self.sub * v[:-1]
        out[:-1] += self.sup * v[1:]
        return out

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        return self.T.matvec(v)

    @property
    def T(self) -> "TriMatrix":
        return TriMatrix(self.sup, self.main, self.sub)

    def __add__(self, other: "TriMatrix") -> "TriMatrix":
        return TriMatrix(self.sub + other.sub, self.main + other.main, self.sup + other.sup)

    def __sub__(self, other: "TriMatrix") -> "TriMatrix":
        return TriMatrix(self.sub - other.sub, self.main - other.main, self.sup - other.sup)

    def __mul__(self, s: float) -> "TriMatrix":
        return TriMatrix(s * self.sub, s * self.main, s * self.sup)

    __rmul__ = __mul__

    def restrict(self, sl: slice) -> "TriMatrix":
        """Principal submatrix on a contiguous index range."""
        start, stop, _ = sl.indices(self.n)
        return TriMatrix(self.sub[start:stop - 1], self.main[start:stop], self.sup[start:stop - 1])

    def toarray(self) -> np.ndarray:
        return (np.diag(self.main) + np.diag(self.sub, -1) + np.diag(self.sup, 1))

    def tosparse(self) -> sp.csr_matrix:
        return sp.diags([self.sub, self.main, self.sup], [-1, 0, 1], format="csr")

    def factorize(self) -> "TriFactor":
        return TriFactor(self)


class TriFactor:
    """LU factorization of a tridiagonal matrix (LAPACK gttrf/gttrs)."""

    def __init__(self, mat: TriMatrix):
        if mat.n == 0:
            self.empty = True
            return
        self.empty = False
        self.dense = None
        if mat.n <= 2:
            # the LAPACK wrapper rejects n = 2
            self.dense = mat.toarray()
            if np.linalg.cond(self.dense) > 1.0 / np.finfo(float).eps:
                raise np.linalg.LinAlgError("singular tridiagonal step matrix")
            return
        dl, d, du, du2, ipiv, info = lapack.dgttrf(mat.sub, mat.main, mat.sup)
        if info != 0:
            raise np.linalg.LinAlgError("singular tridiagonal step matrix")
        self._lu = (dl, d, du, du2, ipiv)

    def solve(self, b: np.ndarray, transpose: bool = False) -> np.ndarray:
        if self.empty:
            return np.zeros(0)
        if self.dense is not None:
            return np.linalg.solve(self.dense.T if transpose else self.dense, np.asarray(b, dtype=float))
        x, info = lapack.dgttrs(*self._lu, b, trans="T" if transpose else "N")
        if info != 0:
            raise np.linalg.LinAlgError("tridiagonal solve failed")
        return x


def _tri_from_local(mesh: SpaceMesh, a00, a01, a10, a11) -> TriMatrix:
    """Assemble element matrices [[a00, a01], [a10, a11]] (one entry per element)."""
    n = mesh.n_nodes
    main = np.zeros(n)
    main[:-1] += a00
    main[1:] += a11
    return TriMatrix(np.asarray(a10, dtype=float), main, np.asarray(a01, dtype=float))


def assemble_mass(mesh: SpaceMesh) -> TriMatrix:
    h = mesh.h
    return _tri_from_local(mesh, h / 3.0, h / 6.0, h / 6.0, h / 3.0)


def assemble_stiffness(mesh: SpaceMesh, coeff) -> TriMatrix:
    coeff = np.broadcast_to(np.asarray(coeff, dtype=float), (mesh.n_elements,))
    if np.any(coeff < 0):
        raise ValueError("diffusion coefficient must be nonnegative")
    w = coeff / mesh.h
    return _tri_from_local(mesh, w, -w, -w, w)


def hat_integrals(mesh: SpaceMesh) -> np.ndarray:
    h = mesh.h
    out = np.zeros(mesh.n_nodes)
    out[:-1] += h / 2.0
    out[1:] += h / 2.0
    return out


def _check_qlin(c: float, d: float) -> None:
    if d <= 0:
        raise ValueError("quasilinear diffusion needs d > 0")
    if c < 0:
        raise ValueError("quasilinear diffusion needs c >= 0")


def _element_gauss_values(mesh: SpaceMesh, xh: np.ndarray):
    xa, xb = xh[:-1], xh[1:]
    phi_b = GAUSS3_POINTS[None, :]
    xq = xa[:, None] * (1.0 - phi_b) + xb[:, None] * phi_b
    slope = (xb - xa) / mesh.h
    return xq, slope


def assemble_quasilinear_residual(mesh: SpaceMesh, xh, c: float, d: float) -> np.ndarray:
    """Nodal vector of int (c x^2 + d) x' phi_i'."""
    _check_qlin(c, d)
    xh = np.asarray(xh, dtype=float)
    xq, slope = _element_gauss_values(mesh, xh)
    kappa_int = (c * xq**2 + d) @ GAUSS3_WEIGHTS  # = (1/h) int_e kappa
    flux = slope * kappa_int
    res = np.zeros(mesh.n_nodes)
    res[:-1] -= flux
    res[1:] += flux
    return res


def assemble_quasilinear_jacobian(mesh: SpaceMesh, xh, c: float, d: float) -> TriMatrix:
    """Derivative of :func:`assemble_quasilinear_residual` with respect to the nodal values."""
    _check_qlin(c, d)
    xh = np.asarray(xh, dtype=float)
    h = mesh.h
    xq, slope = _element_gauss_values(mesh, xh)
    w = GAUSS3_WEIGHTS
    kappa_int = (c * xq**2 + d) @ w
    phi_a = 1.0 - GAUSS3_POINTS
    phi_b = GAUSS3_POINTS
    # column j contribution: int (2c x phi_j x' + kappa phi_j') phi_i'
    col_a = 2.0 * c * slope * ((xq * phi_a) @ w) - kappa_int / h
    col_b = 2.0 * c * slope * ((xq * phi_b) @ w) + kappa_int / h
    # phi_a' = -1/h, phi_b' = +1/h; integral over element carries factor h
    a00, a01 = -col_a, -col_b
    a10, a11 = col_a, col_b
    return _tri_from_local(mesh, a00, a01, a10, a11)


def assemble_quasilinear_hessian(mesh: SpaceMesh, xh, lam, c: float) -> TriMatrix:
    """Matrix of (v, w) -> lam' [second derivative of the quasilinear residual](v, w).

    Entry (i, j) is int 2c (phi_i phi_j x' + x phi_j phi_i' + x phi_i phi_j') lam'.
    Symmetric by construction.
    """
    xh = np.asarray(xh, dtype=float)
    lam = np.asarray(lam, dtype=float)
    h = mesh.h
    xq, slope = _element_gauss_values(mesh, xh)
    lslope = (lam[1:] - lam[:-1]) / h
    w = GAUSS3_WEIGHTS
    pa = 1.0 - GAUSS3_POINTS
    pb = GAUSS3_POINTS
    s = {0: -1.0, 1: 1.0}
    phis = {0: pa, 1: pb}
    ent = {}
    for i in (0, 1):
        for j in (0, 1):
            t1 = h * slope * ((phis[i] * phis[j]) @ w)
            t2 = (xq * phis[j]) @ w * s[i]
            t3 = (xq * phis[i]) @ w * s[j]
            ent[i, j] = 2.0 * c * lslope * (t1 + t2 + t3)
    return _tri_from_local(mesh, ent[0, 0], ent[0, 1], ent[1, 0], ent[1, 1])


@dataclass(frozen=True, eq=False)
class ControlOperator:
    """Action of the control operator B on one slab mesh.

    Distributed controls are nodal P1 functions (U = L2(0, L)); Neumann controls
    are pairs (u_left, u_right) with the counting measure on the two endpoints.
    """

    kind: ControlKind
    mesh: SpaceMesh
    mass: TriMatrix | None = None

    @property
    def size(self) -> int:
        return self.mesh.n_nodes if self.kind is ControlKind.DISTRIBUTED else 2

    def apply(self, u: np.ndarray) -> np.ndarray:
        if self.kind is ControlKind.DISTRIBUTED:
            return self.mass.matvec(u)
        out = np.zeros(self.mesh.n_nodes)
        out[0] += u[0]
        out[-1] += u[1]
        return out

    def apply_adjoint(self, lam: np.ndarray) -> np.ndarray:
        if self.kind is ControlKind.DISTRIBUTED:
            return self.mass.rmatvec(lam)
        return np.array([lam[0], lam[-1]])

    def riesz(self) -> TriMatrix:
        if self.kind is ControlKind.DISTRIBUTED:
            return self.mass
        return TriMatrix(np.zeros(1), np.ones(2), np.zeros(1))


def assemble_control(mesh: SpaceMesh, kind: ControlKind | str) -> ControlOperator:
    kind = ControlKind(kind)
    return ControlOperator(kind, mesh, assemble_mass(mesh) if kind is ControlKind.DISTRIBUTED else None)


def cross_mass(rows: SpaceMesh, cols: SpaceMesh) -> sp.csr_matrix:
    """Exact matrix of int phi_i^rows phi_j^cols, evaluated on the common refinement."""
    common = common_refinement(rows, cols)
    mc = assemble_mass(common).tosparse()
    pr = interpolation_matrix(rows, common.nodes)
    pc = interpolation_matrix(cols, common.nodes)
    return (pr.T @ mc @ pc).tocsr()


def gauss_points(mesh: SpaceMesh) -> tuple[np.ndarray, np.ndarray]:
    """Physical 3-point Gauss points and weights, shape (n_elements, 3)."""
    h = mesh.h
    pts = mesh.nodes[:-1, None] + h[:, None] * GAUSS3_POINTS[None, :]
    wts = h[:, None] * GAUSS3_WEIGHTS[None, :]
    return pts, wts

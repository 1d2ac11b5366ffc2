"""Independent brute-force references used by the tests.

Everything here is assembled densely from hat functions and Gauss quadrature,
without the package's sparse assembly or sweeps.
"""
import numpy as np

from adaptive_mpc.model import Linear, eval_reference

_GX, _GW = np.polynomial.legendre.leggauss(5)


def hat_values(nodes, pts):
    """Matrix (len(pts), len(nodes)) of P1 hat functions evaluated at pts."""
    eye = np.eye(len(nodes))
    return np.column_stack([np.interp(pts, nodes, eye[i]) for i in range(len(nodes))])


def _quad(nodes):
    lo, hi = nodes[:-1, None], nodes[1:, None]
    pts = (0.5 * (hi - lo) * _GX + 0.5 * (hi + lo)).ravel()
    wts = (0.5 * (hi - lo) * _GW).ravel()
    return pts, wts


def dense_mass(rows, cols):
    """int phi_i^rows phi_j^cols by quadrature on the union of both node sets."""
    pts, wts = _quad(np.union1d(rows, cols))
    return hat_values(rows, pts).T @ (wts[:, None] * hat_values(cols, pts))


def dense_stiffness(nodes, nu):
    n = len(nodes)
    K = np.zeros((n, n))
    for e, h in enumerate(np.diff(nodes)):
        K[e:e + 2, e:e + 2] += nu / h * np.array([[1.0, -1.0], [-1.0, 1.0]])
    return K


class DenseKkt:
    """Monolithic KKT system of the linear-quadratic discrete problem.

    Unknowns are stacked as (x_1..x_M on free nodes, u_1..u_M, lam_1..lam_M on free nodes).
    """

    def __init__(self, grid, spec):
        if not isinstance(spec.dynamics, Linear):
            raise ValueError("dense oracle covers linear dynamics only")
        self.grid, self.spec = grid, spec
        nodes = [m.nodes for m in grid.meshes]
        pts, k = grid.time.points, grid.time.k
        M = grid.M
        dirichlet = spec.control.value == "distributed"
        self.free = [np.arange(1, len(n) - 1) if dirichlet else np.arange(len(n)) for n in nodes]
        nx = [len(self.free[m]) for m in range(1, M + 1)]
        nu_ = [len(nodes[m]) if dirichlet else 2 for m in range(1, M + 1)]
        ox, ou = np.concatenate([[0], np.cumsum(nx)]), np.concatenate([[0], np.cumsum(nu_)])
        self.ox, self.ou = ox, ou
        NX, NU = ox[-1], ou[-1]
        S = np.zeros((NX, NX))
        B = np.zeros((NX, NU))
        Q = np.zeros((NX, NX))
        W = np.zeros((NU, NU))
        r = np.zeros(NX)
        q = np.zeros(NX)
        self.mass = [dense_mass(n, n) for n in nodes]
        f0 = self.free[0]
        x_init = np.zeros(len(nodes[0]))
        if spec.x0 is not None:
            M0 = self.mass[0]
            load = dense_mass(nodes[0], spec.x0.mesh.nodes) @ spec.x0.values
            x_init[f0] = np.linalg.solve(M0[np.ix_(f0, f0)], load[f0])
        self.x_init = x_init
        dyn = spec.dynamics
        for m in range(1, M + 1):
            fm = self.free[m]
            sx = slice(ox[m - 1], ox[m])
            su = slice(ou[m - 1], ou[m])
            km = k[m - 1]
            Mm = self.mass[m]
            A = dense_stiffness(nodes[m], dyn.nu) - dyn.s * Mm
            S[sx, sx] = (Mm + km * A)[np.ix_(fm, fm)]
            C = dense_mass(nodes[m], nodes[m - 1])
            if m > 1:
                S[sx, slice(ox[m - 2], ox[m - 1])] = -C[np.ix_(fm, self.free[m - 1])]
            else:
                r[sx] += (C @ x_init)[fm]
            if dirichlet:
                B[sx, su] = km * Mm[fm, :]
                W[su, su] = km * Mm
            else:
                sel = np.zeros((len(nodes[m]), 2))
                sel[0, 0] = sel[-1, 1] = 1.0
                B[sx, su] = km * sel
                W[su, su] = km * np.eye(2)
            xd = np.array([eval_reference(spec, pts[m], w) for w in nodes[m]], dtype=float)
            Q[sx, sx] = km * Mm[np.ix_(fm, fm)]
            q[sx] = km * (Mm @ xd)[fm]
        self.S, self.B, self.Q, self.W, self.r, self.q = S, B, Q, W, r, q
        self.K = np.block([
            [Q, np.zeros((NX, NU)), S.T],
            [np.zeros((NU, NX)), spec.alpha * W, -B.T],
            [S, -B, np.zeros((NX, NX))],
        ])

    def _split(self, sol):
        NX, NU = self.ox[-1], self.ou[-1]
        return sol[:NX], sol[NX:NX + NU], sol[NX + NU:]

    def solve(self):
        NX, NU = self.ox[-1], self.ou[-1]
        rhs = np.concatenate([self.q, np.zeros(NU), self.r])
        return self._split(np.linalg.solve(self.K, rhs))

    def secondary(self, x, u, window):
        """Solve K chi = -(I_x, I_u, 0) with the QOI restricted to slabs flagged in ``window``."""
        NX = self.ox[-1]
        ix = np.zeros(NX)
        iu = np.zeros(self.ou[-1])
        res = self.Q @ x - self.q
        wu = self.spec.alpha * (self.W @ u)
        for m, on in enumerate(window, start=1):
            if on:
                sx = slice(self.ox[m - 1], self.ox[m])
                su = slice(self.ou[m - 1], self.ou[m])
                ix[sx] = res[sx]
                iu[su] = wu[su]
        rhs = -np.concatenate([ix, iu, np.zeros(NX)])
        return self._split(np.linalg.solve(self.K, rhs))

    def free_values(self, traj):
        return np.concatenate([traj.values[m][self.free[m]] for m in range(1, self.grid.M + 1)])

"""Degenerate parabolic IMEX step shared by the micro and macro solvers.

Unknowns are ``U = (u_i, u_e)`` with the membrane potential ``v = B U``,
``B = [P_i, -P_e]``.  One step solves

    (c/dt) B^T S B U + A U = b + c B^T S (v^n / dt - I(v^n, w^{n+1}))

after the explicit gating update ``w^{n+1} = w^n + dt H(v^n, w^n)``.  Here
``A = diag(A_i, A_e)``, ``S`` is the membrane mass, ``c`` the capacitive
scale (``eps`` on the oscillating membrane, 1 in the limit model) and ``b``
the source loads.  The matrix has the joint constants as its kernel, the
right-hand side is made orthogonal to them by projecting the sources, and
the extracellular mean is pinned to zero afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .discretize import ConstantNullspaceSolver, NumericalError


@dataclass(frozen=True)
class State:
    """Potentials and gating variable at time ``t``; arrays are not copied."""

    t: float
    u_i: np.ndarray
    u_e: np.ndarray
    v: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class StepInfo:
    iterations: int
    residual: float
    rhs_norm: float
    source_defect: float
    system_residual: float


class CoupledScheme:
    """Assembled step operator for one geometry, time step and membrane model.

    ``weights_i``, ``weights_e`` are the load vectors of the constant source
    1 in each phase; they define both the source projection and the pinned
    extracellular mean.
    """

    def __init__(self, A_i, A_e, P_i, P_e, S, scale, weights_i, weights_e, membrane, dt, options):
        self.A_i = sp.csr_matrix(A_i)
        self.A_e = sp.csr_matrix(A_e)
        self.n_i = A_i.shape[0]
        self.B = sp.hstack([P_i, -P_e]).tocsr()
        self.S = S
        self.scale = float(scale)
        self.dt = float(dt)
        self.weights_i = np.asarray(weights_i, dtype=float)
        self.weights_e = np.asarray(weights_e, dtype=float)
        self.membrane = membrane
        self.options = options
        self.K = ((self.scale / self.dt) * (self.B.T @ S @ self.B) + sp.block_diag([self.A_i, self.A_e])).tocsr()
        self._solver = None

    @property
    def solver(self):
        if self._solver is None:
            self._solver = ConstantNullspaceSolver(self.K, self.options)
        return self._solver

    def project(self, b_i, b_e):
        """Remove the joint mean of the sources; returns the projected loads and the raw defect."""
        defect = float(b_i.sum() + b_e.sum())
        c = defect / (self.weights_i.sum() + self.weights_e.sum())
        return b_i - c * self.weights_i, b_e - c * self.weights_e, defect

    def pin(self, u_i, u_e):
        shift = (self.weights_e @ u_e) / self.weights_e.sum()
        return u_i - shift, u_e - shift

    def split(self, U):
        return U[: self.n_i], U[self.n_i:]

    def initial(self, t, v0, w0, b_i, b_e):
        """Potentials minimizing the elliptic energy subject to ``B U = v0``.

        Intracellular membrane values are eliminated as ``v0 + u_e``, which
        leaves a singular symmetric system for the interior intracellular
        and all extracellular unknowns.
        """
        Pi = self.B[:, : self.n_i]
        Pe = -self.B[:, self.n_i:]
        on_membrane = np.asarray(Pi.sum(axis=0)).ravel() > 0
        interior = np.flatnonzero(~on_membrane)
        n_e = self.A_e.shape[0]
        E = sp.csr_matrix((np.ones(len(interior)), (interior, np.arange(len(interior)))),
                          shape=(self.n_i, len(interior)))
        G = sp.bmat([[E, Pi.T @ Pe], [None, sp.identity(n_e, format="csr")]]).tocsr()
        g = np.concatenate([Pi.T @ v0, np.zeros(n_e)])
        A = sp.block_diag([self.A_i, self.A_e]).tocsr()
        b = np.concatenate([b_i, b_e])
        z, report = ConstantNullspaceSolver((G.T @ A @ G).tocsr(), self.options).solve(G.T @ (b - A @ g))
        if not report.converged:
            raise NumericalError(f"initial elliptic solve did not converge (residual {report.residual:.2e})")
        u_i, u_e = self.pin(*self.split(G @ z + g))
        return State(t, u_i, u_e, self.B @ np.concatenate([u_i, u_e]), np.array(w0, dtype=float))

    def step(self, state, b_i, b_e, source_defect=0.0, t_new=None):
        """Advance by ``dt``; ``b_i``, ``b_e`` are the already projected loads at the new time."""
        t_new = state.t + self.dt if t_new is None else t_new
        m = self.membrane
        w_new = state.w + self.dt * m.gating(state.v, state.w)
        ionic = m.current(state.v, w_new)
        if not (np.all(np.isfinite(ionic)) and np.all(np.isfinite(w_new))):
            raise NumericalError(f"non-finite membrane current at t = {t_new:.6g}")
        rhs = np.concatenate([b_i, b_e]) + self.scale * (self.B.T @ (self.S @ (state.v / self.dt - ionic)))
        x0 = np.concatenate([state.u_i, state.u_e])
        U, report = self.solver.solve(rhs, x0=x0)
        if not report.converged:
            raise NumericalError(
                f"linear solve did not converge at t = {t_new:.6g} "
                f"(residual {report.residual:.2e} after {report.iterations} iterations)")
        rhs_norm = float(np.linalg.norm(rhs))
        res = float(np.linalg.norm(self.K @ U - rhs))
        u_i, u_e = self.pin(*self.split(U))
        v_new = self.B @ np.concatenate([u_i, u_e])
        info = StepInfo(report.iterations, report.residual, rhs_norm, source_defect,
                        res / rhs_norm if rhs_norm > 0 else res)
        return State(t_new, u_i, u_e, v_new, w_new), info

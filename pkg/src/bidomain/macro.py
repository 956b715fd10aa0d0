"""Homogenized bidomain model on the unit cube.

Both potentials, ``v = u_i - u_e`` and ``w`` share one Q1 grid.  The time
stepping is the IMEX scheme of :mod:`bidomain.coupled` with capacitive
factor ``|Gamma|`` times the volume mass, stiffnesses built from the
effective tensors and sources weighted by the phase volume fractions.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from .coupled import CoupledScheme, State
from .discretize import (EllipticityError, SolverOptions, assemble_local, element_nodes, mass_local,
                         reference_q1, stiffness_local)
from .geometry import corner_offsets
from .membrane import MembraneModel
from .micro import StabilityWarning, check_time_step, n_steps_for, sample_source

MacroState = State


class DegenerateTensorWarning(UserWarning):
    """An effective tensor is only positive semidefinite."""


class MacroGrid:
    """Uniform Q1 grid with ``n`` elements per axis on ``(0, 1)^d``."""

    def __init__(self, dim, n):
        if int(n) != n or n < 1:
            raise ValueError("macro grid resolution must be a positive integer")
        self.dim = int(dim)
        self.n = int(n)
        self.h = 1.0 / self.n
        self.node_shape = (self.n + 1,) * self.dim
        self.n_nodes = int(np.prod(self.node_shape))
        self.voxels = np.argwhere(np.ones((self.n,) * self.dim, dtype=bool))
        self.elem = element_nodes(self.voxels, self.node_shape)

    @cached_property
    def coords(self):
        return np.stack(np.unravel_index(np.arange(self.n_nodes), self.node_shape), axis=-1) * self.h

    @cached_property
    def mass(self):
        return assemble_local(self.elem, mass_local(self.h, self.dim), self.n_nodes)

    @cached_property
    def lumped(self):
        return np.asarray(self.mass.sum(axis=1)).ravel()

    def gauss_points(self):
        pts, wts, _, _ = reference_q1(self.dim)
        return (self.voxels[:, None, :] + pts[None, :, :]) * self.h, wts * self.h ** self.dim

    def stiffness(self, tensor):
        """Stiffness of ``int M grad u . grad phi`` for constant or callable ``M(x)``."""
        if callable(tensor):
            xq, _ = self.gauss_points()
            vals = np.asarray(tensor(xq.reshape(-1, self.dim)), dtype=float)
            vals = vals.reshape(len(self.voxels), -1, self.dim, self.dim)
            local = stiffness_local(self.h, self.dim, vals)
        else:
            local = stiffness_local(self.h, self.dim, np.asarray(tensor, dtype=float))
        return assemble_local(self.elem, local, self.n_nodes)

    def interpolate(self, values, points):
        """Q1 (multilinear) interpolation of a nodal field at ``points``."""
        axes = [np.linspace(0.0, 1.0, self.n + 1)] * self.dim
        f = RegularGridInterpolator(axes, np.asarray(values).reshape(self.node_shape), method="linear")
        return f(np.clip(points, 0.0, 1.0))

    def interpolation_matrix(self, points):
        """Sparse ``(P, n_nodes)`` matrix of the Q1 interpolation at ``points``."""
        s = np.clip(np.asarray(points, dtype=float), 0.0, 1.0) * self.n
        base = np.minimum(np.floor(s).astype(np.int64), self.n - 1)
        xi = s - base
        offs = corner_offsets(self.dim)
        rows, cols, vals = [], [], []
        for off in offs:
            w = np.prod(np.where(off == 1, xi, 1.0 - xi), axis=1)
            ids = np.ravel_multi_index(tuple((base + off).T), self.node_shape)
            rows.append(np.arange(len(s)))
            cols.append(ids)
            vals.append(w)
        mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(len(s), self.n_nodes))
        mat.eliminate_zeros()
        return mat

    def l2_error(self, values, exact):
        """``|u_h - u|_{L2}`` with Gauss quadrature of a callable ``exact(x)``."""
        xq, w = self.gauss_points()
        _, _, vals, _ = reference_q1(self.dim)
        uh = np.asarray(values)[self.elem] @ vals.T
        ex = np.asarray(exact(xq.reshape(-1, self.dim))).reshape(uh.shape)
        return math.sqrt(float(np.sum(w[None, :] * (uh - ex) ** 2)))


def _tensor_eigen_floor(tensor, dim, grid):
    if callable(tensor):
        xq, _ = grid.gauss_points()
        mats = np.asarray(tensor(xq.reshape(-1, dim)), dtype=float).reshape(-1, dim, dim)
    else:
        mats = np.asarray(tensor, dtype=float).reshape(1, dim, dim)
    return float(np.linalg.eigvalsh(0.5 * (mats + np.swapaxes(mats, 1, 2)))[:, 0].min())


@dataclass(frozen=True, eq=False)
class MacroConfig:
    """Physics and discretization of one homogenized run.

    ``s_i``, ``s_e`` are the cell-averaged sources ``s_j(t, x)``; the scheme
    applies the volume fractions ``vol_i``, ``vol_e`` itself.  Initial data
    are callables ``f(x)`` or constants.
    """

    dim: int
    n: int
    M_i: object
    M_e: object
    area: float
    vol_i: float
    vol_e: float
    membrane: MembraneModel = field(default_factory=MembraneModel.fitzhugh_nagumo)
    dt: float = 0.01
    T: float = 1.0
    s_i: object = None
    s_e: object = None
    v0: object = 0.0
    w0: object = 0.0
    snapshot_stride: int = 1
    solver: SolverOptions = field(default_factory=SolverOptions)
    project_sources: bool = True

    @cached_property
    def grid(self):
        return MacroGrid(self.dim, self.n)

    def validate(self):
        errors = []
        if not self.dt > 0:
            errors.append("dt must be positive")
        if not self.T >= self.dt:
            errors.append("T must be at least dt")
        if not self.area > 0:
            errors.append("membrane area must be positive")
        if not (self.vol_i >= 0 and self.vol_e > 0):
            errors.append("phase volume fractions must be nonnegative (extracellular positive)")
        return errors

    @property
    def n_steps(self):
        return n_steps_for(self.T, self.dt)

    @cached_property
    def scheme(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))
        g = self.grid
        lam_e = _tensor_eigen_floor(self.M_e, self.dim, g)
        if lam_e <= 0:
            raise EllipticityError(f"extracellular tensor is not positive definite (min eigenvalue {lam_e:.3g})")
        lam_i = _tensor_eigen_floor(self.M_i, self.dim, g)
        if lam_i < -1e-12:
            raise EllipticityError(f"intracellular tensor is indefinite (min eigenvalue {lam_i:.3g})")
        if lam_i <= 1e-12:
            warnings.warn("intracellular tensor is only semidefinite (disconnected intracellular phase)",
                          DegenerateTensorWarning, stacklevel=3)
        eye = sp.identity(g.n_nodes, format="csr")
        return CoupledScheme(
            g.stiffness(self.M_i), g.stiffness(self.M_e), eye, eye, self.area * g.mass, 1.0,
            self.vol_i * g.lumped, self.vol_e * g.lumped, self.membrane, self.dt, self.solver)

    def raw_loads(self, t):
        g = self.grid
        b_i = self.vol_i * (g.mass @ sample_source(self.s_i, t, g.coords))
        b_e = self.vol_e * (g.mass @ sample_source(self.s_e, t, g.coords))
        return b_i, b_e

    def loads(self, t):
        b_i, b_e = self.raw_loads(t)
        if not self.project_sources:
            return b_i, b_e, float(b_i.sum() + b_e.sum())
        return self.scheme.project(b_i, b_e)


@dataclass
class MacroTrajectory:
    snapshots: list
    log: dict
    dt: float
    stride: int

    @property
    def times(self):
        return np.array([s.t for s in self.snapshots])


def _sample_macro_initial(value, x):
    if callable(value):
        return np.broadcast_to(np.asarray(value(x), dtype=float), (len(x),)).copy()
    return np.full(len(x), float(value))


def init_macro_state(config):
    x = config.grid.coords
    b_i, b_e, _ = config.loads(0.0)
    return config.scheme.initial(0.0, _sample_macro_initial(config.v0, x),
                                 _sample_macro_initial(config.w0, x), b_i, b_e)


def _advance(state, config, t_new=None):
    t_new = state.t + config.dt if t_new is None else t_new
    b_i, b_e, defect = config.loads(t_new)
    return config.scheme.step(state, b_i, b_e, source_defect=defect, t_new=t_new)


def step_macro(state, config):
    """One IMEX step of length ``config.dt``."""
    return _advance(state, config)[0]


MACRO_LOG_COLUMNS = ("step", "t", "energy_i", "energy_e", "v_l2_sq", "w_l2_sq", "iterations",
                     "residual", "system_residual", "source_defect")


def run_macro(config, observer=None):
    """Integrate to ``T``; ``observer(step, state)`` is called at every time level."""
    check_time_step(config)
    sch = config.scheme
    state = init_macro_state(config)
    mass = config.grid.mass
    log = {k: [] for k in MACRO_LOG_COLUMNS}

    def record(step, state, info):
        row = {"step": step, "t": state.t,
               "energy_i": float(state.u_i @ (sch.A_i @ state.u_i)),
               "energy_e": float(state.u_e @ (sch.A_e @ state.u_e)),
               "v_l2_sq": float(state.v @ (mass @ state.v)),
               "w_l2_sq": float(state.w @ (mass @ state.w)),
               "iterations": info.iterations if info else 0,
               "residual": info.residual if info else 0.0,
               "system_residual": info.system_residual if info else 0.0,
               "source_defect": info.source_defect if info else 0.0}
        for k in MACRO_LOG_COLUMNS:
            log[k].append(row[k])
        if observer is not None:
            observer(step, state)

    snapshots = [state]
    record(0, state, None)
    for n in range(1, config.n_steps + 1):
        state, info = _advance(state, config, t_new=n * config.dt)
        record(n, state, info)
        if n % config.snapshot_stride == 0:
            snapshots.append(state)
    return MacroTrajectory(snapshots, {k: np.asarray(v) for k, v in log.items()}, config.dt,
                           config.snapshot_stride)


@dataclass(frozen=True)
class ResidualReport:
    """Per-snapshot relative residual of the summed potential equations and the source defect.

    ``elliptic`` is ``|A_i u_i + A_e u_e - b_i - b_e|`` divided by the sum of
    the norms of its four terms (0 when all vanish).  ``constant_mode`` is
    the unprojected total source ``sum(b_i + b_e)``, which must vanish for
    the potentials to exist.
    """

    times: np.ndarray
    elliptic: np.ndarray
    constant_mode: np.ndarray

    @property
    def max_elliptic(self):
        return float(np.max(self.elliptic, initial=0.0))


def macro_residuals(trajectory, config):
    sch = config.scheme
    ell, const = [], []
    for s in trajectory.snapshots:
        raw_i, raw_e = config.raw_loads(s.t)
        b_i, b_e, _ = config.loads(s.t)
        terms = [sch.A_i @ s.u_i, sch.A_e @ s.u_e, b_i, b_e]
        r = np.linalg.norm(terms[0] + terms[1] - b_i - b_e)
        scale = sum(np.linalg.norm(t) for t in terms)
        ell.append(r / scale if scale > 0 else 0.0)
        const.append(float(raw_i.sum() + raw_e.sum()))
    return ResidualReport(trajectory.times, np.array(ell), np.array(const))


# --------------------------------------------------------------------------
# manufactured solutions


def _cos_product(x):
    return np.prod(np.cos(np.pi * x), axis=1)


def _hessian_contraction(tensor, x):
    """``sum_ab M_ab d_a d_b phi`` for ``phi = prod_a cos(pi x_a)``."""
    d = x.shape[1]
    M = np.broadcast_to(np.asarray(tensor, dtype=float), (len(x), d, d))
    c, s = np.cos(np.pi * x), np.sin(np.pi * x)
    total = np.zeros(len(x))
    for a in range(d):
        for b in range(d):
            if a == b:
                h = -np.pi ** 2 * np.prod(c, axis=1)
            else:
                rest = np.prod(np.delete(c, [a, b], axis=1), axis=1)
                h = np.pi ** 2 * s[:, a] * s[:, b] * rest
            total += M[:, a, b] * h
    return total


@dataclass(frozen=True)
class ManufacturedSolution:
    """``u_i = phi(x) g(t)``, ``u_e = -u_i / 2`` with ``phi = prod cos(pi x_a)`` and ``I = v``, ``H = 0``.

    The sources make both potential equations hold exactly; they are
    compatible because ``phi`` has zero mean and zero normal derivative.
    Tensors must be constant and diagonal, otherwise the conormal
    derivative of ``phi`` does not vanish on the boundary.
    """

    M_i: object
    M_e: object
    area: float
    vol_i: float
    vol_e: float
    g: object = staticmethod(lambda t: 1.0 + 0.5 * np.sin(t))
    dg: object = staticmethod(lambda t: 0.5 * np.cos(t))

    def __post_init__(self):
        for name in ("M_i", "M_e"):
            M = getattr(self, name)
            if callable(M):
                raise ValueError(f"{name} must be a constant matrix")
            M = np.atleast_2d(np.asarray(M, dtype=float))
            if np.any(M != np.diag(np.diag(M))):
                raise ValueError(f"{name} must be diagonal")

    def u_i(self, t, x):
        return _cos_product(x) * self.g(t)

    def u_e(self, t, x):
        return -0.5 * self.u_i(t, x)

    def v(self, t, x):
        return 1.5 * self.u_i(t, x)

    def s_i(self, t, x):
        cap = self.area * 1.5 * _cos_product(x) * (self.dg(t) + self.g(t))
        return (cap - _hessian_contraction(self.M_i, x) * self.g(t)) / self.vol_i

    def s_e(self, t, x):
        cap = self.area * 1.5 * _cos_product(x) * (self.dg(t) + self.g(t))
        return (-cap + 0.5 * _hessian_contraction(self.M_e, x) * self.g(t)) / self.vol_e

    def config(self, dim, n, dt, T, **kw):
        return MacroConfig(dim=dim, n=n, M_i=self.M_i, M_e=self.M_e, area=self.area, vol_i=self.vol_i,
                           vol_e=self.vol_e, membrane=MembraneModel.linear(), dt=dt, T=T,
                           s_i=self.s_i, s_e=self.s_e, v0=lambda x: self.v(0.0, x), **kw)


def manufactured_order(solution, dim=2, grids=(16, 32), dt=1e-4, T=0.05, solver=None):
    """Observed L2 order of ``v(T)`` between consecutive grids, and the errors."""
    errors = []
    for n in grids:
        cfg = solution.config(dim, n, dt, T, solver=solver or SolverOptions())
        traj = run_macro(cfg)
        t_end = traj.snapshots[-1].t
        errors.append(cfg.grid.l2_error(traj.snapshots[-1].v, lambda x: solution.v(t_end, x)))
    orders = [math.log(errors[k] / errors[k + 1]) / math.log(grids[k + 1] / grids[k])
              for k in range(len(grids) - 1)]
    return orders, errors


__all__ = ["MacroConfig", "MacroGrid", "MacroState", "MacroTrajectory", "ManufacturedSolution",
           "DegenerateTensorWarning", "StabilityWarning", "init_macro_state", "step_macro", "run_macro",
           "macro_residuals", "manufactured_order"]

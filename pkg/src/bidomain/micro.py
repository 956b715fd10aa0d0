"""Microscopic bidomain model on an eps-periodic tiled domain.

Intra- and extracellular potentials live on their own phase, the membrane
potential ``v`` and gating variable ``w`` on the membrane nodes.  The time
stepping is the IMEX scheme of :mod:`bidomain.coupled` with capacitive scale
``eps`` and the membrane mass matrix.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .coupled import CoupledScheme, State
from .discretize import (SolverOptions, assemble_mass, assemble_stiffness,
                         assemble_surface_mass, integrate_norm, surface_lp, trace_operator)
from .geometry import TiledDomain
from .membrane import MembraneModel

MicroState = State


class StabilityWarning(UserWarning):
    """The time step exceeds the documented explicit-reaction ceiling."""


def n_steps_for(T, dt):
    return int(math.floor(T / dt + 1e-9))


def sample_source(source, t, x):
    """Values of a source ``s(t, x)`` at points ``x``; ``None`` is zero."""
    if source is None:
        return np.zeros(len(x))
    if callable(source):
        return np.broadcast_to(np.asarray(source(t, x), dtype=float), (len(x),)).copy()
    return np.full(len(x), float(source))


def sample_initial(value, x, y):
    """Initial datum ``f(x, y)`` (or a constant) at points with fast variable ``y``."""
    if callable(value):
        return np.broadcast_to(np.asarray(value(x, y), dtype=float), (len(x),)).copy()
    return np.full(len(x), float(value))


@dataclass(frozen=True, eq=False)
class MicroConfig:
    """Physics and discretization of one microscopic run.

    Conductivities are constants, matrices or callables ``sigma(x, y)``;
    sources are callables ``s(t, x)`` or constants and initial data callables
    ``f(x, y)`` or constants.
    """

    domain: TiledDomain
    membrane: MembraneModel = field(default_factory=MembraneModel.fitzhugh_nagumo)
    dt: float = 0.01
    T: float = 1.0
    sigma_i: object = 1.0
    sigma_e: object = 1.0
    s_i: object = None
    s_e: object = None
    v0: object = 0.0
    w0: object = 0.0
    snapshot_stride: int = 1
    solver: SolverOptions = field(default_factory=SolverOptions)
    project_sources: bool = True

    def validate(self):
        errors = []
        if not self.dt > 0:
            errors.append("dt must be positive")
        if not self.T >= self.dt:
            errors.append("T must be at least dt")
        if int(self.snapshot_stride) != self.snapshot_stride or self.snapshot_stride < 1:
            errors.append("snapshot_stride must be a positive integer")
        if self.domain.n_faces == 0:
            errors.append("the cell has no membrane")
        return errors

    @property
    def eps(self):
        return self.domain.eps

    @property
    def n_steps(self):
        return n_steps_for(self.T, self.dt)

    @cached_property
    def scheme(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))
        d = self.domain
        M_i, M_e = assemble_mass(d, "i"), assemble_mass(d, "e")
        return CoupledScheme(
            assemble_stiffness(d, "i", self.sigma_i), assemble_stiffness(d, "e", self.sigma_e),
            trace_operator(d, "i"), trace_operator(d, "e"), assemble_surface_mass(d),
            d.eps, np.asarray(M_i.sum(axis=1)).ravel(), np.asarray(M_e.sum(axis=1)).ravel(),
            self.membrane, self.dt, self.solver)

    @cached_property
    def stiffness(self):
        return self.scheme.A_i, self.scheme.A_e

    def loads(self, t):
        """Projected source loads at time ``t`` and the raw compatibility defect."""
        d = self.domain
        b_i = assemble_mass(d, "i") @ sample_source(self.s_i, t, d.phase_coords("i"))
        b_e = assemble_mass(d, "e") @ sample_source(self.s_e, t, d.phase_coords("e"))
        if not self.project_sources:
            return b_i, b_e, float(b_i.sum() + b_e.sum())
        return self.scheme.project(b_i, b_e)


@dataclass
class MicroTrajectory:
    """Snapshots every ``stride`` steps and a per-time-level monitor log."""

    snapshots: list
    log: dict
    eps: float
    dt: float
    stride: int

    @property
    def times(self):
        return np.array([s.t for s in self.snapshots])


def init_state(config):
    """Initial state: ``v``, ``w`` sampled on the membrane, potentials from one elliptic solve."""
    d = config.domain
    x, y = d.membrane_coords(), d.membrane_fast_coords()
    v0 = sample_initial(config.v0, x, y)
    w0 = sample_initial(config.w0, x, y)
    b_i, b_e, _ = config.loads(0.0)
    return config.scheme.initial(0.0, v0, w0, b_i, b_e)


def _advance(state, config, t_new=None):
    t_new = state.t + config.dt if t_new is None else t_new
    b_i, b_e, defect = config.loads(t_new)
    return config.scheme.step(state, b_i, b_e, source_defect=defect, t_new=t_new)


def step_micro(state, config):
    """One IMEX step of length ``config.dt``."""
    return _advance(state, config)[0]


def check_time_step(config):
    ceiling = config.membrane.stability_ceiling()
    if config.dt > ceiling:
        warnings.warn(f"dt = {config.dt:g} exceeds the explicit-reaction ceiling {ceiling:.3g}",
                      StabilityWarning, stacklevel=3)
    return ceiling


LOG_COLUMNS = ("step", "t", "grad_i_sq", "grad_e_sq", "l2_i_sq", "l2_e_sq", "energy_i", "energy_e",
               "v_l2_sq", "v_l4_4", "w_l2_sq", "dtw_l2_sq", "iterations", "residual",
               "system_residual", "source_defect")


def _level_quantities(state, config, prev_w):
    d = config.domain
    A_i, A_e = config.stiffness
    row = {
        "t": state.t,
        "grad_i_sq": integrate_norm(state.u_i, d, "H1", "i") ** 2,
        "grad_e_sq": integrate_norm(state.u_e, d, "H1", "e") ** 2,
        "l2_i_sq": integrate_norm(state.u_i, d, "L2", "i") ** 2,
        "l2_e_sq": integrate_norm(state.u_e, d, "L2", "e") ** 2,
        "energy_i": float(state.u_i @ (A_i @ state.u_i)),
        "energy_e": float(state.u_e @ (A_e @ state.u_e)),
        "v_l2_sq": integrate_norm(state.v, d, "L2_surface") ** 2,
        "v_l4_4": surface_lp(state.v, d, 4) ** 4,
        "w_l2_sq": integrate_norm(state.w, d, "L2_surface") ** 2,
        "dtw_l2_sq": 0.0 if prev_w is None else
        integrate_norm((state.w - prev_w) / config.dt, d, "L2_surface") ** 2,
    }
    return row


def run_micro(config, observer=None):
    """Integrate to ``T``; ``observer(step, state)`` is called at every time level."""
    check_time_step(config)
    state = init_state(config)
    log = {k: [] for k in LOG_COLUMNS}

    def record(step, state, info, prev_w):
        row = _level_quantities(state, config, prev_w)
        row.update(step=step, iterations=info.iterations if info else 0,
                   residual=info.residual if info else 0.0,
                   system_residual=info.system_residual if info else 0.0,
                   source_defect=info.source_defect if info else 0.0)
        for k in LOG_COLUMNS:
            log[k].append(row[k])
        if observer is not None:
            observer(step, state)

    snapshots = [state]
    record(0, state, None, None)
    for n in range(1, config.n_steps + 1):
        prev_w = state.w
        state, info = _advance(state, config, t_new=n * config.dt)
        record(n, state, info, prev_w)
        if n % config.snapshot_stride == 0:
            snapshots.append(state)
    log = {k: np.asarray(v) for k, v in log.items()}
    return MicroTrajectory(snapshots, log, config.eps, config.dt, config.snapshot_stride)


@dataclass(frozen=True)
class EstimateReport:
    """Scaled norms bounded independently of ``eps`` by the a priori estimates."""

    grad_i: float
    grad_e: float
    l2_i: float
    l2_e: float
    v_linf_l2: float
    v_l4: float
    w_linf_l2: float
    dtw_l2: float
    translation: dict

    def as_dict(self):
        out = {k: getattr(self, k) for k in MONITOR_NAMES}
        out["translation"] = [[float(k), float(v)] for k, v in sorted(self.translation.items())]
        return out


MONITOR_NAMES = ("grad_i", "grad_e", "l2_i", "l2_e", "v_linf_l2", "v_l4", "w_linf_l2", "dtw_l2")


def _trapz(values, dt):
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(dt * (values.sum() - 0.5 * (values[0] + values[-1])))


def translation_quantity(trajectory, domain, shifts):
    """``eps * int_0^{T-s} |v(t+s) - v(t)|^2_{L2(Gamma)} dt`` for shifts in snapshot units."""
    tau = trajectory.dt * trajectory.stride
    vs = [s.v for s in trajectory.snapshots]
    out = {}
    for m in shifts:
        total = sum(integrate_norm(vs[k + m] - vs[k], domain, "L2_surface") ** 2
                    for k in range(len(vs) - m))
        out[m * tau] = trajectory.eps * tau * total
    return out


def micro_monitors(trajectory, config, shifts=None):
    """Monitors (a)-(f) of the a priori estimates and the time translation quantity.

    Time integrals use the trapezoidal rule over all time levels; the time
    derivative of ``w`` uses backward difference quotients.  ``shifts`` are
    multiples of the snapshot spacing; by default ``m, 2m, 4m`` with ``m``
    an eighth of the snapshot count.
    """
    if len(trajectory.snapshots) < 2:
        raise ValueError("monitors need at least two snapshots")
    log, dt, eps = trajectory.log, trajectory.dt, trajectory.eps
    if shifts is None:
        m = max(1, (len(trajectory.snapshots) - 1) // 8)
        shifts = [m, 2 * m, 4 * m]
    shifts = [s for s in shifts if s < len(trajectory.snapshots)]
    return EstimateReport(
        grad_i=math.sqrt(_trapz(log["grad_i_sq"], dt)),
        grad_e=math.sqrt(_trapz(log["grad_e_sq"], dt)),
        l2_i=math.sqrt(_trapz(log["l2_i_sq"], dt)),
        l2_e=math.sqrt(_trapz(log["l2_e_sq"], dt)),
        v_linf_l2=math.sqrt(eps * float(np.max(log["v_l2_sq"]))),
        v_l4=(eps * _trapz(log["v_l4_4"], dt)) ** 0.25,
        w_linf_l2=math.sqrt(eps * float(np.max(log["w_l2_sq"]))),
        dtw_l2=math.sqrt(eps * dt * float(np.sum(log["dtw_l2_sq"][1:]))),
        translation=translation_quantity(trajectory, config.domain, shifts),
    )


def save_snapshots(trajectory, path, metadata=None):
    """Compressed ``.npz`` archive with arrays ``<field>_<k>`` and the time stamps.

    ``metadata`` entries are stored as string scalars under ``meta_<key>``.
    """
    arrays = {"t": trajectory.times}
    for key, value in (metadata or {}).items():
        arrays[f"meta_{key}"] = np.array(str(value))
    for k, s in enumerate(trajectory.snapshots):
        for name in ("u_i", "u_e", "v", "w"):
            arrays[f"{name}_{k:05d}"] = getattr(s, name)
    np.savez_compressed(path, **arrays)

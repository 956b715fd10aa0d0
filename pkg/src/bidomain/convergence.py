"""Homogenization experiment: micro runs over a ladder of ``eps`` against one macro run.

The macro solution is computed once on a grid containing every micro grid
node, so evaluating it on ``Gamma^eps`` is exact nodal sampling.  All
metrics are accumulated at every time level and integrated in time with the
trapezoidal rule.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .cell_problem import CellProblemHomogenizer
from .discretize import NumericalError, SolverOptions, integrate_norm
from .geometry import CellGeometrySpec, build_unit_cell, tile_domain
from .macro import MacroConfig, run_macro
from .membrane import MembraneModel
from .micro import MicroConfig, micro_monitors, n_steps_for, run_micro
from .unfolding import cell_averages, unfold_boundary, unfolded_norm


class StudyError(ValueError):
    pass


def thread_count(default=None):
    """Worker threads from ``BIDOMAIN_THREADS`` (all cores when unset)."""
    raw = os.environ.get("BIDOMAIN_THREADS")
    if raw is None or raw.strip() == "":
        return default or os.cpu_count() or 1
    value = int(raw)
    if value < 1:
        raise ValueError("BIDOMAIN_THREADS must be a positive integer")
    return value


@dataclass(frozen=True, eq=False)
class StudyConfig:
    """One convergence experiment.

    Sources are ``s(t, x)`` and initial data ``f(x)``, both independent of the
    fast variable, so micro and macro runs share them directly.
    """

    geometry: CellGeometrySpec
    n_cells: tuple = (2, 4, 8)
    sigma_i: object = 1.0
    sigma_e: object = 1.0
    membrane: MembraneModel = field(default_factory=MembraneModel.fitzhugh_nagumo)
    s_i: object = None
    s_e: object = None
    v0: object = 0.0
    w0: object = 0.0
    dt: float = 0.01
    T: float = 1.0
    macro_n: int | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)

    def validate(self):
        errors = list(self.geometry.validate())
        if len(self.n_cells) == 0:
            errors.append("study needs at least one eps value")
        if any(int(N) != N or N < 1 for N in self.n_cells):
            errors.append("eps must be 1/N")
        elif list(self.n_cells) != sorted(set(self.n_cells)):
            errors.append("eps values must be strictly decreasing")
        if not self.dt > 0 or not self.T >= self.dt:
            errors.append("need dt > 0 and T >= dt")
        return errors

    @property
    def eps(self):
        return [1.0 / N for N in self.n_cells]


def _initial_xy(f):
    if callable(f):
        return lambda x, y: f(x)
    return f


REPORT_COLUMNS = ("eps", "e_eps", "unfolded_L2", "avg_err_ui", "avg_err_ue", "energy_micro_i",
                  "energy_micro_e", "energy_macro_i", "energy_macro_e", "order_e")


@dataclass
class ConvergenceReport:
    eps: list
    e_eps: list
    unfolded_L2: list
    avg_err_ui: list
    avg_err_ue: list
    energy_micro_i: list
    energy_micro_e: list
    energy_macro_i: list
    energy_macro_e: list
    order_e: list
    e_final: list
    M_i: list
    M_e: list
    monitors: list = field(default_factory=list)
    config_hash: str = ""
    version: str = __version__

    def rows(self):
        return [{c: getattr(self, c)[k] for c in REPORT_COLUMNS} for k in range(len(self.eps))]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def energy_gap(self, phase):
        micro = getattr(self, f"energy_micro_{phase}")
        macro = getattr(self, f"energy_macro_{phase}")
        return [abs(a - b) for a, b in zip(micro, macro)]


def observed_orders(eps, errors):
    out = [None]
    for k in range(1, len(eps)):
        if errors[k] > 0 and errors[k - 1] > 0:
            out.append(math.log(errors[k - 1] / errors[k]) / math.log(eps[k - 1] / eps[k]))
        else:
            out.append(None)
    return out


def _trapz(values, dt):
    values = np.asarray(values, dtype=float)
    return float(dt * (values.sum() - 0.5 * (values[0] + values[-1]))) if len(values) > 1 else 0.0


def _clean_tensor(M):
    M = 0.5 * (M + M.T)
    return np.where(np.abs(M) < 1e-12 * max(1.0, np.abs(M).max()), 0.0, M)


def effective_tensors(config):
    cell = build_unit_cell(config.geometry)
    if cell.n_faces == 0:
        raise StudyError("the cell has no membrane; the bidomain model needs Y_i and Y_e with an interface")
    est = CellProblemHomogenizer(sigma_i=config.sigma_i, sigma_e=config.sigma_e).fit(cell)
    return cell, _clean_tensor(est.M_i_), _clean_tensor(est.M_e_)


def _macro_config(config, cell, M_i, M_e):
    n = config.macro_n or max(config.n_cells) * cell.resolution
    return MacroConfig(dim=cell.dim, n=n, M_i=M_i, M_e=M_e, area=cell.area, vol_i=cell.volume_i,
                       vol_e=cell.volume_e, membrane=config.membrane, dt=config.dt, T=config.T,
                       s_i=config.s_i, s_e=config.s_e, v0=config.v0, w0=config.w0, solver=config.solver)


def _micro_metrics(config, cell, N, macro_cfg, macro_levels):
    domain = tile_domain(cell, N)
    mcfg = MicroConfig(domain, config.membrane, config.dt, config.T, config.sigma_i, config.sigma_e,
                       config.s_i, config.s_e, _initial_xy(config.v0), _initial_xy(config.w0),
                       snapshot_stride=max(1, n_steps_for(config.T, config.dt) // 8), solver=config.solver)
    grid = macro_cfg.grid
    to_membrane = grid.interpolation_matrix(domain.membrane_coords())
    n_vox = domain.n_voxels
    centres = (np.argwhere(np.ones((n_vox,) * domain.dim, dtype=bool)) + 0.5) / n_vox
    owner = np.ravel_multi_index(tuple((centres * N).astype(int).T), (N,) * domain.dim)
    to_centres = grid.interpolation_matrix(centres)
    eps = domain.eps
    acc = {"e_sq": [], "unf_sq": [], "avg_i": [], "avg_e": []}
    final = {}

    def observer(step, state):
        ref = macro_levels[step]
        vm = to_membrane @ ref.v
        diff = state.v - vm
        e_sq = integrate_norm(diff, domain, "L2_surface") ** 2
        acc["e_sq"].append(e_sq)
        acc["unf_sq"].append(unfolded_norm(unfold_boundary(state.v, domain) - unfold_boundary(vm, domain)) ** 2)
        for j, u, um in (("i", state.u_i, ref.u_i), ("e", state.u_e, ref.u_e)):
            avg = cell_averages(u, domain, j)
            acc[f"avg_{j}"].append(float(np.sum((avg[owner] - (to_centres @ um)) ** 2)) / n_vox ** domain.dim)
        final["e_sq"] = e_sq

    traj = run_micro(mcfg, observer=observer)
    dt = config.dt
    return {
        "e_eps": math.sqrt(eps * _trapz(acc["e_sq"], dt)),
        "unfolded_L2": math.sqrt(_trapz(acc["unf_sq"], dt)),
        "avg_err_ui": math.sqrt(_trapz(acc["avg_i"], dt)),
        "avg_err_ue": math.sqrt(_trapz(acc["avg_e"], dt)),
        "energy_micro_i": _trapz(traj.log["energy_i"], dt),
        "energy_micro_e": _trapz(traj.log["energy_e"], dt),
        "e_final": math.sqrt(eps * final["e_sq"]),
        "monitors": micro_monitors(traj, mcfg).as_dict(),
    }


def run_study(config, threads=None, config_hash=""):
    """Cell problem, macro run and micro runs over ``config.n_cells``; returns a :class:`ConvergenceReport`."""
    errors = config.validate()
    if errors:
        raise StudyError("; ".join(errors))
    cell, M_i, M_e = effective_tensors(config)
    macro_cfg = _macro_config(config, cell, M_i, M_e)
    levels = []
    macro = run_macro(macro_cfg, observer=lambda step, state: levels.append(state))
    e_macro_i = _trapz(macro.log["energy_i"], config.dt)
    e_macro_e = _trapz(macro.log["energy_e"], config.dt)

    def one(N):
        try:
            return _micro_metrics(config, cell, N, macro_cfg, levels)
        except Exception as exc:
            raise NumericalError(f"micro run with eps = 1/{N} failed: {exc}") from exc

    threads = threads or thread_count()
    if threads > 1 and len(config.n_cells) > 1:
        with ThreadPoolExecutor(min(threads, len(config.n_cells))) as pool:
            results = list(pool.map(one, config.n_cells))
    else:
        results = [one(N) for N in config.n_cells]
    eps = config.eps
    col = {k: [r[k] for r in results] for k in results[0]}
    return ConvergenceReport(
        eps=eps, e_eps=col["e_eps"], unfolded_L2=col["unfolded_L2"], avg_err_ui=col["avg_err_ui"],
        avg_err_ue=col["avg_err_ue"], energy_micro_i=col["energy_micro_i"], energy_micro_e=col["energy_micro_e"],
        energy_macro_i=[e_macro_i] * len(eps), energy_macro_e=[e_macro_e] * len(eps),
        order_e=observed_orders(eps, col["e_eps"]), e_final=col["e_final"],
        M_i=M_i.tolist(), M_e=M_e.tolist(), monitors=col["monitors"], config_hash=config_hash)


def report_csv(report):
    buf = io.StringIO()
    buf.write(f"# bidomain {report.version} config_hash={report.config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in report.rows():
        w.writerow(["" if row[c] is None else repr(float(row[c])) for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_report(report, out_dir, stem="convergence"):
    """Write ``<stem>.csv`` and ``<stem>.json`` into ``out_dir``; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    try:
        with open(csv_path, "w", newline="") as fh:
            fh.write(report_csv(report))
        with open(json_path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {exc.filename}: {exc.strerror}") from exc
    return csv_path, json_path


def read_report(json_path):
    with open(json_path) as fh:
        return ConvergenceReport.from_dict(json.load(fh))

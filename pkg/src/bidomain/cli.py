"""Command line interface: ``bidomain <subcommand> --config <path> [--out <dir>] [--serial]``.

Exit status is 0 on success, 1 on numerical failure and 2 on configuration
errors; failures also print a JSON object to stderr.  On success a JSON
summary with the written files goes to stdout.  Every output file carries
the configuration hash and the package version.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .cell_problem import CellProblemError, CellProblemHomogenizer
from .config import ConfigError, parse_config
from .convergence import StudyError, run_study, thread_count, write_report
from .discretize import (DegenerateGeometryError, EllipticityError, InconsistentSystemError, NumericalError,
                         export_matrix_market)
from .geometry import GeometryError, build_unit_cell, tile_domain, write_vtk
from .macro import MACRO_LOG_COLUMNS, macro_residuals, run_macro
from .micro import LOG_COLUMNS, micro_monitors, run_micro, save_snapshots
from .unfolding import identity_suite

SUBCOMMANDS = ("cell-tensor", "micro", "macro", "converge", "unfold-check")
CONFIG_ERRORS = (ConfigError, GeometryError, StudyError, EllipticityError, DegenerateGeometryError)
NUMERICAL_ERRORS = (NumericalError, CellProblemError, InconsistentSystemError, np.linalg.LinAlgError,
                    ArithmeticError)


class Run:
    """Output bookkeeping for one subcommand."""

    def __init__(self, config, out_dir, threads):
        self.config = config
        self.out = out_dir
        self.threads = threads
        self.files = []
        os.makedirs(out_dir, exist_ok=True)

    @property
    def header(self):
        return f"bidomain {__version__} config_hash={self.config.hash}"

    @property
    def stamp(self):
        return {"config_hash": self.config.hash, "version": __version__}

    def path(self, name):
        p = os.path.join(self.out, name)
        self.files.append(p)
        return p

    def write_json(self, name, payload):
        with open(self.path(name), "w") as fh:
            json.dump({**payload, **self.stamp}, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, name, columns, rows):
        with open(self.path(name), "w", newline="") as fh:
            fh.write(f"# {self.header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _log_rows(log, columns):
    return zip(*(log[c] for c in columns))


def _tensors(run, resolution=None):
    cfg = run.config
    cell = cfg.cell if resolution is None else build_unit_cell(replace(cfg.geometry, resolution=resolution))
    est = CellProblemHomogenizer(sigma_i=cfg.sigma("i"), sigma_e=cfg.sigma("e"),
                                 n_jobs=min(cell.dim, run.threads)).fit(cell)
    return cell, est


def cmd_cell_tensor(run):
    cfg = run.config
    cell, est = _tensors(run)
    run.write_json("cell_tensor.json", {
        "geometry": {k: v for k, v in cfg["geometry"].items() if k != "eps"},
        "sigma": cfg["sigma"],
        "M_i": est.M_i_.tolist(),
        "M_e": est.M_e_.tolist(),
        "diagnostics": {p: d.as_dict() for p, d in est.diagnostics_.items()},
        "provenance": {p: t.provenance for p, t in est.tensors_.items()},
    })
    rows = []
    for n in (cell.resolution, 2 * cell.resolution):
        _, e = (cell, est) if n == cell.resolution else _tensors(run, n)
        for phase, M in (("i", e.M_i_), ("e", e.M_e_)):
            rows += [(n, phase, a, b, M[a, b]) for a in range(cell.dim) for b in range(cell.dim)]
    run.write_csv("cell_tensor_refinement.csv", ("resolution", "phase", "row", "col", "value"),
                  rows)
    write_vtk(cell, run.path("cell.vtk"), title=run.header)
    for phase, M in (("i", est.M_i_), ("e", est.M_e_)):
        export_matrix_market(M, run.path(f"M_{phase}.mtx"), comment=run.header)


def _export_operators(run, scheme, stem):
    if run.config["solver"]["export_matrices"]:
        export_matrix_market(scheme.K, run.path(f"{stem}_step_matrix.mtx"), comment=run.header)


def cmd_micro(run):
    cfg = run.config
    mcfg = cfg.micro_config()
    traj = run_micro(mcfg)
    run.write_csv("micro_log.csv", LOG_COLUMNS, _log_rows(traj.log, LOG_COLUMNS))
    save_snapshots(traj, run.path("micro_snapshots.npz"), run.stamp)
    payload = {"eps": mcfg.eps, "n_steps": mcfg.n_steps}
    if len(traj.snapshots) >= 2:
        payload["monitors"] = micro_monitors(traj, mcfg).as_dict()
    run.write_json("micro_summary.json", payload)
    _export_operators(run, mcfg.scheme, "micro")


def cmd_macro(run):
    cfg = run.config
    _, est = _tensors(run)
    mcfg = cfg.macro_config(est.M_i_, est.M_e_)
    traj = run_macro(mcfg)
    res = macro_residuals(traj, mcfg)
    run.write_csv("macro_log.csv", MACRO_LOG_COLUMNS, _log_rows(traj.log, MACRO_LOG_COLUMNS))
    save_snapshots(traj, run.path("macro_snapshots.npz"), run.stamp)
    run.write_json("macro_summary.json", {
        "n": mcfg.n, "M_i": est.M_i_.tolist(), "M_e": est.M_e_.tolist(),
        "max_elliptic_residual": res.max_elliptic,
        "max_constant_mode": float(np.max(np.abs(res.constant_mode), initial=0.0)),
    })
    _export_operators(run, mcfg.scheme, "macro")


def cmd_converge(run):
    report = run_study(run.config.study_config(), threads=run.threads, config_hash=run.config.hash)
    csv_path, json_path = write_report(report, run.out)
    run.files += [csv_path, json_path]


def cmd_unfold_check(run):
    cfg = run.config
    results = []
    for k, N in enumerate(cfg.study_n_cells):
        domain = tile_domain(cfg.cell, N)
        if domain.n_faces == 0:
            raise GeometryError("unfold-check needs a cell with a membrane", "kind")
        for check in identity_suite(domain, np.random.default_rng([cfg["study"]["seed"], k])):
            results.append({"eps": domain.eps, "name": check.name, "error": check.error,
                            "passed": bool(check.passed())})
    passed = all(r["passed"] for r in results)
    run.write_json("unfold_check.json", {"identities_passed": passed, "checks": results})
    if not passed:
        raise NumericalError("unfolding identities violated")
    return {"identities_passed": True}


COMMANDS = {"cell-tensor": cmd_cell_tensor, "micro": cmd_micro, "macro": cmd_macro,
            "converge": cmd_converge, "unfold-check": cmd_unfold_check}


def _error(kind, message, code, details=None):
    payload = {"error": kind, "message": message, "exit_code": code}
    if details:
        payload["details"] = details
    print(json.dumps(payload), file=sys.stderr)
    return code


def dispatch(subcommand, config, out_dir=".", serial=False):
    """Run one subcommand on a parsed configuration; returns the exit status."""
    threads = 1 if serial else thread_count()
    limits = threadpool_limits(1) if threads == 1 else contextlib.nullcontext()
    try:
        with limits:
            run = Run(config, out_dir, threads)
            extra = COMMANDS[subcommand](run) or {}
    except CONFIG_ERRORS as exc:
        return _error("config", str(exc), 2, getattr(exc, "errors", None))
    except NUMERICAL_ERRORS as exc:
        return _error("numerical", str(exc), 1)
    except OSError as exc:
        return _error("io", str(exc), 1)
    except Exception as exc:  # noqa: BLE001
        return _error("internal", f"{type(exc).__name__}: {exc}", 1)
    print(json.dumps({**extra, "subcommand": subcommand, "files": run.files, **run.stamp}))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, json.dumps({"error": "usage", "message": message, "exit_code": 2}) + "\n")


def build_parser():
    parser = _Parser(prog="bidomain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"bidomain {__version__}")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--out", default=".", help="output directory (default: current directory)")
    parser.add_argument("--serial", action="store_true",
                        help="single thread everywhere; outputs are bit-reproducible")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config)
    except ConfigError as exc:
        return _error("config", str(exc), 2, exc.errors)
    try:
        thread_count()
    except ValueError as exc:
        return _error("config", str(exc), 2)
    return dispatch(args.subcommand, config, args.out, args.serial)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Run configuration: TOML parsing, validation, defaults and the content hash.

Every numeric default lives in :data:`DEFAULTS`.  A file only needs the
entries it changes; unknown sections or keys are errors.  The hash is taken
over the normalized configuration with defaults filled in, so formatting,
comments, key order and spelling ``1`` vs ``1.0`` do not change it.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from functools import cached_property

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .convergence import StudyConfig
from .discretize import SolverOptions
from .geometry import CellGeometrySpec, build_unit_cell, tile_domain
from .macro import MacroConfig
from .membrane import MembraneModel
from .micro import MicroConfig

#: Defaults for every section.  ``None`` means "derived", see the comments.
DEFAULTS = {
    "geometry": {
        "kind": "inclusion",      # laminate | inclusion | bridged | full
        "dim": 2,
        "resolution": 8,          # voxels per cell axis, power of two >= 4
        "thickness": 0.5,         # laminate
        "axis": 0,                # laminate normal, zero-based
        "offset": None,           # laminate, default centred
        "half_width": 0.25,       # inclusion / bridged
        "bridge": 0.125,          # bridged
        "eps": 0.25,              # cell size of single micro runs
    },
    "sigma": {
        "i": 1.0,                 # scalar or d x d symmetric positive definite matrix
        "e": 1.0,
    },
    "sources": {
        "preset": "pulse",        # none | constant | pulse
        "amplitude": 8.0,         # pulse height
        "duration": 0.1,          # pulse length
        "i": 0.0,                 # constant preset values
        "e": 0.0,
        "v0": 0.0,
        "w0": 0.0,
    },
    "membrane": {
        "preset": "fitzhugh_nagumo",  # fitzhugh_nagumo | linear | passive | custom
        "a": 0.1,
        "k": 0.5,
        "epsilon": 0.01,
        "rate": 1.0,              # linear preset
        "gating_rate": 0.0,
        "i1": [0.0, 0.0, 0.0, 0.0],   # custom: I = i1(v) + i2[0] w + i2[1] v w
        "i2": [0.0, 0.0],
        "h": [0.0, 0.0, 0.0],     # custom: H = h0 + h1 v + h2 v^2 + c_h1 w
        "c_h1": 0.0,
    },
    "time": {
        "dt": 0.01,
        "T": 1.0,
        "snapshot_stride": 1,
    },
    "solver": {
        "method": "auto",         # auto | direct | cg | amg
        "tol": 1e-10,
        "max_iter": 0,            # 0: 10 sqrt(n)
        "direct_limit": 200_000,
        "export_matrices": False,
    },
    "study": {
        "eps": [0.5, 0.25, 0.125],
        "macro_n": 0,             # 0: finest micro grid, max(1/eps) * resolution
        "seed": 0,
    },
}

_KINDS = {
    "geometry": {"kind": str, "dim": int, "resolution": int, "thickness": float, "axis": int,
                 "offset": "float?", "half_width": "float+", "bridge": float, "eps": float},
    "sigma": {"i": "tensor", "e": "tensor"},
    "sources": {"preset": str, "amplitude": float, "duration": float, "i": float, "e": float,
                "v0": float, "w0": float},
    "membrane": {"preset": str, "a": float, "k": float, "epsilon": float, "rate": float,
                 "gating_rate": float, "i1": "floats4", "i2": "floats2", "h": "floats3", "c_h1": float},
    "time": {"dt": float, "T": float, "snapshot_stride": int},
    "solver": {"method": str, "tol": float, "max_iter": int, "direct_limit": int, "export_matrices": bool},
    "study": {"eps": "floats", "macro_n": int, "seed": int},
}

SOURCE_PRESETS = ("none", "constant", "pulse")
MEMBRANE_PRESETS = ("fitzhugh_nagumo", "linear", "passive", "custom")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _coerce(name, kind, value, errors):
    """Normalize one entry; appends to ``errors`` and returns ``None`` on failure."""
    def bad(expected):
        errors.append(f"{name}: expected {expected}, got {value!r}")

    if kind is str:
        return value if isinstance(value, str) else bad("a string")
    if kind is bool:
        return value if isinstance(value, bool) else bad("true or false")
    if kind is int:
        if _is_number(value) and float(value).is_integer():
            return int(value)
        return bad("an integer")
    if kind is float:
        return float(value) if _is_number(value) and math.isfinite(value) else bad("a finite number")
    if kind == "float?":
        return None if value is None else _coerce(name, float, value, errors)
    if kind == "float+":
        if isinstance(value, list):
            return [_coerce(name, float, v, errors) for v in value]
        return _coerce(name, float, value, errors)
    if kind.startswith("floats"):
        if not isinstance(value, list) or not all(_is_number(v) for v in value):
            return bad("a list of numbers")
        size = kind[len("floats"):]
        if size and len(value) != int(size):
            return bad(f"{size} numbers")
        return [float(v) for v in value]
    if kind == "tensor":
        if _is_number(value):
            return float(value)
        if isinstance(value, list) and all(isinstance(r, list) and all(_is_number(v) for v in r) for r in value):
            return [[float(v) for v in r] for r in value]
        return bad("a number or a matrix")
    raise AssertionError(kind)


def normalize(raw):
    """Fill defaults and coerce types; returns ``(config, errors)``."""
    errors = []
    out = copy.deepcopy(DEFAULTS)
    for section, entries in raw.items():
        if section not in DEFAULTS:
            errors.append(f"unknown section [{section}]")
            continue
        if not isinstance(entries, dict):
            errors.append(f"{section}: expected a table")
            continue
        for key, value in entries.items():
            name = f"{section}.{key}"
            if key not in DEFAULTS[section]:
                errors.append(f"{name}: unknown key")
                continue
            out[section][key] = _coerce(name, _KINDS[section][key], value, errors)
    return out, errors


def _tensor_errors(name, value, dim):
    if value is None:
        return []
    if isinstance(value, float):
        return [] if value > 0 else [f"{name}: conductivity must be positive"]
    M = np.asarray(value)
    if M.shape != (dim, dim):
        return [f"{name}: matrix must be {dim} x {dim}"]
    if np.abs(M - M.T).max() > 1e-12 * max(1.0, np.abs(M).max()):
        return [f"{name}: matrix must be symmetric"]
    if np.linalg.eigvalsh(M)[0] <= 0:
        return [f"{name}: matrix must be positive definite"]
    return []


def _reciprocal(eps):
    """``N`` with ``eps = 1/N``, or ``None``."""
    if not eps > 0:
        return None
    N = round(1.0 / eps)
    return int(N) if N >= 1 and abs(N * eps - 1.0) < 1e-9 else None


def semantic_errors(cfg):
    """Cross-field checks on a normalized configuration."""
    errors = []
    g = cfg["geometry"]
    if all(v is not None for k, v in g.items() if k != "offset"):
        errors += [f"geometry.{e.parameter or 'kind'}: {e}" for e in _geometry_spec(g).validate()]
    if g["eps"] is not None and _reciprocal(g["eps"]) is None:
        errors.append(f"geometry.eps: eps must be 1/N, got {g['eps']}")
    for phase in ("i", "e"):
        errors += _tensor_errors(f"sigma.{phase}", cfg["sigma"][phase], g["dim"] or 2)

    s = cfg["sources"]
    if s["preset"] not in SOURCE_PRESETS:
        errors.append(f"sources.preset: unknown preset {s['preset']!r}; expected one of {SOURCE_PRESETS}")
    if s["duration"] is not None and s["duration"] < 0:
        errors.append("sources.duration: must be nonnegative")

    m = cfg["membrane"]
    if m["preset"] not in MEMBRANE_PRESETS:
        errors.append(f"membrane.preset: unknown preset {m['preset']!r}; expected one of {MEMBRANE_PRESETS}")

    t = cfg["time"]
    if t["dt"] is not None and not t["dt"] > 0:
        errors.append("time.dt: must be positive")
    elif t["T"] is not None and t["dt"] is not None and not t["T"] >= t["dt"]:
        errors.append("time.T: must be at least time.dt")
    if t["snapshot_stride"] is not None and t["snapshot_stride"] < 1:
        errors.append("time.snapshot_stride: must be a positive integer")

    sv = cfg["solver"]
    if sv["method"] not in ("auto", "direct", "cg", "amg"):
        errors.append(f"solver.method: unknown method {sv['method']!r}")
    if sv["tol"] is not None and not sv["tol"] > 0:
        errors.append("solver.tol: must be positive")
    if sv["max_iter"] is not None and sv["max_iter"] < 0:
        errors.append("solver.max_iter: must be nonnegative")

    st = cfg["study"]
    eps = st["eps"]
    if eps is not None:
        if len(eps) == 0:
            errors.append("study.eps: the eps list is empty")
        bad = [e for e in eps if _reciprocal(e) is None]
        if bad:
            errors.append(f"study.eps: eps must be 1/N, got {bad}")
        elif len(eps) and sorted(set(eps), reverse=True) != list(eps):
            errors.append("study.eps: values must be strictly decreasing")
    if st["macro_n"] is not None and st["macro_n"] < 0:
        errors.append("study.macro_n: must be nonnegative")
    return errors


def _geometry_spec(g):
    hw = g["half_width"]
    return CellGeometrySpec(kind=g["kind"], resolution=g["resolution"], dim=g["dim"], thickness=g["thickness"],
                            axis=g["axis"], offset=g["offset"], bridge=g["bridge"],
                            half_width=tuple(hw) if isinstance(hw, list) else hw)


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of a normalized configuration."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class PulseSource:
    """``s(t, x) = amplitude * [t <= duration] * (1 + sign * prod cos(pi x_a))``.

    The intracellular source uses ``sign = +1``, the extracellular one
    ``sign = -1`` with ``amplitude`` scaled by ``-|Y_i|/|Y_e|`` so the joint
    source integral vanishes.
    """

    amplitude: float
    duration: float
    sign: float

    def __call__(self, t, x):
        if t > self.duration + 1e-12:
            return np.zeros(len(x))
        return self.amplitude * (1.0 + self.sign * np.prod(np.cos(np.pi * x), axis=1))


class RunConfig:
    """A validated configuration with typed accessors for every subcommand."""

    def __init__(self, data, path=None):
        self.data = data
        self.path = path
        self.hash = config_hash(data)

    def __getitem__(self, section):
        return self.data[section]

    @cached_property
    def geometry(self):
        return _geometry_spec(self.data["geometry"])

    @cached_property
    def cell(self):
        return build_unit_cell(self.geometry)

    @property
    def n_cells(self):
        return _reciprocal(self.data["geometry"]["eps"])

    @property
    def study_n_cells(self):
        return tuple(_reciprocal(e) for e in self.data["study"]["eps"])

    def sigma(self, phase):
        value = self.data["sigma"][phase]
        return value if isinstance(value, float) else np.asarray(value)

    @cached_property
    def membrane(self):
        m = self.data["membrane"]
        preset = m["preset"]
        if preset == "fitzhugh_nagumo":
            return MembraneModel.fitzhugh_nagumo(a=m["a"], k=m["k"], epsilon=m["epsilon"])
        if preset == "linear":
            return MembraneModel.linear(rate=m["rate"], gating_rate=m["gating_rate"])
        if preset == "passive":
            return MembraneModel.passive()
        return MembraneModel(i1=tuple(m["i1"]), i2=tuple(m["i2"]), h=tuple(m["h"]), c_h1=m["c_h1"], name="custom")

    @cached_property
    def solver(self):
        s = self.data["solver"]
        return SolverOptions(tol=s["tol"], max_iter=s["max_iter"] or None, method=s["method"],
                             direct_limit=s["direct_limit"])

    @cached_property
    def sources(self):
        """``(s_i, s_e)`` as callables ``s(t, x)``, constants or ``None``."""
        s = self.data["sources"]
        if s["preset"] == "none":
            return None, None
        if s["preset"] == "constant":
            return s["i"], s["e"]
        cell = self.cell
        ratio = cell.volume_i / cell.volume_e if cell.volume_e > 0 else 0.0
        return (PulseSource(s["amplitude"], s["duration"], 1.0),
                PulseSource(-s["amplitude"] * ratio, s["duration"], -1.0))

    def micro_config(self, n_cells=None):
        s_i, s_e = self.sources
        t = self.data["time"]
        return MicroConfig(tile_domain(self.cell, n_cells or self.n_cells), self.membrane, t["dt"], t["T"],
                           self.sigma("i"), self.sigma("e"), s_i, s_e, self.data["sources"]["v0"],
                           self.data["sources"]["w0"], snapshot_stride=t["snapshot_stride"], solver=self.solver)

    def study_config(self):
        s_i, s_e = self.sources
        return StudyConfig(self.geometry, n_cells=self.study_n_cells, sigma_i=self.sigma("i"),
                           sigma_e=self.sigma("e"), membrane=self.membrane, s_i=s_i, s_e=s_e,
                           v0=self.data["sources"]["v0"], w0=self.data["sources"]["w0"], dt=self.data["time"]["dt"],
                           T=self.data["time"]["T"], macro_n=self.data["study"]["macro_n"] or None,
                           solver=self.solver)

    def macro_n(self):
        return self.data["study"]["macro_n"] or max(self.study_n_cells) * self.geometry.resolution

    def macro_config(self, M_i, M_e):
        s_i, s_e = self.sources
        t = self.data["time"]
        cell = self.cell
        return MacroConfig(dim=cell.dim, n=self.macro_n(), M_i=M_i, M_e=M_e, area=cell.area,
                           vol_i=cell.volume_i, vol_e=cell.volume_e, membrane=self.membrane, dt=t["dt"],
                           T=t["T"], s_i=s_i, s_e=s_e, v0=self.data["sources"]["v0"],
                           w0=self.data["sources"]["w0"], snapshot_stride=t["snapshot_stride"], solver=self.solver)


def load_config(data, path=None):
    """Validate a parsed TOML mapping; raises :class:`ConfigError` listing all problems."""
    cfg, errors = normalize(data)
    errors += semantic_errors(cfg)
    if errors:
        raise ConfigError(errors)
    return RunConfig(cfg, path)


def parse_config(path):
    """Read and validate a TOML configuration file."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML syntax error: {exc}"]) from None
    return load_config(raw, path)

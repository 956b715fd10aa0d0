"""Periodic cell problems and homogenized conductivity tensors.

For each phase ``j`` and direction ``k`` the corrector ``chi_j^k`` is the
periodic Q1 field on ``Y_j`` with

    int_{Y_j} sigma_j grad chi . grad phi dy = int_{Y_j} sigma_j e_k . grad phi dy

for all periodic Q1 test fields ``phi``, normalised to mean zero on each
connected component.  The effective tensor is

    M_j = int_{Y_j} sigma_j (I - grad chi_j) dy,

column ``k`` using ``chi_j^k``.  For an isolated inclusion ``chi^k = y_k``
up to a constant and ``M_j`` vanishes; for a laminate the normal entry
vanishes.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .discretize import (
    SolverOptions,
    assemble_local,
    element_nodes,
    mass_local,
    reference_q1,
    sample_sigma,
    solve_spd,
    stiffness_local,
)
from .geometry import PHASES, phase_connectivity


class CellProblemError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorrectorField:
    """Correctors of one phase on the periodic node set of ``Y_j``.

    ``values[:, k]`` is ``chi_j^k`` at ``nodes`` (integer coordinates in
    ``0..n-1``).
    """

    phase: str
    nodes: np.ndarray
    values: np.ndarray
    components: np.ndarray
    reports: tuple = field(repr=False)

    def component_means(self, weights):
        n_comp = self.components.max() + 1
        tot = np.bincount(self.components, weights=weights, minlength=n_comp)
        return np.stack([np.bincount(self.components, weights=weights * self.values[:, k],
                                     minlength=n_comp) / tot
                         for k in range(self.values.shape[1])], axis=1)


@dataclass(frozen=True)
class EffectiveTensor:
    phase: str
    matrix: np.ndarray
    provenance: dict


class _PeriodicPhase:
    """Periodic Q1 discretisation of one phase of a unit cell."""

    def __init__(self, cell, phase):
        mask = cell.mask(phase)
        if not mask.any():
            raise CellProblemError(f"phase {phase!r} is empty")
        n, d = cell.resolution, cell.dim
        self.n, self.d, self.h = n, d, 1.0 / n
        self.voxels = np.argwhere(mask)
        nodes = element_nodes(self.voxels, (n,) * d, periodic=True)
        used = np.unique(nodes)
        index = -np.ones(n ** d, dtype=np.int64)
        index[used] = np.arange(len(used))
        self.elem = index[nodes]
        self.n_dofs = len(used)
        self.node_coords = np.stack(np.unravel_index(used, (n,) * d), axis=-1)

    def sigma_at_gauss(self, sigma, x):
        pts, _, _, _ = reference_q1(self.d)
        y = ((self.voxels[:, None, :] + pts[None, :, :]) * self.h).reshape(-1, self.d)
        if not callable(sigma):
            return sample_sigma(sigma, None, None, self.d)
        if x is None:
            raise ValueError("an x-dependent conductivity needs a macroscopic point x")
        xx = np.broadcast_to(np.asarray(x, dtype=float), y.shape)
        vals = sample_sigma(sigma, xx, y, self.d)
        return vals.reshape(len(self.voxels), len(pts), self.d, self.d)


def _sigma_integral(disc, sig):
    if sig.ndim == 2:
        return disc.h ** disc.d * len(disc.elem) * sig
    _, wts, _, _ = reference_q1(disc.d)
    return disc.h ** disc.d * np.einsum("q,eqab->ab", wts, sig)


def _load_vectors(disc, sig):
    """Columns ``int sigma e_k . grad phi``, shape (n_dofs, d)."""
    _, wts, _, grads = reference_q1(disc.d)
    h, d = disc.h, disc.d
    if sig.ndim == 2:
        local = h ** (d - 1) * np.einsum("q,qia,ak->ik", wts, grads, sig)
        local = np.broadcast_to(local, (len(disc.elem),) + local.shape)
    else:
        local = h ** (d - 1) * np.einsum("q,qia,eqak->eik", wts, grads, sig)
    F = np.zeros((disc.n_dofs, d))
    for k in range(d):
        np.add.at(F[:, k], disc.elem.ravel(), local[:, :, k].ravel())
    return F


def _grad_integral(disc, sig, chi):
    """``int sigma grad chi^k`` for each column of ``chi``, shape (d, d)."""
    _, wts, _, grads = reference_q1(disc.d)
    h, d = disc.h, disc.d
    loc = chi[disc.elem]  # (E, L, d_dirs)
    gq = np.einsum("qia,eik->eqak", grads, loc) / h  # grad at Gauss points
    if sig.ndim == 2:
        out = h ** d * np.einsum("q,ab,eqbk->ak", wts, sig, gq)
    else:
        out = h ** d * np.einsum("q,eqab,eqbk->ak", wts, sig, gq)
    return out


def solve_corrector(cell, sigma, phase, directions=None, x=None, options=None, n_jobs=1):
    """Solve the periodic cell problem of ``phase`` for the given directions.

    Returns ``(CorrectorField, sigma samples, discretisation)``.
    """
    options = options or SolverOptions(tol=1e-13)
    disc = _PeriodicPhase(cell, phase)
    d = disc.d
    sig = disc.sigma_at_gauss(sigma, x)
    K = assemble_local(disc.elem, stiffness_local(disc.h, d, sig), disc.n_dofs)
    F = _load_vectors(disc, sig)
    n_comp, comp = connected_components(K, directed=False)
    Z = np.zeros((disc.n_dofs, n_comp))
    Z[np.arange(disc.n_dofs), comp] = 1.0
    mass = assemble_local(disc.elem, mass_local(disc.h, d), disc.n_dofs)
    weights = np.asarray(mass.sum(axis=1)).ravel()
    directions = range(d) if directions is None else directions

    def one(k):
        chi, rep = solve_spd(K, F[:, k], options, nullspace=Z)
        if not rep.converged:
            raise CellProblemError(f"corrector solve did not converge (phase {phase}, k={k}): {rep}")
        tot = np.bincount(comp, weights=weights, minlength=n_comp)
        means = np.bincount(comp, weights=weights * chi, minlength=n_comp) / tot
        return chi - means[comp], rep

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(one, directions))
    else:
        results = [one(k) for k in directions]
    values = np.zeros((disc.n_dofs, d))
    for k, (chi, _) in zip(directions, results):
        values[:, k] = chi
    field_ = CorrectorField(phase, disc.node_coords, values, comp, tuple(r for _, r in results))
    return field_, sig, disc


def effective_tensor(cell, sigma, phase, x=None, options=None, n_jobs=1):
    """Homogenized tensor ``M_j = int_{Y_j} sigma (I - grad chi) dy``."""
    corr, sig, disc = solve_corrector(cell, sigma, phase, x=x, options=options, n_jobs=n_jobs)
    M = _sigma_integral(disc, sig) - _grad_integral(disc, sig, corr.values)
    prov = {
        "geometry": cell.signature(),
        "kind": cell.spec.kind,
        "resolution": cell.resolution,
        "sigma": _describe_sigma(sigma),
        "x": None if x is None else list(np.ravel(x)),
        "iterations": [r.iterations for r in corr.reports],
        "residuals": [r.residual for r in corr.reports],
    }
    return EffectiveTensor(phase, M, prov), corr


def _describe_sigma(sigma):
    if callable(sigma):
        return getattr(sigma, "__name__", "callable")
    return np.asarray(sigma, dtype=float).tolist()


def phase_integral_of_sigma(cell, sigma, phase, x=None):
    """``int_{Y_j} sigma dy`` (the Voigt upper bound for ``M_j``)."""
    disc = _PeriodicPhase(cell, phase)
    return _sigma_integral(disc, disc.sigma_at_gauss(sigma, x))


@dataclass(frozen=True)
class TensorDiagnostics:
    symmetry_defect: float
    eigenvalues: np.ndarray
    voigt_slack: float
    positive_definite: bool
    spans_all_axes: bool

    @property
    def consistent(self):
        """PD exactly when the phase percolates along every axis."""
        return self.positive_definite == self.spans_all_axes

    def as_dict(self):
        return {
            "symmetry_defect": self.symmetry_defect,
            "eigenvalues": self.eigenvalues.tolist(),
            "voigt_slack": self.voigt_slack,
            "positive_definite": self.positive_definite,
            "spans_all_axes": self.spans_all_axes,
            "consistent": self.consistent,
        }


def tensor_diagnostics(tensor, cell, sigma, pd_tol=1e-8):
    M = tensor.matrix
    sym = 0.5 * (M + M.T)
    eig = np.linalg.eigvalsh(sym)
    x = tensor.provenance.get("x")
    voigt = phase_integral_of_sigma(cell, sigma, tensor.phase, x=None if x is None else np.asarray(x))
    slack = float(np.linalg.eigvalsh(0.5 * (voigt + voigt.T) - sym)[0])
    scale = max(np.abs(eig).max(), 1.0)
    conn = phase_connectivity(cell, tensor.phase)
    return TensorDiagnostics(
        symmetry_defect=float(np.abs(M - M.T).max()),
        eigenvalues=eig,
        voigt_slack=slack,
        positive_definite=bool(eig[0] > pd_tol * scale),
        spans_all_axes=conn.spans_all_axes,
    )


class CellProblemHomogenizer(BaseEstimator):
    """Compute homogenized conductivities of a unit cell.

    Parameters
    ----------
    sigma_i, sigma_e : float, array of shape (d, d), or callable
        Phase conductivities; callables are ``sigma(x, y)`` returning
        ``(P, d, d)`` and are sampled at the cell Gauss points.
    tol : float
        Relative CG tolerance of the corrector solves.
    n_jobs : int
        Threads for the independent direction solves.

    Attributes
    ----------
    M_i_, M_e_ : ndarray of shape (d, d)
        Fitted tensors; x-dependent conductivities are evaluated at the
        centre of the unit cube (use :meth:`predict` elsewhere).
    tensors_ : dict
        ``EffectiveTensor`` per phase (absent for empty phases).
    correctors_ : dict
        ``CorrectorField`` per phase.
    diagnostics_ : dict
        ``TensorDiagnostics`` per phase.
    """

    def __init__(self, sigma_i=1.0, sigma_e=1.0, tol=1e-13, n_jobs=1):
        self.sigma_i = sigma_i
        self.sigma_e = sigma_e
        self.tol = tol
        self.n_jobs = n_jobs

    def _sigma(self, phase):
        return self.sigma_i if phase == "i" else self.sigma_e

    def fit(self, cell, y=None):
        self.cell_ = cell
        self.tensors_, self.correctors_, self.diagnostics_ = {}, {}, {}
        opts = SolverOptions(tol=self.tol)
        for phase in PHASES:
            if not cell.mask(phase).any():
                continue
            sigma = self._sigma(phase)
            x = np.full(cell.dim, 0.5) if callable(sigma) else None
            tens, corr = effective_tensor(cell, sigma, phase, x=x, options=opts, n_jobs=self.n_jobs)
            self.tensors_[phase] = tens
            self.correctors_[phase] = corr
            self.diagnostics_[phase] = tensor_diagnostics(tens, cell, self._sigma(phase))
        d = cell.dim
        self.M_i_ = self.tensors_["i"].matrix if "i" in self.tensors_ else np.zeros((d, d))
        self.M_e_ = self.tensors_["e"].matrix if "e" in self.tensors_ else np.zeros((d, d))
        return self

    def predict(self, X):
        """Tabulate ``(M_i(x), M_e(x))`` at macroscopic points ``X``.

        Returns an array of shape ``(P, 2, d, d)``.  Constant conductivities
        reuse the fitted tensors; x-dependent ones solve one cell problem per
        point.
        """
        check_is_fitted(self, "tensors_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = self.cell_.dim
        out = np.zeros((len(X), 2, d, d))
        opts = SolverOptions(tol=self.tol)
        for j, phase in enumerate(PHASES):
            if phase not in self.tensors_:
                continue
            sigma = self._sigma(phase)
            if not callable(sigma):
                out[:, j] = self.tensors_[phase].matrix
                continue
            for p, x in enumerate(X):
                out[p, j] = effective_tensor(self.cell_, sigma, phase, x=x, options=opts)[0].matrix
        return out

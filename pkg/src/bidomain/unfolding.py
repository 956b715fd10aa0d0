"""Discrete unfolding operators on ``eps``-periodic tilings.

Since the membrane and phase nodes of every cell are translates of the
reference-cell nodes, unfolding is a gather: the value at ``(k, y_r)`` is the
nodal value at ``eps * (k + y_r)``.  Integrals over ``Omega x Y`` are sums over
cells of reference-cell quadratures times the cell volume ``eps^d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from sklearn.base import BaseEstimator, TransformerMixin

from .discretize import (assemble_local, assemble_surface_mass, element_nodes, integrate_norm, mass_local,
                         reference_face_mass, stiffness_local)
from .geometry import PHASES, face_node_corners

TARGETS = ("gamma",) + PHASES


class ReferenceOperators:
    """Mass and stiffness matrices on the closed reference cell of a tiling."""

    def __init__(self, domain):
        cell = domain.cell
        n, d = cell.resolution, cell.dim
        self.dim, self.resolution = d, n
        shape = (n + 1,) * d
        self.shape = shape
        self.membrane_ids = np.ravel_multi_index(tuple(domain.ref_membrane_nodes.T), shape)
        self.phase_ids = {j: np.ravel_multi_index(tuple(domain.ref_phase_nodes[j].T), shape) for j in PHASES}
        corners = face_node_corners(cell.face_axis, cell.face_corner, d)
        face_ids = np.ravel_multi_index(tuple(np.moveaxis(corners, -1, 0)), shape)
        self.face_dofs = np.searchsorted(self.membrane_ids, face_ids)
        self.face_axis = cell.face_axis
        self.face_corner = cell.face_corner
        self.surface_mass = assemble_local(self.face_dofs, (1.0 / n) ** (d - 1) * reference_face_mass(d),
                                           len(self.membrane_ids))
        self.mass, self.stiffness, self.trace = {}, {}, {}
        for j in PHASES:
            vox = np.argwhere(cell.mask(j))
            elem = np.searchsorted(self.phase_ids[j], element_nodes(vox, shape))
            m = len(self.phase_ids[j])
            self.mass[j] = assemble_local(elem, mass_local(1.0 / n, d), m)
            self.stiffness[j] = assemble_local(elem, stiffness_local(1.0 / n, d), m)
            if len(self.membrane_ids):
                self.trace[j] = np.searchsorted(self.phase_ids[j], self.membrane_ids)

    def weight(self, target):
        return self.surface_mass if target == "gamma" else self.mass[target]

    def coords(self, target):
        ids = self.membrane_ids if target == "gamma" else self.phase_ids[target]
        return np.stack(np.unravel_index(ids, self.shape), axis=-1) / self.resolution


def reference_operators(domain):
    cache = domain.__dict__.setdefault("_operator_cache", {})
    if "reference" not in cache:
        cache["reference"] = ReferenceOperators(domain)
    return cache["reference"]


@dataclass(frozen=True, eq=False)
class UnfoldedField:
    """Values on ``Omega x Gamma`` or ``Omega x Y_j``: one row per cell, one column per reference node.

    Rows are constant in ``x`` over each ``eps``-cell.
    """

    target: str
    values: np.ndarray
    eps: float
    ref: ReferenceOperators

    @property
    def dim(self):
        return self.ref.dim

    def _check(self, other):
        if not isinstance(other, UnfoldedField):
            return other
        if other.target != self.target or other.values.shape != self.values.shape or other.ref is not self.ref:
            raise ValueError("unfolded fields live on different product domains")
        return other.values

    def __add__(self, other):
        return UnfoldedField(self.target, self.values + self._check(other), self.eps, self.ref)

    def __sub__(self, other):
        return UnfoldedField(self.target, self.values - self._check(other), self.eps, self.ref)

    def __mul__(self, other):
        return UnfoldedField(self.target, self.values * self._check(other), self.eps, self.ref)

    __rmul__ = __mul__

    def integral(self):
        """``int_Omega int_Y f dy dx`` (surface measure for ``gamma``)."""
        W = self.ref.weight(self.target)
        return float(self.eps ** self.dim * np.sum(self.values @ W))

    def restrict_to_membrane(self):
        """Trace of a volume field on ``Omega x Gamma``."""
        if self.target == "gamma":
            return self
        return UnfoldedField("gamma", np.take(self.values, self.ref.trace[self.target], axis=-1),
                             self.eps, self.ref)


def _check_length(field, n, what):
    field = np.asarray(field)
    if field.shape[-1] != n:
        raise ValueError(f"field of length {field.shape[-1]} does not match the {what} DOF map ({n})")
    return field


def unfold_boundary(v, domain):
    """Boundary unfolding of a membrane field."""
    v = _check_length(v, domain.n_membrane, "membrane")
    return UnfoldedField("gamma", np.take(v, domain.cell_membrane_dofs, axis=-1), domain.eps,
                         reference_operators(domain))


def unfold_volume(u, domain, phase):
    """Volume unfolding of a phase field onto ``Omega x Y_phase``."""
    u = _check_length(u, domain.n_dofs(phase), f"phase-{phase}")
    return UnfoldedField(phase, np.take(u, domain.cell_phase_dofs[phase], axis=-1), domain.eps,
                         reference_operators(domain))


def cell_averages(u, domain, phase):
    """Mean of the unfolded field over ``Y_phase`` in each cell."""
    f = unfold_volume(u, domain, phase)
    W = f.ref.mass[phase]
    return (f.values @ (W @ np.ones(W.shape[0]))) / domain.cell.volume(phase)


def cell_average_interpolant(avg, domain):
    """Q1 interpolant of cell averages at cell centres, extended by the nearest centre."""
    N, d = domain.n_cells, domain.dim
    grid = np.asarray(avg).reshape((N,) * d)
    if N == 1:
        return lambda x: np.full(len(x), float(grid.ravel()[0]))
    centres = (np.arange(N) + 0.5) / N
    f = RegularGridInterpolator([centres] * d, grid, method="linear")
    return lambda x: f(np.clip(x, centres[0], centres[-1]))


def local_average_and_interpolant(u, domain, phase):
    """Cell averages ``M_eps(u)`` and the interpolant ``Q_eps(u)`` at the phase nodes."""
    avg = cell_averages(u, domain, phase)
    Q = cell_average_interpolant(avg, domain)(domain.phase_coords(phase))
    return avg, Q


def unfolded_norm(field, which="L2", max_pairs=4_000_000):
    """L2 norm on the product domain, or the cell-averaged Gagliardo H^(1/2) seminorm on Gamma.

    The seminorm collocates at face midpoints, drops the singular diagonal
    and uses the kernel ``|y - y'|^(-d)``; it refuses membranes with more
    than ``sqrt(max_pairs)`` faces.
    """
    if which == "L2":
        W = field.ref.weight(field.target)
        total = np.einsum("kr,kr->", field.values, field.values @ W)
        return math.sqrt(max(field.eps ** field.dim * float(total), 0.0))
    if which != "H12_gagliardo":
        raise ValueError(f"unknown norm {which!r}")
    if field.target != "gamma":
        raise ValueError("the Gagliardo seminorm is defined on the membrane")
    ref = field.ref
    F = len(ref.face_dofs)
    if F * F > max_pairs:
        raise ValueError(f"Gagliardo seminorm on {F} faces exceeds the pair limit {max_pairs}")
    d, n = ref.dim, ref.resolution
    mid = (ref.face_corner + 0.5) / n
    mid[np.arange(F), ref.face_axis] -= 0.5 / n
    area = (1.0 / n) ** (d - 1)
    vals = field.values[:, ref.face_dofs].mean(axis=2)
    dist = np.linalg.norm(mid[:, None, :] - mid[None, :, :], axis=2)
    kernel = np.zeros_like(dist)
    off = dist > 0
    kernel[off] = area * area / dist[off] ** d
    diff2 = (vals[:, :, None] - vals[:, None, :]) ** 2
    per_cell = np.einsum("kfg,fg->k", diff2, kernel)
    return math.sqrt(float(per_cell.mean()))


def product_domain_distance(v_of_x, domain, order=3):
    """``|T_eps^b(v) - v|_{L2(Omega x Gamma)}`` for a smooth ``v(x)`` sampled on the membrane.

    The ``x``-integral over each cell uses a Gauss rule of ``order`` points
    per axis; the ``y``-integral uses the membrane mass on nodal values.
    """
    ref = reference_operators(domain)
    T = unfold_boundary(v_of_x(domain.membrane_coords()), domain).values
    g, w = np.polynomial.legendre.leggauss(order)
    g, w = 0.5 * (g + 1.0), 0.5 * w
    d, eps = domain.dim, domain.eps
    pts = np.array(np.meshgrid(*([g] * d), indexing="ij")).reshape(d, -1).T
    wts = np.prod(np.array(np.meshgrid(*([w] * d), indexing="ij")).reshape(d, -1), axis=0)
    ks = domain.cell_index()
    total = 0.0
    for q, wq in zip(pts, wts):
        xv = v_of_x(eps * (ks + q))
        diff = T - xv[:, None]
        total += wq * float(np.einsum("kr,kr->", diff, diff @ ref.surface_mass))
    return math.sqrt(eps ** d * total)


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    lhs: float
    rhs: float

    @property
    def error(self):
        return abs(self.lhs - self.rhs) / max(1.0, abs(self.rhs))

    def passed(self, tol=1e-12):
        return self.error <= tol


def identity_suite(domain, rng=None):
    """Evaluate the unfolding identities on random fields of ``domain``.

    Returns a list of :class:`IdentityCheck`; errors are relative to
    ``max(1, |rhs|)``.
    """
    rng = np.random.default_rng(rng)
    eps = domain.eps
    v1 = rng.standard_normal(domain.n_membrane)
    v2 = rng.standard_normal(domain.n_membrane)
    S = assemble_surface_mass(domain)
    out = [
        IdentityCheck("integration_formula", unfold_boundary(v1, domain).integral(),
                      eps * float(np.sum(S @ v1))),
        IdentityCheck("boundary_norm", unfolded_norm(unfold_boundary(v1, domain)),
                      math.sqrt(eps) * integrate_norm(v1, domain, "L2_surface")),
    ]
    prod = unfold_boundary(v1 * v2, domain)
    fac = unfold_boundary(v1, domain) * unfold_boundary(v2, domain)
    out.append(IdentityCheck("product_rule", float(np.abs(prod.values - fac.values).max()), 0.0))
    for j in PHASES:
        u = rng.standard_normal(domain.n_dofs(j))
        T = unfold_volume(u, domain, j)
        K = T.ref.stiffness[j]
        out.append(IdentityCheck(f"volume_norm_{j}", unfolded_norm(T), integrate_norm(u, domain, "L2", j)))
        grad_y = math.sqrt(eps ** domain.dim * float(np.einsum("kr,kr->", T.values, T.values @ K)))
        out.append(IdentityCheck(f"gradient_scaling_{j}", grad_y, eps * integrate_norm(u, domain, "H1", j)))
        tr = unfold_boundary(u[domain.membrane_to_phase[j]], domain)
        out.append(IdentityCheck(f"trace_compatibility_{j}",
                                 float(np.abs(T.restrict_to_membrane().values - tr.values).max()), 0.0))
    return out


# --------------------------------------------------------------------------
# estimator wrappers


class BoundaryUnfolder(TransformerMixin, BaseEstimator):
    """Map membrane fields (rows of ``X``) to flattened ``(cell, reference node)`` values."""

    def fit(self, domain, y=None):
        self.domain_ = domain
        self.n_cells_ = domain.n_cells ** domain.dim
        self.n_reference_ = domain.cell_membrane_dofs.shape[1]
        return self

    def transform(self, X):
        X = np.atleast_2d(X)
        return unfold_boundary(X, self.domain_).values.reshape(len(X), -1)

    def inverse_transform(self, Z):
        Z = np.atleast_2d(Z).reshape(-1, self.n_cells_, self.n_reference_)
        out = np.zeros((len(Z), self.domain_.n_membrane))
        out[:, self.domain_.cell_membrane_dofs] = Z
        return out


class VolumeUnfolder(TransformerMixin, BaseEstimator):
    """Volume unfolding of phase fields; ``phase`` is ``"i"`` or ``"e"``."""

    def __init__(self, phase="e"):
        self.phase = phase

    def fit(self, domain, y=None):
        if self.phase not in PHASES:
            raise ValueError("phase must be 'i' or 'e'")
        self.domain_ = domain
        self.dofs_ = domain.cell_phase_dofs[self.phase]
        return self

    def transform(self, X):
        X = np.atleast_2d(X)
        return unfold_volume(X, self.domain_, self.phase).values.reshape(len(X), -1)

    def inverse_transform(self, Z):
        Z = np.atleast_2d(Z).reshape((-1,) + self.dofs_.shape)
        out = np.zeros((len(Z), self.domain_.n_dofs(self.phase)))
        out[:, self.dofs_] = Z
        return out

"""Structured-grid Q1 finite elements, sparse assembly and a projected PCG.

Elements are the voxels of a phase; local nodes follow the binary corner
order of :func:`bidomain.geometry.corner_offsets`.  Quadrature is the
tensor-product 2-point Gauss rule, exact for the Q1 mass and stiffness
integrands with piecewise constant coefficients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import PHASES, corner_offsets, face_node_corners

_G = 0.5 / math.sqrt(3.0)
GAUSS_POINTS_1D = np.array([0.5 - _G, 0.5 + _G])
GAUSS_WEIGHTS_1D = np.array([0.5, 0.5])


class EllipticityError(ValueError):
    """A conductivity sample is not symmetric positive definite."""


class InconsistentSystemError(ValueError):
    """Right-hand side of a singular system has a nullspace component."""


class DegenerateGeometryError(ValueError):
    """An operator was requested on an empty membrane or phase."""


class NumericalError(RuntimeError):
    """A linear solve failed to converge or a field became non-finite."""


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    projected: bool


@dataclass(frozen=True)
class SolverOptions:
    """Linear solver settings.

    ``method`` is ``"direct"`` (sparse LU), ``"cg"`` (Jacobi PCG), ``"amg"``
    (CG preconditioned by smoothed aggregation) or ``"auto"``, which picks
    the direct solver for planar stencils (at most 20 nonzeros per row on
    average, which admits coupled two-field Q1 systems in 2D but not the
    27-point 3D stencil) up to ``direct_limit`` unknowns and AMG otherwise;
    LU fill-in makes volume stencils expensive.  ``max_iter=None`` means ``10 * sqrt(n)`` CG
    iterations.
    """

    tol: float = 1e-10
    max_iter: int | None = None
    atol: float = 0.0
    method: str = "auto"
    direct_limit: int = 200_000

    def __post_init__(self):
        if self.method not in ("auto", "direct", "cg", "amg"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not self.tol > 0:
            raise ValueError("solver tolerance must be positive")


def reference_q1(dim):
    """Gauss points, weights, shape values and gradients on the unit cube.

    Returns ``(points (Q, d), weights (Q,), values (Q, L), grads (Q, L, d))``
    with ``L = 2^d`` local nodes.
    """
    offs = corner_offsets(dim)
    pts = np.array(np.meshgrid(*([GAUSS_POINTS_1D] * dim), indexing="ij")).reshape(dim, -1).T
    wts = np.prod(np.array(np.meshgrid(*([GAUSS_WEIGHTS_1D] * dim), indexing="ij")).reshape(dim, -1), axis=0)
    # 1D factors: value c*xi + (1-c)*(1-xi), derivative 2c-1
    fac = np.where(offs[None, :, :] == 1, pts[:, None, :], 1.0 - pts[:, None, :])
    vals = np.prod(fac, axis=2)
    grads = np.empty(vals.shape + (dim,))
    for a in range(dim):
        other = np.prod(np.delete(fac, a, axis=2), axis=2)
        grads[:, :, a] = (2 * offs[None, :, a] - 1) * other
    return pts, wts, vals, grads


def reference_face_mass(dim):
    """Consistent mass matrix of a unit (d-1)-dimensional Q1 face."""
    m1 = np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]])
    out = np.ones((1, 1))
    for _ in range(dim - 1):
        out = np.kron(out, m1)
    return out


def sample_sigma(sigma, x, y, dim, check=True):
    """Evaluate a conductivity description at points.

    ``sigma`` is a scalar, a ``(d, d)`` array, or a callable ``sigma(x, y)``
    returning ``(P, d, d)`` (or ``(P,)`` for isotropic values).  Constants are
    returned unexpanded as a ``(d, d)`` matrix.
    """
    if callable(sigma):
        vals = np.asarray(sigma(x, y), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None, None] * np.eye(dim)
        if vals.shape != (len(x), dim, dim):
            raise ValueError(f"conductivity sampler returned shape {vals.shape}")
        if check:
            _check_spd(vals, x)
        return vals
    mat = np.asarray(sigma, dtype=float)
    if mat.ndim == 0:
        mat = mat * np.eye(dim)
    if mat.shape != (dim, dim):
        raise ValueError(f"conductivity must be scalar or {dim}x{dim}")
    if check:
        _check_spd(mat[None], np.zeros((1, dim)))
    return mat


def _check_spd(mats, x):
    sym_defect = np.abs(mats - np.swapaxes(mats, 1, 2)).max(axis=(1, 2))
    bad = np.flatnonzero(sym_defect > 1e-12 * np.maximum(1.0, np.abs(mats).max(axis=(1, 2))))
    if bad.size:
        raise EllipticityError(f"conductivity not symmetric at x={x[bad[0]]}")
    lam = np.linalg.eigvalsh(mats)[:, 0]
    bad = np.flatnonzero(lam <= 0)
    if bad.size:
        raise EllipticityError(
            f"conductivity not positive definite at x={x[bad[0]]} (min eigenvalue {lam[bad[0]]:.3g})")


def _coo_sum(rows, cols, data, shape):
    mat = sp.coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()
    mat.sum_duplicates()
    mat.eliminate_zeros()
    return mat


def assemble_local(elem_dofs, local, n_dofs, chunk=100_000):
    """Scatter element matrices into a CSR matrix.

    ``local`` is either one ``(L, L)`` matrix shared by all elements or an
    ``(E, L, L)`` stack.  Duplicates are summed in element order.
    """
    E, L = elem_dofs.shape
    out = sp.csr_matrix((n_dofs, n_dofs))
    for start in range(0, max(E, 1), chunk):
        ed = elem_dofs[start:start + chunk]
        if len(ed) == 0:
            break
        rows = np.repeat(ed[:, :, None], L, axis=2)
        cols = np.repeat(ed[:, None, :], L, axis=1)
        if local.ndim == 2:
            data = np.broadcast_to(local, (len(ed), L, L))
        else:
            data = local[start:start + chunk]
        out = out + _coo_sum(rows, cols, np.ascontiguousarray(data), (n_dofs, n_dofs))
    out.sort_indices()
    return out


def stiffness_local(h, dim, sigma_q=None):
    """Q1 element stiffness for voxel size ``h``.

    ``sigma_q`` is ``None`` (identity), a ``(d, d)`` constant, or ``(E, Q, d, d)``
    samples at the Gauss points of each element.
    """
    _, wts, _, grads = reference_q1(dim)
    scale = h ** (dim - 2)
    if sigma_q is None:
        return scale * np.einsum("q,qia,qja->ij", wts, grads, grads)
    sigma_q = np.asarray(sigma_q, dtype=float)
    if sigma_q.ndim == 2:
        return scale * np.einsum("q,qia,ab,qjb->ij", wts, grads, sigma_q, grads)
    return scale * np.einsum("q,qia,eqab,qjb->eij", wts, grads, sigma_q, grads, optimize=True)


def mass_local(h, dim):
    _, wts, vals, _ = reference_q1(dim)
    return h ** dim * np.einsum("q,qi,qj->ij", wts, vals, vals)


def element_nodes(voxels, shape, periodic=False):
    """Global node ids of each voxel's corners, shape (E, 2^d)."""
    dim = voxels.shape[1]
    offs = corner_offsets(dim)
    coords = voxels[:, None, :] + offs[None, :, :]
    if periodic:
        coords = coords % np.asarray(shape)
    return np.ravel_multi_index(tuple(np.moveaxis(coords, -1, 0)), shape)


def gauss_points_of(voxels, h):
    """Physical Gauss points of each voxel, shape (E, Q, d)."""
    pts, _, _, _ = reference_q1(voxels.shape[1])
    return (voxels[:, None, :] + pts[None, :, :]) * h


def _sigma_at_gauss(sigma, voxels, h, cell_resolution, dim):
    """Sample ``sigma(x, y)`` at Gauss points; ``y`` is the exact fast variable."""
    if not callable(sigma):
        return sample_sigma(sigma, None, None, dim)
    pts, _, _, _ = reference_q1(dim)
    local = (voxels % cell_resolution)[:, None, :] + pts[None, :, :]
    y = (local / cell_resolution).reshape(-1, dim)
    x = ((voxels[:, None, :] + pts[None, :, :]) * h).reshape(-1, dim)
    vals = sample_sigma(sigma, x, y, dim)
    return vals.reshape(len(voxels), len(pts), dim, dim)


def _cached(domain, key, builder):
    cache = domain.__dict__.setdefault("_operator_cache", {})
    if key not in cache:
        cache[key] = builder()
    return cache[key]


def assemble_stiffness(domain, phase, sigma=1.0):
    """Stiffness matrix of ``int sigma grad u . grad phi`` over phase ``phase``.

    ``sigma`` is sampled as ``sigma(x, x/eps)`` at the Gauss points of each
    phase voxel.
    """
    vox = domain.phase_voxels[phase]
    elem = domain.phase_index[phase][element_nodes(vox, domain.node_shape)]
    sig = _sigma_at_gauss(sigma, vox, domain.h, domain.cell.resolution, domain.dim)
    local = stiffness_local(domain.h, domain.dim, sig)
    return assemble_local(elem, local, domain.n_dofs(phase))


def assemble_mass(domain, phase):
    """Consistent Q1 mass matrix over phase ``phase``."""
    def build():
        vox = domain.phase_voxels[phase]
        elem = domain.phase_index[phase][element_nodes(vox, domain.node_shape)]
        return assemble_local(elem, mass_local(domain.h, domain.dim), domain.n_dofs(phase))
    return _cached(domain, ("mass", phase), build)


def _membrane_face_dofs(domain):
    corners = face_node_corners(domain.face_axis, domain.face_corner, domain.dim)
    ids = np.ravel_multi_index(tuple(np.moveaxis(corners, -1, 0)), domain.node_shape)
    return np.searchsorted(domain.membrane_nodes, ids)


def assemble_surface_mass(domain, lumped=False):
    """Mass matrix on the membrane DOFs, ``int_Gamma u phi dS``.

    Raises
    ------
    DegenerateGeometryError
        If the domain has no membrane.
    """
    if domain.n_faces == 0:
        raise DegenerateGeometryError("membrane is empty")

    def build():
        local = domain.h ** (domain.dim - 1) * reference_face_mass(domain.dim)
        return assemble_local(_membrane_face_dofs(domain), local, domain.n_membrane)

    mass = _cached(domain, ("surface_mass",), build)
    if lumped:
        return sp.diags(np.asarray(mass.sum(axis=1)).ravel()).tocsr()
    return mass


def trace_operator(domain, phase):
    """Sparse restriction from phase DOFs to membrane DOFs."""
    cols = domain.membrane_to_phase[phase]
    n = domain.n_membrane
    return sp.csr_matrix((np.ones(n), (np.arange(n), cols)), shape=(n, domain.n_dofs(phase)))


def export_matrix_market(matrix, path, comment=""):
    """Write a sparse operator in Matrix Market coordinate format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)


# --------------------------------------------------------------------------
# solver


def _orthonormal_columns(nullspace, n):
    if nullspace is None:
        return None
    Z = np.asarray(nullspace, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != n:
        raise ValueError("nullspace basis has wrong length")
    q, _ = np.linalg.qr(Z)
    return q


def solve_spd(A, b, options=None, *, x0=None, nullspace=None, consistency_tol=1e-8, preconditioner=None):
    """Jacobi-preconditioned conjugate gradients for symmetric PSD ``A``.

    With a ``nullspace`` basis (vector or ``(n, m)`` array) the right-hand
    side, residual, preconditioned residual and iterate are projected onto
    its orthogonal complement each iteration, so the returned solution has no
    nullspace component.  ``preconditioner`` replaces the Jacobi sweep by any
    symmetric positive definite map ``r -> z``.

    Returns
    -------
    x : ndarray
    report : SolveReport
        ``converged`` is False when ``max_iter`` was reached.

    Raises
    ------
    InconsistentSystemError
        If the nullspace component of ``b`` exceeds ``consistency_tol * |b|``.
    """
    options = options or SolverOptions()
    b = np.asarray(b, dtype=float)
    n = len(b)
    max_iter = options.max_iter or max(10 * int(math.ceil(math.sqrt(n))), 50)
    Z = _orthonormal_columns(nullspace, n)

    diag = A.diagonal()
    # right-hand sides below this are roundoff of an exactly zero load
    floor = 1e-14 * math.sqrt(n) * max(float(np.abs(diag).max(initial=0.0)), np.finfo(float).tiny)
    if Z is not None:
        def proj(r):
            return r - Z @ (Z.T @ r)
        comp = np.linalg.norm(Z.T @ b)
        if comp > consistency_tol * np.linalg.norm(b) + floor:
            raise InconsistentSystemError(
                f"right-hand side has nullspace component {comp:.3e} (|b| = {np.linalg.norm(b):.3e})")
        b = proj(b)
    else:
        def proj(r):
            return r

    dinv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    x = np.zeros(n) if x0 is None else proj(np.array(x0, dtype=float))
    bnorm = np.linalg.norm(b)
    threshold = max(options.tol * bnorm, options.atol)
    r = proj(b - A @ x)
    rnorm = np.linalg.norm(r)
    if bnorm <= floor:
        return np.zeros(n), SolveReport(0, 0.0, True, Z is not None)
    if rnorm <= threshold:
        return x, SolveReport(0, rnorm / bnorm, True, Z is not None)
    if preconditioner is None:
        def precond(r):
            return dinv * r
    else:
        precond = preconditioner
    z = proj(precond(r))
    p = z.copy()
    rz = r @ z
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        r = proj(r)
        rnorm = np.linalg.norm(r)
        if rnorm <= threshold:
            converged = True
            break
        z = proj(precond(r))
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    x = proj(x)
    return x, SolveReport(it, rnorm / bnorm, converged, Z is not None)


class ConstantNullspaceSolver:
    """Repeated solves with a fixed symmetric PSD matrix whose kernel is the constants.

    The right-hand side is projected onto the mean-zero subspace after a
    consistency check and the solution is returned with zero mean.  The
    direct method factorizes once with the last unknown pinned to zero.
    """

    def __init__(self, A, options=None):
        self.A = sp.csr_matrix(A)
        self.options = options or SolverOptions()
        n = self.A.shape[0]
        self.n = n
        method = self.options.method
        if method == "auto":
            planar = self.A.nnz <= 20 * n
            method = "direct" if (planar and n <= self.options.direct_limit) or n <= 2000 else "amg"
        self.method = method
        self._ones = np.ones(n) / math.sqrt(n)
        self._lu = None
        self._precond = None
        if method == "direct" and n > 1:
            reduced = self.A[:-1, :-1].tocsc()
            self._lu = spla.splu(reduced)
        elif method == "amg":
            self._precond = _amg_preconditioner(self.A)

    def solve(self, b, x0=None):
        b = np.asarray(b, dtype=float)
        if self.method != "direct" or self.n == 1:
            return solve_spd(self.A, b, self.options, x0=x0, nullspace=self._ones,
                             preconditioner=self._precond)
        diag_max = float(np.abs(self.A.diagonal()).max(initial=0.0))
        floor = 1e-14 * math.sqrt(self.n) * max(diag_max, np.finfo(float).tiny)
        comp = abs(self._ones @ b)
        bnorm = np.linalg.norm(b)
        if comp > 1e-8 * bnorm + floor:
            raise InconsistentSystemError(
                f"right-hand side has nullspace component {comp:.3e} (|b| = {bnorm:.3e})")
        b = b - self._ones * (self._ones @ b)
        bnorm = np.linalg.norm(b)
        if bnorm <= floor:
            return np.zeros(self.n), SolveReport(0, 0.0, True, True)
        x = np.zeros(self.n)
        x[:-1] = self._lu.solve(b[:-1])
        x -= x.mean()
        res = np.linalg.norm(self.A @ x - b) / bnorm
        return x, SolveReport(1, res, bool(res <= max(self.options.tol, 1e-8)), True)


def _amg_preconditioner(A):
    import pyamg

    # the spectral radius estimate inside pyamg draws from the global RNG
    saved = np.random.get_state()
    np.random.seed(0)
    try:
        ml = pyamg.smoothed_aggregation_solver(A, B=np.ones((A.shape[0], 1)), symmetry="symmetric")
    finally:
        np.random.set_state(saved)
    M = ml.aspreconditioner(cycle="V")
    return lambda r: M @ r


# --------------------------------------------------------------------------
# norms


def integrate_norm(field, domain, which, phase=None):
    """Norm of a Q1 field on a tiled domain.

    ``which`` is one of ``"L2"`` (volume, needs ``phase``), ``"H1"`` (seminorm,
    needs ``phase``), ``"L2_surface"`` or ``"L4_surface"`` (membrane DOFs).
    The L2 and H1 values are exact for Q1 fields; the L4 surface norm uses
    Gauss quadrature on each face.
    """
    field = np.asarray(field, dtype=float)
    if which in ("L2", "H1"):
        if phase not in PHASES:
            raise ValueError("volume norms need phase 'i' or 'e'")
        if len(field) != domain.n_dofs(phase):
            raise ValueError("field does not match the phase DOF map")
        if which == "L2":
            mat = assemble_mass(domain, phase)
        else:
            mat = _cached(domain, ("stiffness_identity", phase),
                          lambda: assemble_stiffness(domain, phase, 1.0))
        return math.sqrt(max(field @ (mat @ field), 0.0))
    if len(field) != domain.n_membrane:
        raise ValueError("field does not match the membrane DOF map")
    if which == "L2_surface":
        mass = assemble_surface_mass(domain)
        return math.sqrt(max(field @ (mass @ field), 0.0))
    if which == "L4_surface":
        return surface_lp(field, domain, 4)
    raise ValueError(f"unknown norm {which!r}")


def surface_lp(field, domain, p):
    """``(int_Gamma |v|^p dS)^(1/p)`` by face-wise Gauss quadrature."""
    d = domain.dim
    pts, wts, vals, _ = reference_q1(d - 1) if d > 1 else (None, None, None, None)
    faces = _cached(domain, ("face_dofs",), lambda: _membrane_face_dofs(domain))
    vq = np.asarray(field)[faces] @ vals.T
    total = domain.h ** (d - 1) * np.sum(np.abs(vq) ** p * wts[None, :])
    return float(total) ** (1.0 / p)

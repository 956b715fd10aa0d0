"""Voxel unit cells and their periodic tilings of the unit cube.

A unit cell is the reference cube ``Y = [0, 1]^d`` split into ``n^d`` voxels,
each labelled intracellular (``True``) or extracellular (``False``).  The
membrane is the set of voxel faces separating the two phases, with periodic
adjacency across the cell boundary.

Tiling a cell ``N`` times per axis gives the oscillating domains of the
microscopic model on ``Omega = (0, 1)^d`` with ``eps = 1/N``.  Node and face
numbering follows C order on the global node grid of ``(N n + 1)^d`` nodes.
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np

PHASES = ("i", "e")
KINDS = ("laminate", "inclusion", "bridged", "full")


class GeometryError(ValueError):
    """Invalid or misaligned geometry parameters.

    ``parameter`` names the offending field (e.g. ``"thickness"``).
    """

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


def _aligned(value, n):
    """True when ``value * n`` is an integer up to roundoff."""
    return abs(value * n - round(value * n)) < 1e-9


@dataclass(frozen=True)
class CellGeometrySpec:
    """Parameters of a built-in unit cell.

    Parameters
    ----------
    kind : {"laminate", "inclusion", "bridged", "full"}
        ``laminate``: intracellular slab ``offset <= y[axis] < offset + thickness``.
        ``inclusion``: centred intracellular box of the given half-width(s).
        ``bridged``: centred box plus bars of half-width ``bridge`` along
        every axis, so the intracellular phase connects to its neighbours.
        ``full``: the whole cell is intracellular (no membrane).
    resolution : int
        Voxels per axis, a power of two and at least 4.
    dim : int
        2 or 3.
    thickness, axis, offset
        Laminate parameters.  ``axis`` is zero-based; ``offset`` defaults to
        the centred position ``(1 - thickness) / 2``.
    half_width : float or tuple of float
        Inclusion half-widths (per axis or shared).
    bridge : float
        Bridge half-width for ``bridged``.
    """

    kind: str = "inclusion"
    resolution: int = 8
    dim: int = 2
    thickness: float = 0.5
    axis: int = 0
    offset: float | None = None
    half_width: float | tuple = 0.25
    bridge: float = 0.125

    def half_widths(self):
        hw = self.half_width
        if np.ndim(hw) == 0:
            return (float(hw),) * self.dim
        return tuple(float(h) for h in hw)

    def laminate_offset(self):
        if self.offset is None:
            return (1.0 - self.thickness) / 2.0
        return float(self.offset)

    def validate(self):
        """Return a list of ``GeometryError`` (empty when valid)."""
        errors = []
        n = self.resolution
        if self.kind not in KINDS:
            errors.append(GeometryError(f"unknown kind {self.kind!r}; expected one of {KINDS}", "kind"))
            return errors
        if self.dim not in (2, 3):
            errors.append(GeometryError("dimension must be 2 or 3", "dim"))
        if not isinstance(n, (int, np.integer)) or n < 4 or n & (n - 1):
            errors.append(GeometryError("resolution must be a power of two >= 4", "resolution"))
            return errors
        if self.kind == "laminate":
            a = self.thickness
            if not 0.0 < a < 1.0:
                errors.append(GeometryError("thickness must lie in (0, 1)", "thickness"))
            elif not _aligned(a, n):
                errors.append(GeometryError(
                    f"thickness {a} is not aligned to resolution {n} ({a}*{n} is not an integer)",
                    "thickness"))
            if not 0 <= self.axis < self.dim:
                errors.append(GeometryError("axis out of range", "axis"))
            off = self.laminate_offset()
            if not _aligned(off, n):
                errors.append(GeometryError(
                    f"laminate offset {off} is not aligned to resolution {n}", "offset"))
            elif off < 0 or off + a > 1 + 1e-12:
                errors.append(GeometryError("laminate must fit inside the cell", "offset"))
        elif self.kind in ("inclusion", "bridged"):
            hws = self.half_widths()
            if len(hws) != self.dim:
                errors.append(GeometryError("half_width needs one entry per axis", "half_width"))
            for h in hws:
                if not 0.0 < h < 0.5:
                    errors.append(GeometryError("half_width must lie in (0, 1/2)", "half_width"))
                elif not _aligned(0.5 - h, n):
                    errors.append(GeometryError(
                        f"half_width {h} is not aligned to resolution {n}", "half_width"))
            if self.kind == "bridged":
                b = self.bridge
                if not 0.0 < b < min(hws):
                    errors.append(GeometryError(
                        "bridge half-width must be positive and smaller than the inclusion half-width",
                        "bridge"))
                elif not _aligned(0.5 - b, n):
                    errors.append(GeometryError(
                        f"bridge {b} is not aligned to resolution {n}", "bridge"))
        return errors


@dataclass(frozen=True, eq=False)
class UnitCell:
    """Voxel partition of the reference cell with its membrane faces.

    Faces are stored by the lower-corner node of the face (node coordinates in
    ``0..n``), the normal axis and the sign of the normal pointing from the
    intracellular into the extracellular voxel.  ``face_wraps`` marks faces
    lying on the cell boundary (periodic wrap-around).
    """

    spec: CellGeometrySpec
    labels: np.ndarray
    face_axis: np.ndarray
    face_corner: np.ndarray
    face_sign: np.ndarray
    face_wraps: np.ndarray

    @property
    def dim(self):
        return self.labels.ndim

    @property
    def resolution(self):
        return self.labels.shape[0]

    @property
    def n_faces(self):
        return len(self.face_axis)

    @property
    def volume_i(self):
        return float(np.count_nonzero(self.labels)) / self.labels.size

    @property
    def volume_e(self):
        return float(self.labels.size - np.count_nonzero(self.labels)) / self.labels.size

    @property
    def area(self):
        return self.n_faces * (1.0 / self.resolution) ** (self.dim - 1)

    def volume(self, phase):
        return self.volume_i if phase == "i" else self.volume_e

    def mask(self, phase):
        _check_phase(phase)
        return self.labels if phase == "i" else ~self.labels

    def signature(self):
        """Short content digest of the label array (used for provenance)."""
        import hashlib

        digest = hashlib.sha256(np.packbits(self.labels).tobytes())
        digest.update(repr(self.labels.shape).encode())
        return digest.hexdigest()[:16]


def _check_phase(phase):
    if phase not in PHASES:
        raise ValueError(f"phase must be 'i' or 'e', got {phase!r}")


def _labels_for(spec):
    n, d = spec.resolution, spec.dim
    centres = (np.arange(n) + 0.5) / n
    grids = np.meshgrid(*([centres] * d), indexing="ij")
    if spec.kind == "full":
        return np.ones((n,) * d, dtype=bool)
    if spec.kind == "laminate":
        off = spec.laminate_offset()
        y = grids[spec.axis]
        return (y > off) & (y < off + spec.thickness)
    hws = spec.half_widths()
    box = np.ones((n,) * d, dtype=bool)
    for g, h in zip(grids, hws):
        box &= np.abs(g - 0.5) < h
    if spec.kind == "inclusion":
        return box
    labels = box.copy()
    for a in range(d):
        bar = np.ones((n,) * d, dtype=bool)
        for b, g in enumerate(grids):
            if b != a:
                bar &= np.abs(g - 0.5) < spec.bridge
        labels |= bar
    return labels


def _periodic_faces(labels):
    n, d = labels.shape[0], labels.ndim
    axes, corners, signs, wraps = [], [], [], []
    for a in range(d):
        nb = np.roll(labels, -1, axis=a)
        idx = np.argwhere(labels != nb)
        if idx.size == 0:
            continue
        lab = labels[tuple(idx.T)]
        corner = idx.copy()
        corner[:, a] += 1
        axes.append(np.full(len(idx), a))
        corners.append(corner)
        signs.append(np.where(lab, 1, -1))
        wraps.append(idx[:, a] == n - 1)
    if not axes:
        empty = np.zeros(0, dtype=int)
        return empty, np.zeros((0, d), dtype=int), empty, np.zeros(0, dtype=bool)
    axis = np.concatenate(axes)
    corner = np.concatenate(corners)
    sign = np.concatenate(signs)
    wrap = np.concatenate(wraps)
    # deterministic order: by axis, then corner in C order
    order_key = np.lexsort(tuple(corner[:, b] for b in reversed(range(d))) + (axis,))
    return axis[order_key], corner[order_key], sign[order_key], wrap[order_key]


def build_unit_cell(spec):
    """Label voxels of the reference cell and collect its membrane faces.

    Raises
    ------
    GeometryError
        If the spec is invalid; the first error names the parameter.
    """
    errors = spec.validate()
    if errors:
        raise errors[0]
    labels = _labels_for(spec)
    axis, corner, sign, wrap = _periodic_faces(labels)
    return UnitCell(spec, labels, axis, corner, sign, wrap)


def unit_cell_from_labels(labels, spec=None):
    """Wrap an explicit boolean label array (True = intracellular) as a cell."""
    labels = np.asarray(labels, dtype=bool)
    if spec is None:
        spec = CellGeometrySpec(kind="full", resolution=labels.shape[0], dim=labels.ndim)
    axis, corner, sign, wrap = _periodic_faces(labels)
    return UnitCell(spec, labels, axis, corner, sign, wrap)


@dataclass(frozen=True)
class ConnectivityReport:
    phase: str
    n_components: int
    spans: tuple
    component_of_voxel: np.ndarray = field(repr=False)

    @property
    def spans_all_axes(self):
        return all(self.spans)


def phase_connectivity(cell, phase):
    """Connected components of one phase under periodic face adjacency.

    A component *spans* axis ``a`` when, unwrapped over the periodic tiling,
    it reaches its own translate by ``e_a`` (i.e. it percolates along ``a``).
    """
    mask = cell.mask(phase)
    n, d = cell.resolution, cell.dim
    comp = -np.ones(mask.shape, dtype=int)
    unwrapped = np.zeros(mask.shape + (d,), dtype=int)
    spans = [False] * d
    n_comp = 0
    steps = [s * np.eye(d, dtype=int)[a] for a in range(d) for s in (1, -1)]
    for start in map(tuple, np.argwhere(mask)):
        if comp[start] >= 0:
            continue
        comp[start] = n_comp
        unwrapped[start] = np.array(start)
        queue = deque([start])
        while queue:
            p = queue.popleft()
            up = unwrapped[p]
            for st in steps:
                raw = np.array(p) + st
                q = tuple(raw % n)
                if not mask[q]:
                    continue
                uq = up + st
                if comp[q] < 0:
                    comp[q] = n_comp
                    unwrapped[q] = uq
                    queue.append(q)
                else:
                    shift = uq - unwrapped[q]
                    for a in range(d):
                        if shift[a] != 0:
                            spans[a] = True
        n_comp += 1
    return ConnectivityReport(phase, n_comp, tuple(spans), comp)


# --------------------------------------------------------------------------
# tiling


def corner_offsets(k):
    """Binary corner offsets of a ``k``-dimensional unit cube, shape (2^k, k)."""
    if k == 0:
        return np.zeros((1, 0), dtype=int)
    return np.array(list(itertools.product((0, 1), repeat=k)), dtype=int)


def face_node_corners(axis, corner, dim):
    """Node coordinates of each face's vertices, shape (F, 2^(d-1), d)."""
    offs = corner_offsets(dim - 1)
    out = np.repeat(corner[:, None, :], len(offs), axis=1)
    for f_axis in range(dim):
        sel = axis == f_axis
        if not np.any(sel):
            continue
        trans = [b for b in range(dim) if b != f_axis]
        for j, b in enumerate(trans):
            out[sel, :, b] += offs[:, j]
    return out


class TilingError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class TiledDomain:
    """``eps``-periodic tiling of ``Omega = (0, 1)^d`` by ``N^d`` copies of a cell.

    Phase DOFs are the global nodes touched by voxels of that phase; a membrane
    node carries one DOF per phase.  ``cell_membrane_dofs[k, r]`` is the
    membrane DOF at ``eps * (k + y_r)`` for reference membrane node ``y_r``;
    nodes where the membrane crosses a cell boundary appear in several cells.
    Likewise ``cell_phase_dofs[j][k, r]`` for the phase-``j`` reference nodes.
    """

    cell: UnitCell
    n_cells: int
    labels: np.ndarray
    phase_nodes: dict
    phase_index: dict
    phase_voxels: dict
    face_axis: np.ndarray
    face_corner: np.ndarray
    face_sign: np.ndarray
    membrane_nodes: np.ndarray
    ref_membrane_nodes: np.ndarray
    cell_membrane_dofs: np.ndarray
    membrane_to_phase: dict
    ref_phase_nodes: dict
    cell_phase_dofs: dict

    @property
    def eps(self):
        return 1.0 / self.n_cells

    @property
    def dim(self):
        return self.cell.dim

    @property
    def n_voxels(self):
        return self.n_cells * self.cell.resolution

    @property
    def h(self):
        return 1.0 / self.n_voxels

    @property
    def node_shape(self):
        return (self.n_voxels + 1,) * self.dim

    @property
    def n_membrane(self):
        return len(self.membrane_nodes)

    @property
    def n_faces(self):
        return len(self.face_axis)

    @property
    def area(self):
        """Total membrane measure ``|Gamma^eps|``."""
        return self.n_faces * self.h ** (self.dim - 1)

    def n_dofs(self, phase):
        return len(self.phase_nodes[phase])

    def volume(self, phase):
        return float(np.count_nonzero(self.labels if phase == "i" else ~self.labels)) / self.labels.size

    def node_coords(self, node_ids):
        return np.stack(np.unravel_index(node_ids, self.node_shape), axis=-1) * self.h

    def phase_coords(self, phase):
        return self.node_coords(self.phase_nodes[phase])

    def membrane_coords(self):
        return self.node_coords(self.membrane_nodes)

    def fast_coords(self, node_ids):
        """Fast variable ``y = {x / eps}`` at global nodes, in ``[0, 1)`` (exact)."""
        n = self.cell.resolution
        idx = np.stack(np.unravel_index(node_ids, self.node_shape), axis=-1)
        return (idx % n) / n

    def membrane_fast_coords(self):
        """Fast variable at membrane DOFs.

        Membrane nodes never sit on a cell boundary plane normal to their
        face, but may on a transverse one; there ``y`` wraps to 0, which is
        the same point of the periodic cell.
        """
        return self.fast_coords(self.membrane_nodes)

    def cell_index(self):
        """Integer cell coordinates ``k`` in C order, shape (N^d, d)."""
        N, d = self.n_cells, self.dim
        return np.stack(np.unravel_index(np.arange(N ** d), (N,) * d), axis=-1)


def tile_domain(cell, n_cells, max_dofs=20_000_000):
    """Tile ``cell`` ``n_cells`` times per axis.

    Raises
    ------
    TilingError
        When membrane faces lie on the cell boundary (their periodic images
        would fall on the outer boundary of Omega), or the estimated DOF count
        exceeds ``max_dofs``.
    """
    if int(n_cells) != n_cells or n_cells < 1:
        raise TilingError("number of cells per axis must be a positive integer", "n_cells")
    N = int(n_cells)
    if np.any(cell.face_wraps):
        raise TilingError(
            "membrane faces lie on the cell boundary and cannot be tiled; "
            "shift the geometry so the membrane is interior to the cell", "offset")
    n, d = cell.resolution, cell.dim
    m = N * n
    est = 2 * (m + 1) ** d
    if est > max_dofs:
        raise TilingError(f"estimated {est} DOFs exceeds limit {max_dofs}", "n_cells")
    labels = np.tile(cell.labels, (N,) * d)
    node_shape = (m + 1,) * d
    n_nodes = int(np.prod(node_shape))
    offs = corner_offsets(d)

    phase_nodes, phase_index, phase_voxels = {}, {}, {}
    for phase in PHASES:
        vox = np.argwhere(labels if phase == "i" else ~labels)
        phase_voxels[phase] = vox
        touched = np.zeros(node_shape, dtype=bool)
        for off in offs:
            touched[tuple((vox + off).T)] = True
        nodes = np.flatnonzero(touched.ravel())
        index = -np.ones(n_nodes, dtype=np.int64)
        index[nodes] = np.arange(len(nodes))
        phase_nodes[phase] = nodes
        phase_index[phase] = index

    # reference membrane nodes of one cell (all interior to the closed cell)
    ref_face_nodes = face_node_corners(cell.face_axis, cell.face_corner, d)
    ref_nodes_flat = np.ravel_multi_index(tuple(ref_face_nodes.reshape(-1, d).T), (n + 1,) * d)
    ref_ids = np.unique(ref_nodes_flat)
    ref_coords = np.stack(np.unravel_index(ref_ids, (n + 1,) * d), axis=-1)

    ks = np.stack(np.unravel_index(np.arange(N ** d), (N,) * d), axis=-1)
    glob = (ks[:, None, :] * n + ref_coords[None, :, :]).reshape(-1, d)
    glob_ids = np.ravel_multi_index(tuple(glob.T), node_shape)
    membrane_nodes, inverse = np.unique(glob_ids, return_inverse=True)
    cell_membrane_dofs = inverse.reshape(N ** d, len(ref_ids))

    face_corner = (ks[:, None, :] * n + cell.face_corner[None, :, :]).reshape(-1, d)
    face_axis = np.tile(cell.face_axis, N ** d)
    face_sign = np.tile(cell.face_sign, N ** d)

    membrane_to_phase = {}
    for phase in PHASES:
        idx = phase_index[phase][membrane_nodes]
        if np.any(idx < 0):
            raise TilingError("membrane node without a DOF in phase " + phase)
        membrane_to_phase[phase] = idx

    ref_phase_nodes, cell_phase_dofs = {}, {}
    for phase in PHASES:
        mask = cell.mask(phase)
        vox = np.argwhere(mask)
        touched = np.zeros((n + 1,) * d, dtype=bool)
        for off in offs:
            touched[tuple((vox + off).T)] = True
        rc = np.argwhere(touched)
        ref_phase_nodes[phase] = rc
        g = (ks[:, None, :] * n + rc[None, :, :]).reshape(-1, d)
        gid = np.ravel_multi_index(tuple(g.T), node_shape)
        cell_phase_dofs[phase] = phase_index[phase][gid].reshape(N ** d, len(rc))

    return TiledDomain(
        cell=cell, n_cells=N, labels=labels,
        phase_nodes=phase_nodes, phase_index=phase_index, phase_voxels=phase_voxels,
        face_axis=face_axis, face_corner=face_corner, face_sign=face_sign,
        membrane_nodes=membrane_nodes, ref_membrane_nodes=ref_coords,
        cell_membrane_dofs=cell_membrane_dofs, membrane_to_phase=membrane_to_phase,
        ref_phase_nodes=ref_phase_nodes, cell_phase_dofs=cell_phase_dofs,
    )


def write_vtk(cell_or_domain, path, title="bidomain voxel labels"):
    """Legacy ASCII VTK structured-points file of voxel labels (1 = intracellular).

    ``title`` is the single-line header (at most 256 characters).
    """
    labels = cell_or_domain.labels
    d = labels.ndim
    shape = labels.shape + (1,) * (3 - d)
    spacing = 1.0 / labels.shape[0]
    vals = labels.reshape(shape).astype(int)
    with open(path, "w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title.splitlines()[0][:256]}\nASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write("DIMENSIONS {} {} {}\n".format(*(s + 1 for s in shape)))
        fh.write("ORIGIN 0 0 0\n")
        fh.write(f"SPACING {spacing} {spacing} {spacing}\n")
        fh.write(f"CELL_DATA {vals.size}\nSCALARS phase int 1\nLOOKUP_TABLE default\n")
        # VTK expects x fastest
        for v in vals.transpose(tuple(reversed(range(3)))).ravel():
            fh.write(f"{v}\n")

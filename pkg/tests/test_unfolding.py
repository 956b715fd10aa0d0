import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bidomain.discretize import assemble_mass, integrate_norm
from bidomain.geometry import CellGeometrySpec, build_unit_cell, tile_domain
from bidomain.unfolding import (BoundaryUnfolder, VolumeUnfolder, cell_average_interpolant, cell_averages,
                                identity_suite, local_average_and_interpolant, product_domain_distance,
                                unfold_boundary, unfold_volume, unfolded_norm)

CELLS = {
    "inclusion": build_unit_cell(CellGeometrySpec(kind="inclusion", resolution=8)),
    "laminate": build_unit_cell(CellGeometrySpec(kind="laminate", resolution=8)),
    "bridged3": build_unit_cell(CellGeometrySpec(kind="bridged", resolution=8, dim=3)),
}
NAMES = {"integration_formula", "boundary_norm", "product_rule", "volume_norm_i", "volume_norm_e",
         "gradient_scaling_i", "gradient_scaling_e", "trace_compatibility_i", "trace_compatibility_e"}


@pytest.mark.parametrize("kind, N", [("inclusion", 2), ("inclusion", 4), ("inclusion", 8), ("laminate", 4),
                                     ("bridged3", 2)])
def test_identity_suite(kind, N):
    checks = identity_suite(tile_domain(CELLS[kind], N), np.random.default_rng(N))
    assert {c.name for c in checks} == NAMES
    for c in checks:
        assert c.passed(1e-12), (c.name, c.error)


@given(st.integers(1, 4), st.integers(0, 2 ** 31))
def test_boundary_norm_property(N, seed):
    dom = tile_domain(CELLS["inclusion"], N)
    v = np.random.default_rng(seed).standard_normal(dom.n_membrane)
    lhs = unfolded_norm(unfold_boundary(v, dom))
    rhs = np.sqrt(dom.eps) * integrate_norm(v, dom, "L2_surface")
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_transformers_roundtrip(rng):
    dom = tile_domain(CELLS["inclusion"], 4)
    bu = BoundaryUnfolder().fit(dom)
    v = rng.standard_normal((3, dom.n_membrane))
    Z = bu.transform(v)
    assert Z.shape == (3, 16 * dom.cell_membrane_dofs.shape[1])
    assert np.array_equal(bu.inverse_transform(Z), v)
    vu = VolumeUnfolder("e").fit(dom)
    u = rng.standard_normal(dom.n_dofs("e"))
    assert np.array_equal(vu.inverse_transform(vu.transform(u))[0], u)
    with pytest.raises(ValueError):
        VolumeUnfolder("x").fit(dom)


def test_unfolding_is_periodic_in_fast_variable():
    psi = lambda y: np.cos(2 * np.pi * y[:, 0]) + y[:, 1] ** 2  # noqa: E731
    norms = []
    for N in (1, 2, 4):
        dom = tile_domain(CELLS["inclusion"], N)
        f = unfold_boundary(psi(dom.membrane_fast_coords()), dom)
        assert np.allclose(f.values, f.values[0])
        norms.append(unfolded_norm(f))
    assert np.allclose(norms, norms[0], rtol=1e-12)


def test_cell_averages_and_interpolant(rng):
    dom = tile_domain(CELLS["inclusion"], 4)
    assert np.allclose(cell_averages(np.full(dom.n_dofs("e"), 2.5), dom, "e"), 2.5)
    x = dom.phase_coords("e")
    avg, Q = local_average_and_interpolant(x[:, 0], dom, "e")
    assert np.allclose(avg.reshape(4, 4)[:, 0], (np.arange(4) + 0.5) / 4, atol=1e-13)
    inside = (x[:, 0] >= 0.125) & (x[:, 0] <= 0.875)
    assert np.allclose(Q[inside], x[inside, 0], atol=1e-13)
    one = tile_domain(CELLS["inclusion"], 1)
    assert np.allclose(cell_average_interpolant([3.0], one)(rng.random((5, 2))), 3.0)
    mass = assemble_mass(dom, "e")
    assert np.sum(avg * dom.cell.volume_e * dom.eps ** 2) == pytest.approx(mass.sum(axis=0) @ x[:, 0])


def test_product_domain_distance_decreases():
    f = lambda x: np.cos(np.pi * x[:, 0])  # noqa: E731
    dist = [product_domain_distance(f, tile_domain(CELLS["inclusion"], N)) for N in (2, 4, 8)]
    assert dist[0] > dist[1] > dist[2]
    assert dist[1] / dist[2] == pytest.approx(2.0, rel=0.1)


def test_gagliardo_seminorm():
    dom = tile_domain(CELLS["inclusion"], 2)
    const = unfold_boundary(np.ones(dom.n_membrane), dom)
    assert unfolded_norm(const, "H12_gagliardo") == 0.0
    wave = unfold_boundary(np.sin(2 * np.pi * dom.membrane_fast_coords()[:, 0]), dom)
    assert unfolded_norm(wave, "H12_gagliardo") > 0.0
    with pytest.raises(ValueError):
        unfolded_norm(unfold_volume(np.ones(dom.n_dofs("e")), dom, "e"), "H12_gagliardo")


def test_shape_mismatch_rejected():
    dom = tile_domain(CELLS["inclusion"], 2)
    with pytest.raises(ValueError):
        unfold_boundary(np.ones(dom.n_membrane + 1), dom)
    a = unfold_boundary(np.ones(dom.n_membrane), dom)
    b = unfold_volume(np.ones(dom.n_dofs("i")), dom, "i")
    with pytest.raises(ValueError):
        a + b

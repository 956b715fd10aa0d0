import numpy as np
import pytest

from bidomain.discretize import EllipticityError
from bidomain.macro import (DegenerateTensorWarning, MacroConfig, MacroGrid, ManufacturedSolution,
                            macro_residuals, manufactured_order, run_macro)
from bidomain.membrane import MembraneModel

FHN = MembraneModel.fitzhugh_nagumo()
GEOM = dict(area=2.0, vol_i=0.25, vol_e=0.75)


def test_manufactured_second_order():
    sol = ManufacturedSolution(M_i=np.diag([0.3, 0.5]), M_e=np.diag([0.6, 0.6]), **GEOM)
    orders, errors = manufactured_order(sol, dim=2, grids=(16, 32))
    assert orders[0] >= 1.8
    assert errors[1] < errors[0]


def test_manufactured_rejects_off_diagonal():
    with pytest.raises(ValueError):
        ManufacturedSolution(M_i=np.eye(2), M_e=np.array([[1.0, 0.2], [0.2, 1.0]]), **GEOM)


def test_elliptic_residual_and_constant_mode():
    phi = lambda x: np.prod(np.cos(np.pi * x), axis=1)  # noqa: E731
    cfg = MacroConfig(dim=2, n=16, M_i=np.diag([0.2, 0.4]), M_e=0.5 * np.eye(2), membrane=FHN, dt=0.01, T=0.2,
                      s_i=lambda t, x: 4.0 * (1 + phi(x)), s_e=lambda t, x: -4.0 / 3.0 * (1 - phi(x)), **GEOM)
    traj = run_macro(cfg)
    res = macro_residuals(traj, cfg)
    assert res.max_elliptic <= 10 * cfg.solver.tol
    assert np.abs(res.constant_mode).max() <= 1e-12


def test_tensor_checks():
    with pytest.raises(EllipticityError):
        MacroConfig(dim=2, n=4, M_i=np.eye(2), M_e=np.zeros((2, 2)), **GEOM).scheme
    with pytest.raises(EllipticityError):
        MacroConfig(dim=2, n=4, M_i=-np.eye(2), M_e=np.eye(2), **GEOM).scheme
    with pytest.warns(DegenerateTensorWarning):
        MacroConfig(dim=2, n=4, M_i=np.zeros((2, 2)), M_e=np.eye(2), **GEOM).scheme


def test_uniform_state_follows_scalar_recursion():
    with pytest.warns(DegenerateTensorWarning):
        traj = run_macro(MacroConfig(dim=2, n=8, M_i=np.zeros((2, 2)), M_e=np.eye(2), membrane=FHN, dt=0.01,
                                     T=1.0, v0=0.3, w0=0.05, **GEOM))
    v, w = 0.3, 0.05
    for _ in range(100):
        w = w + 0.01 * FHN.gating(v, w)
        v = v - 0.01 * FHN.current(v, w)
    assert np.abs(traj.snapshots[-1].v - v).max() <= 1e-12


@pytest.mark.parametrize("dim", [2, 3])
def test_interpolation_reproduces_multilinear(dim, rng):
    grid = MacroGrid(dim, 5)
    f = lambda x: 1.0 + x[:, 0] - 2.0 * x[:, -1] + 3.0 * x[:, 0] * x[:, -1]  # noqa: E731
    pts = rng.random((50, dim))
    assert np.allclose(grid.interpolation_matrix(pts) @ f(grid.coords), f(pts), atol=1e-13)
    assert np.allclose(grid.interpolate(f(grid.coords), pts), f(pts), atol=1e-13)


def test_mass_matrix_integrates_one():
    grid = MacroGrid(3, 4)
    assert grid.mass.sum() == pytest.approx(1.0, rel=1e-14)
    assert grid.lumped.sum() == pytest.approx(1.0, rel=1e-14)

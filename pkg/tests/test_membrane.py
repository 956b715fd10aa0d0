import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bidomain.membrane import (MembraneModel, MembraneStructureWarning, check_membrane_structure,
                               min_sym_eigenvalue)

FHN = MembraneModel.fitzhugh_nagumo()
finite = st.floats(-3.0, 3.0, allow_nan=False)


def test_fhn_examples():
    assert FHN.current(0.1, 0.5) == pytest.approx(0.5, abs=1e-15)
    assert FHN.gating(1.0, 0.0) == pytest.approx(0.005, abs=1e-15)
    assert FHN.gating(0.0, 1.0) == pytest.approx(-0.01, abs=1e-15)


@given(st.fractions(-3, 3, max_denominator=64), st.fractions(-3, 3, max_denominator=64))
def test_fhn_matches_exact_expansion(v, w):
    a, k, e = Fraction(1, 10), Fraction(1, 2), Fraction(1, 100)
    exact_i = v * (v - a) * (v - 1) + w
    exact_h = e * (k * v - w)
    assert abs(FHN.current(float(v), float(w)) - float(exact_i)) <= 1e-14 * max(1.0, abs(float(exact_i)))
    assert abs(FHN.gating(float(v), float(w)) - float(exact_h)) <= 1e-14 * max(1.0, abs(float(exact_h)))


@given(finite, finite)
def test_jacobian_matches_central_differences(v, w):
    model = MembraneModel(i1=(0.3, -1.0, 0.5, 2.0), i2=(0.7, -0.4), h=(0.1, 0.2, -0.3), c_h1=-0.5)
    J = model.jacobian(v, w)
    step = 1e-5
    fd = np.array([
        [(model.current(v + step, w) - model.current(v - step, w)) / (2 * step),
         (model.current(v, w + step) - model.current(v, w - step)) / (2 * step)],
        [(model.gating(v + step, w) - model.gating(v - step, w)) / (2 * step),
         (model.gating(v, w + step) - model.gating(v, w - step)) / (2 * step)],
    ])
    assert np.abs(J - fd).max() <= 1e-6


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_growth_bound(v, w):
    for model in (FHN, MembraneModel(i1=(1.0, -2.0, 0.5, 3.0), i2=(-1.0, 2.0))):
        lhs = abs(model.current(v, w)) ** (4.0 / 3.0)
        assert lhs <= model.growth_constant() * (1 + v ** 4 + w ** 2) * (1 + 1e-12)


def test_structure_report_fhn():
    rep = check_membrane_structure(FHN)
    assert rep.dissipative and rep.gamma == 0.5
    v, w = np.meshgrid(np.linspace(-2, 2, 41), np.linspace(-2, 2, 41))
    lhs = v * FHN.current(v, w) - w * FHN.gating(v, w)
    assert np.all(lhs >= rep.gamma * v ** 4 - rep.beta * (v ** 2 + w ** 2) - 1e-12)
    assert np.any(np.isclose(rep.mu_grid, 0.005))
    assert rep.best_lambda == rep.lambda_by_mu.max()
    k = int(np.argmin(np.abs(rep.mu_grid - 0.003)))
    direct = np.min(min_sym_eigenvalue(FHN, rep.mu_grid[k], v.ravel(), w.ravel()))
    assert rep.lambda_by_mu[k] <= direct + 1e-12


def test_non_dissipative_model_warns():
    with pytest.warns(MembraneStructureWarning):
        rep = check_membrane_structure(MembraneModel(i1=(0, 0, 0, -1.0)))
    assert not rep.dissipative


def test_degree_limits():
    with pytest.raises(ValueError):
        MembraneModel(i1=(0, 0, 0, 0, 1.0))
    with pytest.raises(ValueError):
        MembraneModel.fitzhugh_nagumo(a=1.5)


def test_stability_ceiling():
    assert 0.02 < FHN.stability_ceiling() < 0.04
    assert MembraneModel.passive().stability_ceiling() == np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert MembraneModel.linear(2.0).stability_ceiling() == pytest.approx(0.05)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bidomain.geometry import CellGeometrySpec, build_unit_cell, tile_domain

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def inclusion_cell():
    return build_unit_cell(CellGeometrySpec(kind="inclusion", resolution=8))


@pytest.fixture(scope="session")
def laminate_cell():
    return build_unit_cell(CellGeometrySpec(kind="laminate", resolution=8, thickness=0.5))


@pytest.fixture(scope="session")
def inclusion_domain(inclusion_cell):
    return tile_domain(inclusion_cell, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

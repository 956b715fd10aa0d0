"""Periodic homogenization of the cardiac bidomain model.

Voxel unit cells, effective conductivities from the periodic cell problem,
microscopic and homogenized bidomain solvers, discrete unfolding operators
and the convergence experiment tying them together.
"""
__version__ = "0.1.0"

from .cell_problem import CellProblemHomogenizer, effective_tensor  # noqa: E402
from .geometry import CellGeometrySpec, build_unit_cell, tile_domain  # noqa: E402
from .membrane import MembraneModel, check_membrane_structure  # noqa: E402

__all__ = ["__version__", "CellGeometrySpec", "build_unit_cell", "tile_domain", "CellProblemHomogenizer",
           "effective_tensor", "MembraneModel", "check_membrane_structure"]

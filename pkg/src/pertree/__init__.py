"""Periodic scenario-tree robust controllers for polytopic linear systems."""
from .system import (
    ConstraintPolytope,
    UncertainLinearSystem,
    UncertaintyRealization,
    interval_to_vertices,
    load_system,
    sample_realization,
)
from .tree import TreeIndex, build_index, simulate_tree

__version__ = "0.1.0"

__all__ = [
    "ConstraintPolytope",
    "UncertainLinearSystem",
    "UncertaintyRealization",
    "TreeIndex",
    "build_index",
    "interval_to_vertices",
    "load_system",
    "sample_realization",
    "simulate_tree",
]

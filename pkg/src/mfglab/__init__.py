"""Numerical laboratory for Lipschitz stability of the Hamiltonian factor in
second-order mean-field game systems."""

from .forward import (
    MfgBoundaryData,
    MfgCoefficients,
    MfgSolution,
    SolverParams,
    solve_mfg,
)
from .grid import Grid, build_grid
from .reconstruction import DirectSliceReconstructor, LeastSquaresReconstructor

__all__ = [
    "Grid",
    "build_grid",
    "MfgCoefficients",
    "MfgBoundaryData",
    "MfgSolution",
    "SolverParams",
    "solve_mfg",
    "DirectSliceReconstructor",
    "LeastSquaresReconstructor",
]

__version__ = "0.1.0"

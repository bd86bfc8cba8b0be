"""Input validation helpers shared by the solvers and estimators."""

from __future__ import annotations

import numpy as np

from .grid import Grid


def check_field(values, grid: Grid, name="field"):
    """Return ``values`` as a finite float array shaped like a spatial field.

    Scalars broadcast to a constant field.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(grid.shape, float(arr))
    if arr.shape != grid.shape:
        raise ValueError(f"{name}: expected shape {grid.shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_trajectory(values, grid: Grid, name="trajectory", allow_none=True):
    """Validate a space-time field; ``None`` becomes zeros when allowed.

    A spatial field is broadcast to every time level.
    """
    if values is None:
        if not allow_none:
            raise ValueError(f"{name}: required")
        return np.zeros(grid.st_shape)
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0 or arr.shape == grid.shape:
        arr = np.broadcast_to(arr, grid.st_shape).copy()
    if arr.shape != grid.st_shape:
        raise ValueError(f"{name}: expected shape {grid.st_shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_mask(mask, grid: Grid, name="mask"):
    if mask is None:
        return np.ones(grid.shape, dtype=bool)
    arr = np.asarray(mask)
    if arr.shape != grid.shape or arr.dtype != bool:
        raise ValueError(f"{name}: expected boolean array of shape {grid.shape}")
    return arr


def check_same_grid(*grids):
    first = grids[0]
    for g in grids[1:]:
        if not first.same_as(g):
            raise ValueError("inputs live on different grids")
    return first


def w1inf_norm(p, grid: Grid) -> float:
    """Discrete ``sup|p| + sup|grad p|``."""
    from .grid import gradient_fd

    grad = gradient_fd(p, grid)
    return float(np.max(np.abs(p)) + np.max(np.sqrt(np.sum(grad**2, axis=0))))

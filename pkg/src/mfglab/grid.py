"""Uniform space-time grids on the unit box, finite-difference operators and
the discrete Sobolev norms used throughout the package.

Fields are plain ``numpy`` arrays defined on *all* nodes of the box, boundary
nodes included, so a scalar field on a grid with ``n`` interior nodes per axis
has shape ``(n + 2,) * d``.  Space-time fields carry a leading time axis of
length ``nt + 1`` and vector fields carry a component axis of length ``d``
placed right before the spatial axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "Grid",
    "GridError",
    "build_grid",
    "gradient_fd",
    "second_derivative_fd",
    "hessian_fd",
    "laplacian_fd",
    "divergence_fd",
    "time_derivative",
    "second_time_derivative",
    "quadrature_weights",
    "time_weights",
    "norm_L2",
    "norm_H2_slice",
    "norm_H1t_L2",
]

_MASK_TOL = 1e-9


class GridError(ValueError):
    """Raised for inconsistent grid specifications."""


def _as_box(spec, d):
    """Normalise an interval or a per-axis list of intervals to a box."""
    arr = np.asarray(spec, dtype=float)
    if arr.shape == (2,):
        arr = np.tile(arr, (d, 1))
    if arr.shape != (d, 2):
        raise GridError(f"box specification {spec!r} does not match d={d}")
    return tuple((float(lo), float(hi)) for lo, hi in arr)


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor grid on ``(0, 1)**d x (0, T)``.

    Use :func:`build_grid` to construct one; it validates the observation
    boxes and the slice time.
    """

    d: int
    n: int
    T: float
    nt: int
    omega: tuple
    omega0: tuple
    t0_index: int

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def t0(self) -> float:
        return self.t0_index * self.dt

    @property
    def shape(self) -> tuple:
        return (self.n + 2,) * self.d

    @property
    def st_shape(self) -> tuple:
        return (self.nt + 1,) + self.shape

    @property
    def interior(self) -> tuple:
        """Index tuple selecting interior nodes of a spatial field."""
        return (slice(1, -1),) * self.d

    @cached_property
    def x1d(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n + 2)

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)

    @cached_property
    def coords(self) -> tuple:
        """Broadcast-ready coordinate arrays ``(x0, x1, ...)``."""
        return tuple(np.meshgrid(*([self.x1d] * self.d), indexing="ij"))

    def _box_mask(self, box):
        mask = np.ones(self.shape, dtype=bool)
        for x, (lo, hi) in zip(self.coords, box):
            mask &= (x >= lo - _MASK_TOL) & (x <= hi + _MASK_TOL)
        return mask

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        mask[self.interior] = False
        return mask

    @cached_property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @cached_property
    def omega_mask(self) -> np.ndarray:
        return self._box_mask(self.omega)

    @cached_property
    def omega0_mask(self) -> np.ndarray:
        return self._box_mask(self.omega0)

    def collar_mask(self, width: float) -> np.ndarray:
        """Nodes at distance >= ``width`` from the boundary."""
        mask = np.ones(self.shape, dtype=bool)
        for x in self.coords:
            mask &= (x >= width - _MASK_TOL) & (x <= 1.0 - width + _MASK_TOL)
        return mask

    def same_as(self, other: "Grid") -> bool:
        return (
            self is other
            or (
                self.d == other.d
                and self.n == other.n
                and self.nt == other.nt
                and self.T == other.T
                and self.omega == other.omega
                and self.omega0 == other.omega0
                and self.t0_index == other.t0_index
            )
        )

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n": self.n,
            "T": self.T,
            "nt": self.nt,
            "omega": [list(b) for b in self.omega],
            "omega0": [list(b) for b in self.omega0],
            "t0_fraction": self.t0_index / self.nt,
        }


def build_grid(d=1, n=99, T=1.0, nt=200, omega_spec=(0.3, 0.7),
               omega0_spec=(0.4, 0.6), t0_fraction=0.5) -> Grid:
    """Build a validated :class:`Grid`.

    ``omega_spec`` and ``omega0_spec`` are axis-aligned boxes, given either as
    one interval ``(lo, hi)`` used on every axis or as one interval per axis.
    The inner box must sit strictly inside the outer one.  Building Carleman
    weights additionally requires it to contain the domain centre.
    """
    if d not in (1, 2):
        raise GridError(f"d must be 1 or 2, got {d}")
    if n < 3 or nt < 2:
        raise GridError("need n >= 3 interior nodes and nt >= 2 time steps")
    if not T > 0:
        raise GridError("T must be positive")
    omega = _as_box(omega_spec, d)
    omega0 = _as_box(omega0_spec, d)
    for (lo, hi), (lo0, hi0) in zip(omega, omega0):
        if not 0.0 < lo < hi < 1.0:
            raise GridError(f"omega {omega} must lie strictly inside (0, 1)^{d}")
        if not lo < lo0 < hi0 < hi:
            raise GridError(f"omega0 {omega0} is not strictly inside omega {omega}")
    if not 0.0 < t0_fraction < 1.0:
        raise GridError(
            f"t0_fraction={t0_fraction}: the slice time must be interior to (0, T)"
        )
    t0_index = int(round(t0_fraction * nt))
    if not 0 < t0_index < nt:
        raise GridError(f"t0 index {t0_index} is not interior to (0, {nt})")
    grid = Grid(d=d, n=n, T=float(T), nt=nt, omega=omega, omega0=omega0,
                t0_index=t0_index)
    if not grid.omega0_mask.any():
        raise GridError("omega0 contains no grid node")
    if not (grid.omega_mask & ~grid.omega0_mask).any():
        raise GridError("omega has no node outside omega0")
    return grid


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def _spatial_axes(f, grid):
    lead = np.ndim(f) - grid.d
    if lead < 0:
        raise ValueError(f"array of shape {np.shape(f)} is not a field on {grid.shape}")
    return lead, tuple(range(lead, lead + grid.d))


def gradient_fd(f, grid):
    """Central differences inside, second-order one-sided at the boundary.

    The component axis is inserted right before the spatial axes.
    """
    lead, axes = _spatial_axes(f, grid)
    comps = [np.gradient(f, grid.h, axis=a, edge_order=2) for a in axes]
    return np.stack(comps, axis=lead)


def second_derivative_fd(f, grid, axis):
    """Pure second difference along one spatial axis.

    Interior nodes use the three-point stencil; boundary nodes use the
    second-order four-point one-sided stencil.
    """
    lead, axes = _spatial_axes(f, grid)
    f = np.moveaxis(np.asarray(f, dtype=float), axes[axis], -1)
    out = np.empty_like(f)
    out[..., 1:-1] = f[..., 2:] - 2.0 * f[..., 1:-1] + f[..., :-2]
    out[..., 0] = 2.0 * f[..., 0] - 5.0 * f[..., 1] + 4.0 * f[..., 2] - f[..., 3]
    out[..., -1] = 2.0 * f[..., -1] - 5.0 * f[..., -2] + 4.0 * f[..., -3] - f[..., -4]
    out /= grid.h**2
    return np.moveaxis(out, -1, axes[axis])


def hessian_fd(f, grid):
    """All second derivatives, shape ``(*lead, d, d, *spatial)``."""
    lead, axes = _spatial_axes(f, grid)
    rows = []
    for i in range(grid.d):
        row = []
        for j in range(grid.d):
            if i == j:
                row.append(second_derivative_fd(f, grid, i))
            else:
                di = np.gradient(f, grid.h, axis=axes[i], edge_order=2)
                row.append(np.gradient(di, grid.h, axis=axes[j], edge_order=2))
        rows.append(np.stack(row, axis=lead))
    return np.stack(rows, axis=lead)


def laplacian_fd(f, grid):
    return sum(second_derivative_fd(f, grid, a) for a in range(grid.d))


def divergence_fd(F, grid):
    """Divergence of a vector field with component axis before the spatial axes."""
    lead = np.ndim(F) - grid.d - 1
    return sum(
        np.gradient(np.take(F, a, axis=lead), grid.h, axis=lead + a, edge_order=2)
        for a in range(grid.d)
    )


def time_derivative(traj, grid):
    """Central quotients in time, second-order one-sided at t = 0 and t = T."""
    return np.gradient(np.asarray(traj, dtype=float), grid.dt, axis=0, edge_order=2)


def second_time_derivative(traj, grid):
    traj = np.asarray(traj, dtype=float)
    out = np.empty_like(traj)
    out[1:-1] = traj[2:] - 2.0 * traj[1:-1] + traj[:-2]
    if traj.shape[0] >= 4:
        out[0] = 2.0 * traj[0] - 5.0 * traj[1] + 4.0 * traj[2] - traj[3]
        out[-1] = 2.0 * traj[-1] - 5.0 * traj[-2] + 4.0 * traj[-3] - traj[-4]
    else:
        out[0] = out[1]
        out[-1] = out[-2]
    return out / grid.dt**2


# ---------------------------------------------------------------------------
# quadrature and norms
# ---------------------------------------------------------------------------


def quadrature_weights(grid, mask=None):
    """Trapezoid weights restricted to ``mask`` (all of the closed box if None).

    Along every axis a node whose neighbour falls outside the mask gets half
    weight, so a box-shaped mask integrates with the composite trapezoid rule
    on that box.
    """
    if mask is None:
        mask = np.ones(grid.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.shape:
        raise ValueError(f"mask shape {mask.shape} does not match grid {grid.shape}")
    w = np.where(mask, grid.h**grid.d, 0.0)
    for a in range(grid.d):
        m = np.moveaxis(mask, a, -1)
        left = np.zeros_like(m)
        right = np.zeros_like(m)
        left[..., 1:] = m[..., :-1]
        right[..., :-1] = m[..., 1:]
        factor = np.where(left & right, 1.0, 0.5)
        w = w * np.moveaxis(factor, -1, a)
    return w


def time_weights(grid):
    w = np.full(grid.nt + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return w


def _sq_integral(f, w):
    f = np.asarray(f, dtype=float)
    return float(np.sum(w * f * f))


def norm_L2(f, grid, mask=None) -> float:
    return float(np.sqrt(_sq_integral(f, quadrature_weights(grid, mask))))


def norm_H2_slice(f, grid, mask=None) -> float:
    """Discrete H^2 norm: function, gradient and the full Hessian tensor."""
    w = quadrature_weights(grid, mask)
    total = _sq_integral(f, w)
    grad = gradient_fd(f, grid)
    hess = hessian_fd(f, grid)
    total += sum(_sq_integral(grad[a], w) for a in range(grid.d))
    total += sum(
        _sq_integral(hess[i, j], w) for i in range(grid.d) for j in range(grid.d)
    )
    return float(np.sqrt(total))


def norm_H1t_L2(traj, grid, mask=None) -> float:
    """Norm of H^1(0, T; L^2(region)) with difference-quotient time derivative."""
    traj = np.asarray(traj, dtype=float)
    w = quadrature_weights(grid, mask)
    wt = time_weights(grid)
    dtraj = time_derivative(traj, grid)
    axes = tuple(range(1, traj.ndim))
    per_level = np.sum(w * (traj**2 + dtraj**2), axis=axes)
    return float(np.sqrt(np.dot(wt, per_level)))

"""Linear system satisfied by differences of two forward solutions.

With ``y = u1 - u2``, ``z = v1 - v2`` and ``f = (p1 - p2) / 2`` the pair
``(y, z)`` solves

    y_t + Lap y = c0 z + r1 . grad y + g f,
    z_t - Lap z = div(r2 z + r3 grad y) + div(h f),

with zero traces, ``y(., T) = 0`` and ``z(., 0) = 0``, where
``g = |grad u1|^2``, ``h = 2 v1 grad u1``, ``r1 = p2 (grad u1 + grad u2) / 2``,
``r2 = p2 grad u1`` and ``r3 = p2 v2``.  Differentiating in time gives the
same structure for ``(y_t, z_t)`` with extra lower-order sources.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .forward import MfgSolution, SolverParams
from .grid import Grid, divergence_fd, gradient_fd, norm_L2, time_derivative, time_weights
from .linsys import Stencil, solve_stencil
from .validation import check_field, check_same_grid

logger = logging.getLogger(__name__)

__all__ = [
    "LinearizedCoefficients",
    "LinearizedSolution",
    "assemble_coefficients",
    "solve_linearized",
    "solve_time_differentiated",
    "linearization_gap",
]


@dataclass
class LinearizedCoefficients:
    grid: Grid
    g: np.ndarray
    h: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    dt_g: np.ndarray
    dt_h: np.ndarray
    dt_r1: np.ndarray
    dt_r2: np.ndarray
    dt_r3: np.ndarray

    def sup_norms(self) -> dict:
        return {name: float(np.max(np.abs(getattr(self, name))))
                for name in ("g", "h", "r1", "r2", "r3",
                             "dt_g", "dt_h", "dt_r1", "dt_r2", "dt_r3")}


@dataclass
class LinearizedSolution:
    grid: Grid
    y: np.ndarray
    z: np.ndarray
    y1: np.ndarray | None = None
    z1: np.ndarray | None = None
    converged: bool = True
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    endpoint_rule: str | None = None


def assemble_coefficients(sol1: MfgSolution, sol2: MfgSolution, p2, c0=None
                          ) -> LinearizedCoefficients:
    """Nodewise coefficient fields from two forward solutions.

    ``c0`` is accepted for signature symmetry with the solvers; the
    coefficient fields themselves do not depend on it.
    """
    grid = check_same_grid(sol1.grid, sol2.grid)
    p2 = check_field(p2, grid, "p2")
    gu1 = gradient_fd(sol1.u, grid)
    gu2 = gradient_fd(sol2.u, grid)
    g = np.maximum(np.sum(gu1**2, axis=1), 0.0)
    h = 2.0 * sol1.v[:, None] * gu1
    r1 = 0.5 * p2 * (gu1 + gu2)
    r2 = p2 * gu1
    r3 = p2 * sol2.v
    return LinearizedCoefficients(
        grid, g, h, r1, r2, r3,
        time_derivative(g, grid), time_derivative(h, grid),
        time_derivative(r1, grid), time_derivative(r2, grid),
        time_derivative(r3, grid),
    )


def _backward_step_stencil(r1_in, grid):
    st = Stencil.zeros(grid.n, grid.d).add_laplacian(grid.h)
    st.center -= 1.0 / grid.dt
    return st.add_advection(-r1_in, grid.h)


def _forward_step_stencil(r2, grid):
    """``z/dt - Lap z - div_c(r2 z)`` with central differences of the product."""
    d, h = grid.d, grid.h
    st = Stencil.zeros(grid.n, grid.d).add_laplacian(h, -1.0)
    st.center += 1.0 / grid.dt
    inner = grid.interior
    for a in range(d):
        lo = list(inner)
        hi = list(inner)
        lo[a] = slice(0, -2)
        hi[a] = slice(2, None)
        st.plus[a] -= r2[a][tuple(hi)] / (2.0 * h)
        st.minus[a] += r2[a][tuple(lo)] / (2.0 * h)
    return st


def _backward(coeffs, c0, z, S_y, y_T, params):
    grid = coeffs.grid
    inner = grid.interior
    y = np.zeros(grid.st_shape)
    y[-1] = y_T
    y[-1][grid.boundary_mask] = 0.0
    for k in range(grid.nt - 1, -1, -1):
        st = _backward_step_stencil(coeffs.r1[k][(slice(None),) + inner], grid)
        rhs = S_y[k][inner] + c0[inner] * z[k][inner] - y[k + 1][inner] / grid.dt
        y[k][inner] = solve_stencil(st, rhs, x0=y[k + 1][inner], tol=params.linear_solver_tol)
    return y


def _forward(coeffs, y, Phi, z_0, params):
    grid = coeffs.grid
    inner = grid.interior
    z = np.zeros(grid.st_shape)
    z[0] = z_0
    z[0][grid.boundary_mask] = 0.0
    grad_y = gradient_fd(y, grid)
    src = divergence_fd(coeffs.r3[:, None] * grad_y + Phi, grid)
    for k in range(grid.nt):
        st = _forward_step_stencil(coeffs.r2[k + 1], grid)
        rhs = z[k][inner] / grid.dt + src[k + 1][inner]
        z[k + 1][inner] = solve_stencil(st, rhs, x0=z[k][inner], tol=params.linear_solver_tol)
    return z


def _solve_pair(coeffs, c0, S_y, Phi, y_T, z_0, params):
    """Damped Picard on the linear backward/forward pair with fixed sources."""
    grid = coeffs.grid
    z = _forward(coeffs, np.zeros(grid.st_shape), Phi, z_0, params)
    y = None
    theta = 1.0
    history = []
    best = None
    engaged = False
    for it in range(1, params.picard_max_iter + 1):
        y_new = _backward(coeffs, c0, z, S_y, y_T, params)
        z_new = _forward(coeffs, y_new, Phi, z_0, params)
        scale = max(np.max(np.abs(y_new)), np.max(np.abs(z_new)), 1e-300)
        dz = np.max(np.abs(z_new - z))
        dy = np.inf if y is None else np.max(np.abs(y_new - y))
        res = float(max(dy, dz) / scale) if y is not None else float(dz / scale)
        history.append(res)
        if best is None or res < best[0]:
            best = (res, y_new, z_new)
        if y is not None and res <= params.picard_tol:
            return y_new, z_new, True, it, history
        if not engaged and len(history) >= 3 and history[-1] >= history[-2]:
            theta = params.damping
            engaged = True
        z = (1.0 - theta) * z + theta * z_new
        y = y_new
    logger.warning("linearized Picard did not converge (best %.3e)", best[0])
    return best[1], best[2], False, params.picard_max_iter, history


def solve_linearized(coeffs: LinearizedCoefficients, f, c0, params: SolverParams | None = None
                     ) -> LinearizedSolution:
    """Solve the difference system for a given ``f``."""
    params = params or SolverParams()
    grid = coeffs.grid
    f = check_field(f, grid, "f")
    c0 = check_field(c0, grid, "c0")
    S_y = coeffs.g * f
    Phi = coeffs.h * f
    zero = np.zeros(grid.shape)
    y, z, ok, its, hist = _solve_pair(coeffs, c0, S_y, Phi, zero, zero, params)
    return LinearizedSolution(grid, y, z, converged=ok, iterations=its, residual_history=hist)


def solve_time_differentiated(coeffs: LinearizedCoefficients, f, c0,
                              params: SolverParams | None = None,
                              linsol: LinearizedSolution | None = None):
    """Solve for ``(y_t, z_t)`` through the time-differentiated system.

    The endpoint data ``y_t(., T)`` and ``z_t(., 0)`` are not determined by
    the system itself; they are taken as one-sided difference quotients of
    ``(y, z)``.  Returns a copy of ``linsol`` with ``y1`` and ``z1`` filled.
    """
    params = params or SolverParams()
    grid = coeffs.grid
    f = check_field(f, grid, "f")
    c0 = check_field(c0, grid, "c0")
    if linsol is None:
        linsol = solve_linearized(coeffs, f, c0, params)
    y, z = linsol.y, linsol.z
    grad_y = gradient_fd(y, grid)
    S_y = np.sum(coeffs.dt_r1 * grad_y, axis=1) + coeffs.dt_g * f
    Phi = coeffs.dt_r2 * z[:, None] + coeffs.dt_r3[:, None] * grad_y + coeffs.dt_h * f
    y_T = time_derivative(y, grid)[-1]
    z_0 = time_derivative(z, grid)[0]
    y1, z1, ok, its, hist = _solve_pair(coeffs, c0, S_y, Phi, y_T, z_0, params)
    return LinearizedSolution(
        grid, y, z, y1, z1,
        converged=linsol.converged and ok,
        iterations=its,
        residual_history=hist,
        endpoint_rule="difference_quotient",
    )


def _l2q(traj, grid):
    per_level = np.array([norm_L2(traj[k], grid) ** 2 for k in range(grid.nt + 1)])
    return float(np.sqrt(np.dot(time_weights(grid), per_level)))


def linearization_gap(linsol: LinearizedSolution, sol1: MfgSolution, sol2: MfgSolution) -> dict:
    """Relative L2(Q) gaps between the linear solve and forward-solve differences."""
    grid = linsol.grid
    y_ref = sol1.u - sol2.u
    z_ref = sol1.v - sol2.v
    out = {}
    for name, got, ref in (("y", linsol.y, y_ref), ("z", linsol.z, z_ref)):
        denom = _l2q(ref, grid)
        out[name] = _l2q(got - ref, grid) / denom if denom > 0 else 0.0
    out["max"] = max(out["y"], out["z"])
    return out

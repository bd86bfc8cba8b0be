"""Forward solver for the coupled mean-field-game system.

The value function ``u`` solves the backward equation

    u_t + Lap u - p/2 |grad u|^2 - c0 v = F_u,     u(., T) = u_T,

and the density ``v`` solves the forward equation

    v_t - Lap v - div(p v grad u) = F_v,            v(., 0) = v_0,

both with Dirichlet traces.  The forcing terms are zero in the model problem
and exist for manufactured-solution testing.  The two equations are coupled
by a Picard loop; each backward step is a Newton solve for the quadratic
gradient term and each forward step is one linear solve with the drift in
flux form.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, gradient_fd, time_derivative
from .linsys import LinearSolveError, Stencil, boundary_contribution, solve_stencil
from .validation import check_field, check_trajectory, w1inf_norm

logger = logging.getLogger(__name__)

__all__ = [
    "MfgCoefficients",
    "MfgBoundaryData",
    "SolverParams",
    "MfgSolution",
    "NewtonDivergenceError",
    "LinearSolveError",
    "solve_hjb_backward",
    "solve_fp_forward",
    "solve_mfg",
    "check_nondegeneracy",
    "pde_residual",
    "regularity_bounds",
]


class NewtonDivergenceError(RuntimeError):
    def __init__(self, level, residual):
        super().__init__(f"Newton iteration diverged at time level {level} "
                         f"(residual {residual:.3e})")
        self.level = level
        self.residual = residual


@dataclass
class MfgCoefficients:
    """Hamiltonian factor ``p``, coupling ``c0`` and the admissibility bound ``M``."""

    p: np.ndarray
    c0: np.ndarray
    M: float = 200.0

    def admissibility(self, grid: Grid) -> dict:
        p = check_field(self.p, grid, "p")
        c0 = check_field(self.c0, grid, "c0")
        p_norm = w1inf_norm(p, grid)
        c0_norm = float(np.max(np.abs(c0)))
        return {
            "p_w1inf": p_norm,
            "c0_sup": c0_norm,
            "M": self.M,
            "admissible": p_norm <= self.M and c0_norm <= self.M,
        }


@dataclass
class MfgBoundaryData:
    """Terminal/initial data, Dirichlet traces and optional forcing.

    Traces and forcing are space-time arrays (only boundary nodes of the
    traces are read); ``None`` means zero.
    """

    u_T: np.ndarray
    v_0: np.ndarray
    b_u: np.ndarray | None = None
    b_v: np.ndarray | None = None
    F_u: np.ndarray | None = None
    F_v: np.ndarray | None = None


@dataclass
class SolverParams:
    picard_tol: float = 1e-9
    picard_max_iter: int = 100
    damping: float = 0.5
    newton_steps: int = 2
    linear_solver_tol: float = 1e-11

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.picard_tol <= 0 or self.linear_solver_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.picard_max_iter < 1 or self.newton_steps < 1:
            raise ValueError("iteration counts must be positive")


@dataclass
class MfgSolution:
    grid: Grid
    u: np.ndarray
    v: np.ndarray
    picard_iterations: int = 0
    picard_residual_history: list = field(default_factory=list)
    final_pde_residuals: tuple = (np.nan, np.nan)
    converged: bool = True
    damping_engaged_at: int | None = None
    newton_residual: float = 0.0

    def diagnostics_lines(self):
        """One JSON record per Picard iteration."""
        for k, r in enumerate(self.picard_residual_history, start=1):
            yield json.dumps({"iteration": k, "residual": r})

    def summary(self) -> dict:
        return {
            "picard_iterations": self.picard_iterations,
            "converged": self.converged,
            "damping_engaged_at": self.damping_engaged_at,
            "final_pde_residuals": list(self.final_pde_residuals),
            "newton_residual": self.newton_residual,
        }


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _prepared(grid, coeffs, bdata):
    p = check_field(coeffs.p, grid, "p")
    c0 = check_field(coeffs.c0, grid, "c0")
    b_u = check_trajectory(bdata.b_u, grid, "b_u")
    b_v = check_trajectory(bdata.b_v, grid, "b_v")
    F_u = check_trajectory(bdata.F_u, grid, "F_u")
    F_v = check_trajectory(bdata.F_v, grid, "F_v")
    bmask = grid.boundary_mask
    u_T = check_field(bdata.u_T, grid, "u_T").copy()
    v_0 = check_field(bdata.v_0, grid, "v_0").copy()
    if np.max(np.abs(u_T[bmask] - b_u[-1][bmask]), initial=0.0) > 1e-8:
        warnings.warn("u_T disagrees with the trace b_u at t=T; using the trace",
                      stacklevel=3)
    if np.max(np.abs(v_0[bmask] - b_v[0][bmask]), initial=0.0) > 1e-8:
        warnings.warn("v_0 disagrees with the trace b_v at t=0; using the trace",
                      stacklevel=3)
    if np.min(v_0) < 0:
        warnings.warn("v_0 has negative values; not a density", stacklevel=3)
    u_T[bmask] = b_u[-1][bmask]
    v_0[bmask] = b_v[0][bmask]
    return p, c0, u_T, v_0, b_u, b_v, F_u, F_v


def _interior_gradient(w, grid):
    d, h = grid.d, grid.h
    inner = grid.interior
    comps = []
    for a in range(d):
        lo = list(inner)
        hi = list(inner)
        lo[a] = slice(0, -2)
        hi[a] = slice(2, None)
        comps.append((w[tuple(hi)] - w[tuple(lo)]) / (2.0 * h))
    return np.stack(comps)


def _laplacian_stencil(grid, scale=1.0):
    return Stencil.zeros(grid.n, grid.d).add_laplacian(grid.h, scale)


def _hjb_residual(w, u_next, p_in, src, grid, lap):
    """Residual of the implicit backward step at interior nodes."""
    grad = _interior_gradient(w, grid)
    inner = grid.interior
    G = (u_next[inner] - w[inner]) / grid.dt + lap.apply(w) \
        - 0.5 * p_in * np.sum(grad**2, axis=0) - src
    return G, grad


def _fp_operator(p, u_slice, grid):
    """Stencil of ``Lap v + div(p v grad u)`` with face-averaged drift."""
    d, h, n = grid.d, grid.h, grid.n
    st = _laplacian_stencil(grid)
    for a in range(d):
        pa = np.moveaxis(p, a, 0)
        ua = np.moveaxis(u_slice, a, 0)
        face = 0.5 * (pa[1:] + pa[:-1]) * (ua[1:] - ua[:-1]) / h
        face = np.moveaxis(face, 0, a)
        rest = [slice(1, -1)] * d
        rest[a] = slice(1, n + 1)
        a_plus = face[tuple(rest)]
        rest[a] = slice(0, n)
        a_minus = face[tuple(rest)]
        st.center += (a_plus - a_minus) / (2.0 * h)
        st.plus[a] += a_plus / (2.0 * h)
        st.minus[a] -= a_minus / (2.0 * h)
    return st


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def solve_hjb_backward(grid: Grid, v_fixed, coeffs: MfgCoefficients,
                       bdata: MfgBoundaryData, params: SolverParams | None = None,
                       _prep=None, _stats=None):
    """March ``u`` backward from ``u_T`` with ``v`` frozen.

    Each time level runs ``params.newton_steps`` Newton iterations on the
    implicit Euler step, starting from the next level's values.
    """
    params = params or SolverParams()
    p, c0, u_T, _, b_u, _, F_u, _ = _prep or _prepared(grid, coeffs, bdata)
    v_fixed = check_trajectory(v_fixed, grid, "v", allow_none=False)
    inner = grid.interior
    bmask = grid.boundary_mask
    p_in, c0_in = p[inner], c0[inner]
    lap = _laplacian_stencil(grid)
    u = np.empty(grid.st_shape)
    u[-1] = u_T
    worst = 0.0
    for k in range(grid.nt - 1, -1, -1):
        w = u[k + 1].copy()
        w[bmask] = b_u[k][bmask]
        src = c0_in * v_fixed[k][inner] + F_u[k][inner]
        G, grad = _hjb_residual(w, u[k + 1], p_in, src, grid, lap)
        start = float(np.max(np.abs(G)))
        for _ in range(params.newton_steps):
            J = _laplacian_stencil(grid)
            J.center -= 1.0 / grid.dt
            J.add_advection(-p_in * grad, grid.h)
            w[inner] += solve_stencil(J, -G, tol=params.linear_solver_tol)
            G, grad = _hjb_residual(w, u[k + 1], p_in, src, grid, lap)
        res = float(np.max(np.abs(G)))
        if not np.isfinite(res) or (res > start and res > params.linear_solver_tol):
            raise NewtonDivergenceError(k, res)
        worst = max(worst, res)
        u[k] = w
    if _stats is not None:
        _stats["newton_residual"] = worst
    return u


def solve_fp_forward(grid: Grid, u_fixed, coeffs: MfgCoefficients,
                     bdata: MfgBoundaryData, params: SolverParams | None = None,
                     _prep=None):
    """March ``v`` forward from ``v_0`` with ``u`` frozen (implicit Euler)."""
    params = params or SolverParams()
    p, _, _, v_0, _, b_v, _, F_v = _prep or _prepared(grid, coeffs, bdata)
    u_fixed = check_trajectory(u_fixed, grid, "u", allow_none=False)
    inner = grid.interior
    bmask = grid.boundary_mask
    v = np.empty(grid.st_shape)
    v[0] = v_0
    for k in range(grid.nt):
        st = _fp_operator(p, u_fixed[k + 1], grid)
        st.center *= -1.0
        for a in range(grid.d):
            st.minus[a] *= -1.0
            st.plus[a] *= -1.0
        st.center += 1.0 / grid.dt
        full = np.zeros(grid.shape)
        full[bmask] = b_v[k + 1][bmask]
        rhs = v[k][inner] / grid.dt + F_v[k + 1][inner] - boundary_contribution(st, full)
        full[inner] = solve_stencil(st, rhs, x0=v[k][inner], tol=params.linear_solver_tol)
        v[k + 1] = full
    return v


def solve_mfg(grid: Grid, coeffs: MfgCoefficients, bdata: MfgBoundaryData,
              params: SolverParams | None = None) -> MfgSolution:
    """Damped Picard iteration between the backward and forward solves.

    The loop starts undamped; the damping factor engages the first time the
    iterate change fails to decrease and stays on afterwards.  On exit the
    returned ``v`` is the forward solve driven by the returned ``u``.
    """
    params = params or SolverParams()
    prep = _prepared(grid, coeffs, bdata)
    v = solve_fp_forward(grid, np.zeros(grid.st_shape), coeffs, bdata, params, _prep=prep)
    u = None
    theta = 1.0
    history = []
    engaged = None
    best = None
    stats = {}
    for it in range(1, params.picard_max_iter + 1):
        u_new = solve_hjb_backward(grid, v, coeffs, bdata, params, _prep=prep, _stats=stats)
        v_fp = solve_fp_forward(grid, u_new, coeffs, bdata, params, _prep=prep)
        dv = np.max(np.abs(v_fp - v)) / max(1.0, np.max(np.abs(v_fp)))
        du = np.inf if u is None else np.max(np.abs(u_new - u)) / max(1.0, np.max(np.abs(u_new)))
        res = float(max(du, dv)) if u is not None else float(dv)
        history.append(res)
        logger.debug("picard %d residual %.3e", it, res)
        if best is None or res < best[0]:
            best = (res, u_new, v_fp, it)
        if u is not None and res <= params.picard_tol:
            sol = MfgSolution(grid, u_new, v_fp, it, history, converged=True,
                              damping_engaged_at=engaged,
                              newton_residual=stats.get("newton_residual", 0.0))
            break
        if engaged is None and len(history) >= 3 and history[-1] >= history[-2]:
            theta = params.damping
            engaged = it
        v = (1.0 - theta) * v + theta * v_fp
        u = u_new
    else:
        _, ub, vb, _ = best
        sol = MfgSolution(grid, ub, vb, params.picard_max_iter, history,
                          converged=False, damping_engaged_at=engaged,
                          newton_residual=stats.get("newton_residual", 0.0))
        logger.warning("Picard iteration did not converge (best residual %.3e)", best[0])
    sol.final_pde_residuals = pde_residual(sol, coeffs, bdata)
    return sol


def pde_residual(sol: MfgSolution, coeffs: MfgCoefficients, bdata: MfgBoundaryData):
    """Discrete L2(Q) residuals of both equations for the stored trajectories."""
    grid = sol.grid
    p, c0, _, _, _, _, F_u, F_v = _prepared(grid, coeffs, bdata)
    inner = grid.interior
    lap = _laplacian_stencil(grid)
    wq = grid.h**grid.d * grid.dt
    r_u = 0.0
    for k in range(grid.nt):
        src = c0[inner] * sol.v[k][inner] + F_u[k][inner]
        G, _ = _hjb_residual(sol.u[k], sol.u[k + 1], p[inner], src, grid, lap)
        r_u += np.sum(G**2)
    r_v = 0.0
    for k in range(grid.nt):
        op = _fp_operator(p, sol.u[k + 1], grid)
        R = (sol.v[k + 1][inner] - sol.v[k][inner]) / grid.dt - op.apply(sol.v[k + 1]) \
            - F_v[k + 1][inner]
        r_v += np.sum(R**2)
    return float(np.sqrt(wq * r_u)), float(np.sqrt(wq * r_v))


def check_nondegeneracy(u, grid: Grid, region_mask=None) -> float:
    """Minimum of ``|grad u(., t0)|`` over the masked nodes."""
    mask = grid.interior_mask | grid.boundary_mask if region_mask is None else region_mask
    grad = gradient_fd(u[grid.t0_index], grid)
    mag = np.sqrt(np.sum(grad**2, axis=0))
    return float(np.min(mag[mask]))


def regularity_bounds(sol: MfgSolution) -> dict:
    """Discrete sup-norms standing in for the W^{1,inf} bounds on solutions."""
    grid = sol.grid
    out = {}
    for name, traj in (("u", sol.u), ("v", sol.v)):
        grad = gradient_fd(traj, grid)
        dtraj = time_derivative(traj, grid)
        out[name] = float(np.max(np.abs(traj)))
        out[f"grad_{name}"] = float(np.max(np.sqrt(np.sum(grad**2, axis=1))))
        out[f"dt_{name}"] = float(np.max(np.abs(dtraj)))
        out[f"grad_dt_{name}"] = float(np.max(np.sqrt(np.sum(gradient_fd(dtraj, grid)**2, axis=1))))
    return out

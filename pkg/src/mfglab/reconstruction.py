"""Recovery of the Hamiltonian factor from observation data.

Two estimators share the scikit-learn conventions (constructor arguments are
hyper-parameters, ``fit`` learns trailing-underscore attributes):

``DirectSliceReconstructor``
    Solves the t0-slice of the linearized value equation,
    ``g f = y_t + Lap y - r1 . grad y - c0 z``, pointwise for
    ``f = (p1 - p2) / 2``.  Needs the full slice of ``z`` at ``t0``, which is
    not part of the observation set; it serves as an exactness oracle.

``LeastSquaresReconstructor``
    Gauss-Newton fit of a coarse piecewise-linear ``p`` to exactly the
    observation set (omega trajectories of both components and the t0 slice
    of the value function), with forward-difference Jacobians.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .forward import MfgSolution
from .grid import (
    Grid,
    gradient_fd,
    hessian_fd,
    laplacian_fd,
    norm_L2,
    quadrature_weights,
    time_derivative,
    time_weights,
)
from .parallel import parallel_map
from .stability import LabSetup, ObservationData, extract_observations
from .validation import check_field, check_same_grid

logger = logging.getLogger(__name__)

__all__ = [
    "SliceData",
    "KnownData",
    "ReconstructionConfig",
    "ReconstructionResult",
    "slice_data_from_solutions",
    "DirectSliceReconstructor",
    "LeastSquaresReconstructor",
    "prolongation_matrix",
    "reconstruct_direct_slice",
    "reconstruct_least_squares",
    "noise_robustness_curve",
]


@dataclass
class SliceData:
    """Everything the direct formula needs at ``t0`` (vector fields ``(d, *shape)``)."""

    grid: Grid
    y: np.ndarray
    dt_y: np.ndarray
    lap_y: np.ndarray
    grad_y: np.ndarray
    z: np.ndarray
    g: np.ndarray
    r1: np.ndarray
    c0: np.ndarray
    time_quotient: str = "scheme"


def slice_data_from_solutions(sol1: MfgSolution, sol2: MfgSolution, p2, c0,
                              time_quotient="scheme") -> SliceData:
    """Assemble slice inputs from two forward solves.

    ``time_quotient="scheme"`` uses the forward quotient
    ``(y(t0 + dt) - y(t0)) / dt`` that the implicit backward step satisfies
    exactly; ``"central"`` uses the symmetric quotient.
    """
    grid = check_same_grid(sol1.grid, sol2.grid)
    p2 = check_field(p2, grid, "p2")
    c0 = check_field(c0, grid, "c0")
    k0 = grid.t0_index
    y = sol1.u - sol2.u
    if time_quotient == "scheme":
        dt_y = (y[k0 + 1] - y[k0]) / grid.dt
    elif time_quotient == "central":
        dt_y = time_derivative(y, grid)[k0]
    else:
        raise ValueError(f"unknown time_quotient {time_quotient!r}")
    gu1 = gradient_fd(sol1.u[k0], grid)
    gu2 = gradient_fd(sol2.u[k0], grid)
    return SliceData(
        grid=grid,
        y=y[k0],
        dt_y=dt_y,
        lap_y=laplacian_fd(y[k0], grid),
        grad_y=gradient_fd(y[k0], grid),
        z=(sol1.v - sol2.v)[k0],
        g=np.sum(gu1**2, axis=0),
        r1=0.5 * p2 * (gu1 + gu2),
        c0=c0,
        time_quotient=time_quotient,
    )


class DirectSliceReconstructor(BaseEstimator):
    """Pointwise division by ``g(., t0)`` on the non-degenerate mask.

    Parameters
    ----------
    g_floor : float
        Nodes with ``g < g_floor`` are excluded and reported in
        ``excluded_mask_``.

    Attributes
    ----------
    f_hat_ : ndarray
        Recovered ``(p1 - p2) / 2``; zero outside ``mask_``.
    p_diff_ : ndarray
        ``2 * f_hat_``.
    mask_ : ndarray of bool
        Interior nodes where the division was carried out.
    excluded_mask_ : ndarray of bool
        Interior nodes dropped for falling below ``g_floor``.
    """

    def __init__(self, g_floor=1e-3):
        self.g_floor = g_floor

    def _mask(self, X: SliceData):
        grid = X.grid
        return grid.interior_mask & (X.g >= self.g_floor)

    def fit(self, X: SliceData, y=None):
        if self.g_floor <= 0:
            raise ValueError("g_floor must be positive")
        mask = self._mask(X)
        if not mask.any():
            raise ValueError("g is below g_floor at every interior node")
        self.mask_ = mask
        self.excluded_mask_ = X.grid.interior_mask & ~mask
        self.f_hat_ = self.transform(X)
        self.p_diff_ = 2.0 * self.f_hat_
        return self

    def transform(self, X: SliceData):
        mask = self._mask(X)
        rhs = X.dt_y + X.lap_y - np.sum(X.r1 * X.grad_y, axis=0) - X.c0 * X.z
        safe = np.where(mask, X.g, 1.0)
        return np.where(mask, rhs / safe, 0.0)

    def relative_error(self, f_true):
        """Relative L2 error of ``f_hat_`` on ``mask_``."""
        if not hasattr(self, "f_hat_"):
            raise NotFittedError("call fit first")
        grid_mask = self.mask_
        diff = np.where(grid_mask, self.f_hat_ - f_true, 0.0)
        ref = np.where(grid_mask, f_true, 0.0)
        denom = np.sqrt(np.sum(ref**2))
        return float(np.sqrt(np.sum(diff**2)) / denom) if denom > 0 else float(np.sqrt(np.sum(diff**2)))


# ---------------------------------------------------------------------------
# least squares
# ---------------------------------------------------------------------------


def prolongation_matrix(grid: Grid, n_params: int) -> np.ndarray:
    """Piecewise-multilinear interpolation from ``n_params**d`` coarse nodes."""
    coarse = np.linspace(0.0, 1.0, n_params)
    eye = np.eye(n_params)
    P1 = np.stack([np.interp(grid.x1d, coarse, eye[j]) for j in range(n_params)], axis=1)
    P = P1
    for _ in range(grid.d - 1):
        P = np.kron(P, P1)
    return P


@dataclass
class KnownData:
    """The known coefficient of the pair and the setup that produced the data."""

    setup: LabSetup
    p_known: np.ndarray
    solution: MfgSolution | None = None

    def known_solution(self) -> MfgSolution:
        if self.solution is None:
            self.solution = self.setup.solve(self.p_known)
        return self.solution


class _Misfit:
    """Residual vector whose squared norm is the sum of the three data norms squared."""

    def __init__(self, obs: ObservationData, use_slice=True):
        grid = obs.grid
        self.grid = grid
        self.obs = obs
        self.use_slice = use_slice
        self.wx = np.sqrt(quadrature_weights(grid))
        wo = quadrature_weights(grid, grid.omega_mask)
        self.w_omega = np.sqrt(time_weights(grid)[:, None] * wo.reshape(1, -1)).reshape(grid.st_shape)
        self.omega = grid.omega_mask

    def residual(self, y, z):
        grid = self.grid
        parts = []
        if self.use_slice:
            e = y[grid.t0_index] - self.obs.y_slice_t0
            parts.append((self.wx * e).ravel())
            parts.append((self.wx * gradient_fd(e, grid)).ravel())
            parts.append((self.wx * hessian_fd(e, grid)).ravel())
        for model, data in ((y, self.obs.y_omega), (z, self.obs.z_omega)):
            e = np.where(self.omega, model, 0.0) - data
            parts.append((self.w_omega * e).ravel())
            parts.append((self.w_omega * time_derivative(e, grid)).ravel())
        return np.concatenate(parts)


class LeastSquaresReconstructor(BaseEstimator):
    """Gauss-Newton fit of a coarse ``p`` to the observation data.

    Parameters
    ----------
    n_params : int
        Coarse nodes per axis (``n_params**d`` unknowns, at most 64).
    regularization_weight : float
        Weight of the squared Euclidean norm of the coarse parameter vector.
    max_iter : int
        Gauss-Newton iterations.
    misfit_tol : float
        Stop once the objective falls below this value.
    fd_step : float
        Relative forward-difference step for Jacobian columns.
    use_slice : bool
        Include the t0-slice term; switch off to ablate it.
    """

    def __init__(self, n_params=8, regularization_weight=0.0, max_iter=15,
                 misfit_tol=1e-20, fd_step=1e-5, use_slice=True):
        self.n_params = n_params
        self.regularization_weight = regularization_weight
        self.max_iter = max_iter
        self.misfit_tol = misfit_tol
        self.fd_step = fd_step
        self.use_slice = use_slice

    def _residual(self, theta, P, known, misfit):
        sol_k = known.known_solution()
        p = (P @ theta).reshape(misfit.grid.shape)
        sol = known.setup.solve(p)
        r = misfit.residual(sol.u - sol_k.u, sol.v - sol_k.v)
        if self.regularization_weight > 0:
            r = np.concatenate([r, np.sqrt(self.regularization_weight) * theta])
        return r, sol.converged

    def fit(self, X: ObservationData, known: KnownData, theta0=None):
        grid = check_same_grid(X.grid, known.setup.grid)
        if self.n_params ** grid.d > 64:
            raise ValueError("at most 64 coarse parameters are supported")
        P = prolongation_matrix(grid, self.n_params)
        misfit = _Misfit(X, self.use_slice)
        if theta0 is None:
            theta0 = np.linalg.lstsq(P, known.p_known.ravel(), rcond=None)[0]
        theta = np.asarray(theta0, dtype=float).copy()
        r, ok = self._residual(theta, P, known, misfit)
        history = [float(r @ r)]
        flagged = not ok
        converged = history[-1] <= self.misfit_tol
        iterations = 0
        while not converged and iterations < self.max_iter:
            iterations += 1
            steps = self.fd_step * np.maximum(1.0, np.abs(theta))

            def column(j):
                th = theta.copy()
                th[j] += steps[j]
                rj, okj = self._residual(th, P, known, misfit)
                return (rj - r) / steps[j], okj

            cols = parallel_map(column, range(theta.size))
            J = np.stack([c for c, _ in cols], axis=1)
            flagged |= not all(okj for _, okj in cols)
            delta = np.linalg.lstsq(J, -r, rcond=None)[0]
            step = 1.0
            accepted = False
            for _ in range(30):
                cand = theta + step * delta
                r_new, ok_new = self._residual(cand, P, known, misfit)
                obj = float(r_new @ r_new)
                if obj < history[-1]:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                logger.info("line search stalled at iteration %d", iterations)
                break
            theta, r = cand, r_new
            flagged |= not ok_new
            history.append(obj)
            converged = obj <= self.misfit_tol
            if history[-2] - obj <= 1e-14 * history[-2]:
                break
        self.theta_ = theta
        self.p_hat_ = (P @ theta).reshape(grid.shape)
        self.misfit_history_ = history
        self.n_iter_ = iterations
        self.converged_ = converged
        self.flagged_ = flagged
        return self

    def predict(self):
        if not hasattr(self, "p_hat_"):
            raise NotFittedError("call fit first")
        return self.p_hat_


# ---------------------------------------------------------------------------
# functional front end
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionConfig:
    method: str = "least_squares"
    g_floor: float = 1e-3
    regularization_weight: float = 0.0
    p_parameterization: int = 8
    max_gn_iterations: int = 15
    misfit_tol: float = 1e-20
    use_slice: bool = True

    def __post_init__(self):
        if self.method not in ("direct_slice", "least_squares"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.g_floor <= 0 or self.regularization_weight < 0:
            raise ValueError("g_floor must be positive, regularization_weight >= 0")


@dataclass
class ReconstructionResult:
    p_hat: np.ndarray
    rel_l2_error: float | None = None
    misfit_history: list = field(default_factory=list)
    method: str = ""
    metadata: dict = field(default_factory=dict)


def _rel_l2(est, truth, grid, mask=None):
    denom = norm_L2(truth, grid, mask)
    err = norm_L2(est - truth, grid, mask)
    return err / denom if denom > 0 else err


def reconstruct_direct_slice(slice_data: SliceData, config: ReconstructionConfig,
                             p_diff_true=None) -> ReconstructionResult:
    """Recover ``p1 - p2`` from full slice data."""
    est = DirectSliceReconstructor(config.g_floor).fit(slice_data)
    err = None
    if p_diff_true is not None:
        err = est.relative_error(0.5 * np.asarray(p_diff_true))
    return ReconstructionResult(
        p_hat=est.p_diff_,
        rel_l2_error=err,
        method="direct_slice",
        metadata={
            "data": "full t0 slice of y, z (z(t0) is not in the observation set)",
            "time_quotient": slice_data.time_quotient,
            "mask_nodes": int(est.mask_.sum()),
            "excluded_nodes": int(est.excluded_mask_.sum()),
            "g_floor": config.g_floor,
        },
    )


def reconstruct_least_squares(obs: ObservationData, known: KnownData,
                              config: ReconstructionConfig, p_true=None,
                              theta0=None) -> ReconstructionResult:
    est = LeastSquaresReconstructor(
        n_params=config.p_parameterization,
        regularization_weight=config.regularization_weight,
        max_iter=config.max_gn_iterations,
        misfit_tol=config.misfit_tol,
        use_slice=config.use_slice,
    ).fit(obs, known, theta0=theta0)
    err = None if p_true is None else _rel_l2(est.p_hat_, p_true, obs.grid)
    return ReconstructionResult(
        p_hat=est.p_hat_,
        rel_l2_error=err,
        misfit_history=est.misfit_history_,
        method="least_squares",
        metadata={
            "data": "omega trajectories of u, v and the t0 slice of u"
                    if config.use_slice else "omega trajectories of u, v",
            "iterations": est.n_iter_,
            "converged": est.converged_,
            "flagged": est.flagged_,
            "theta": est.theta_.tolist(),
            "noise_level": obs.noise_level,
            "rng_seed": obs.rng_seed,
        },
    )


def noise_robustness_curve(p_true, p_known, noise_levels, seeds, setup: LabSetup,
                           config: ReconstructionConfig) -> dict:
    """Least-squares error over a noise grid and seeds.

    Returns ``{"rows": [(noise, seed, rel_error, iterations, flagged)],
    "summary": [(noise, mean, std)]}``.
    """
    p_true = check_field(p_true, setup.grid, "p_true")
    known = KnownData(setup, check_field(p_known, setup.grid, "p_known"))
    sol_true = setup.solve(p_true)
    sol_known = known.known_solution()
    jobs = [(float(nl), int(sd)) for nl in noise_levels for sd in seeds]

    def run(job):
        nl, sd = job
        obs = extract_observations(sol_true, sol_known, setup.grid, nl, sd)
        res = reconstruct_least_squares(obs, known, config, p_true=p_true)
        return (nl, sd, res.rel_l2_error, res.metadata["iterations"], res.metadata["flagged"])

    rows = [run(j) for j in jobs]
    summary = []
    for nl in noise_levels:
        errs = np.array([r[2] for r in rows if r[0] == float(nl)])
        summary.append((float(nl), float(errs.mean()), float(errs.std())))
    return {"rows": rows, "summary": summary}

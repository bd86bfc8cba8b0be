"""Carleman weights and numerical evaluation of weighted energy inequalities.

The weight family is built from ``eta(x) = prod_i x_i (1 - x_i)``, the time
factor ``mu(t) = t (T - t)`` and a parameter ``lam > 0``:

    phi   = exp(lam * eta) / mu,
    alpha = (exp(lam * eta) - exp(2 * lam * eta_sup)) / mu.

Every weighted integral is evaluated with ``exp(2 s (alpha - shift))`` where
the default shift is ``max alpha``; both sides of an inequality share the
shift, so reported ratios do not depend on it while the weights stay in
floating-point range.  The levels ``t = 0`` and ``t = T`` carry weight zero.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    Grid,
    GridError,
    divergence_fd,
    gradient_fd,
    hessian_fd,
    laplacian_fd,
    quadrature_weights,
    second_time_derivative,
    time_derivative,
)
from .linearized import (
    LinearizedSolution,
    assemble_coefficients,
    solve_time_differentiated,
)
from .parallel import parallel_map

__all__ = [
    "CarlemanWeights",
    "RatioEntry",
    "RatioReport",
    "build_eta",
    "eval_weights",
    "check_weight_invariants",
    "default_s_values",
    "weighted_integral",
    "mass_fraction_near_t0",
    "lemma1_backward_ratio",
    "lemma1_divergence_ratio",
    "key_estimate_ratio",
    "slice_energy_check",
    "ratio_sweep",
    "trial_reports",
]

DEFAULT_MULTIPLIERS = (1, 2, 4, 8, 16, 32)


@dataclass
class CarlemanWeights:
    grid: Grid
    eta: np.ndarray
    lam: float
    mu: np.ndarray
    phi: np.ndarray
    alpha: np.ndarray
    eta_sup: float
    alpha_max: float
    C0: float

    @property
    def active(self) -> np.ndarray:
        """Time levels where the weight is evaluated (t = 0, T excluded)."""
        act = np.ones(self.grid.nt + 1, dtype=bool)
        act[0] = act[-1] = False
        return act


@dataclass
class RatioEntry:
    s: float
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        if self.rhs == 0.0:
            return np.nan if self.lhs == 0.0 else np.inf
        return self.lhs / self.rhs


@dataclass
class RatioReport:
    label: str
    lam: float
    entries: list = field(default_factory=list)
    slope_limit: float = 0.1

    @property
    def s_values(self):
        return np.array([e.s for e in self.entries])

    @property
    def ratios(self):
        return np.array([e.ratio for e in self.entries])

    def log_slope(self) -> float:
        """Least-squares slope of log(ratio) against s."""
        r = self.ratios
        if len(r) < 2 or not np.all(np.isfinite(r)) or np.any(r <= 0):
            return np.nan
        return float(np.polyfit(self.s_values, np.log(r), 1)[0])

    def spread(self) -> float:
        r = self.ratios
        if not np.all(np.isfinite(r)) or np.any(r <= 0):
            return np.nan
        return float(r.max() / r.min())

    @property
    def verdict(self) -> str:
        slope = self.log_slope()
        if np.isnan(slope):
            return "undefined"
        return "bounded" if slope <= self.slope_limit else "growing"

    def rows(self):
        verdict = self.verdict
        for e in self.entries:
            yield [e.s, self.lam, e.lhs, e.rhs, e.ratio, verdict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["s", "lambda", "lhs", "rhs", "ratio", "verdict"])
        for row in self.rows():
            writer.writerow([repr(float(v)) if not isinstance(v, str) else v for v in row])
        return buf.getvalue()


def build_eta(grid: Grid) -> np.ndarray:
    """Product of parabolas; its only interior critical point is the centre."""
    centre = np.full(grid.d, 0.5)
    for (lo, hi), c in zip(grid.omega0, centre):
        if not lo < c < hi:
            raise GridError("omega0 must contain the domain centre")
    eta = np.ones(grid.shape)
    for x in grid.coords:
        eta = eta * x * (1.0 - x)
    return eta


def eval_weights(eta, lam: float, grid: Grid) -> CarlemanWeights:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    eta_sup = 0.25**grid.d
    t = grid.times
    mu = t * (grid.T - t)
    e = np.exp(lam * eta)
    with np.errstate(divide="ignore"):
        inv_mu = np.where(mu > 0, 1.0 / np.where(mu > 0, mu, 1.0), np.inf)
    bshape = (-1,) + (1,) * grid.d
    phi = e[None] * inv_mu.reshape(bshape)
    alpha = (e - np.exp(2.0 * lam * eta_sup))[None] * inv_mu.reshape(bshape)
    alpha_max = float(np.max(alpha[1:-1]))
    C0 = float(np.exp(2.0 * lam * eta_sup) - np.exp(lam * eta_sup))
    return CarlemanWeights(grid, eta, float(lam), mu, phi, alpha, eta_sup, alpha_max, C0)


def check_weight_invariants(weights: CarlemanWeights, rtol=1e-12) -> dict:
    """Nodewise checks of the weight-function properties.

    The gradient condition off ``omega0`` is tested on the closed box minus its
    corner nodes in two dimensions: a C^1 function vanishing on two edges that
    meet at a corner has zero gradient there.
    """
    grid = weights.grid
    eta = weights.eta
    out = {}
    out["eta_positive_interior"] = bool(np.all(eta[grid.interior_mask] > 0))
    out["eta_zero_boundary"] = bool(np.all(eta[grid.boundary_mask] == 0))
    grad = np.zeros((grid.d,) + grid.shape)
    for a, x in enumerate(grid.coords):
        comp = 1.0 - 2.0 * x
        for b, xb in enumerate(grid.coords):
            if b != a:
                comp = comp * xb * (1.0 - xb)
        grad[a] = comp
    mag = np.sqrt(np.sum(grad**2, axis=0))
    off = ~grid.omega0_mask
    if grid.d == 2:
        corners = np.zeros(grid.shape, dtype=bool)
        for i in (0, -1):
            for j in (0, -1):
                corners[i, j] = True
        off &= ~corners
    out["grad_eta_min_off_omega0"] = float(mag[off].min())
    out["grad_eta_positive_off_omega0"] = bool(mag[off].min() > 0)
    act = weights.active
    alpha = weights.alpha[act]
    out["alpha_negative"] = bool(np.all(alpha < 0))
    out["phi_positive"] = bool(np.all(weights.phi[act] > 0))
    k0 = grid.t0_index
    mu0 = weights.mu[k0]
    lhs = weights.alpha[k0][None] - alpha
    inv = 1.0 / weights.mu[act] - 1.0 / mu0
    rhs = weights.C0 * inv.reshape((-1,) + (1,) * grid.d)
    slack = lhs - rhs
    # both sides vanish at t0, so the tolerance is scaled by |alpha| itself
    scale = np.max(np.abs(alpha))
    tol = rtol * np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), scale)
    out["alpha_t0_bound_min_slack"] = float(np.min(slack + tol))
    out["alpha_t0_bound"] = bool(np.all(slack >= -tol))
    out["all"] = all(v for k, v in out.items() if isinstance(v, bool))
    return out


def default_s_values(weights: CarlemanWeights, multipliers=DEFAULT_MULTIPLIERS):
    """Geometric sweep ``k * T^2/4 * exp(lam * eta_sup)``."""
    base = weights.grid.T**2 / 4.0 * np.exp(weights.lam * weights.eta_sup)
    return [float(k * base) for k in multipliers]


def _weight(weights, s, power, shift=None):
    """``(s phi)^power * exp(2 s (alpha - shift))`` on active levels."""
    shift = weights.alpha_max if shift is None else shift
    act = weights.active
    w = np.exp(2.0 * s * (weights.alpha[act] - shift))
    if power:
        w = w * (s * weights.phi[act]) ** power
    return w


def _integrate_q(values, weights, mask=None):
    """Space-time quadrature over active levels (interior time weights dt)."""
    grid = weights.grid
    wx = quadrature_weights(grid, mask)
    return float(grid.dt * np.sum(values * wx))


def weighted_integral(integrand, weights: CarlemanWeights, s: float, power_of_phi: int = 0,
                      mask=None, shift=None) -> float:
    """``int_Q integrand (s phi)^k exp(2 s (alpha - shift)) dx dt``."""
    if s <= 0:
        raise ValueError("s must be positive")
    integrand = np.broadcast_to(np.asarray(integrand, dtype=float), weights.grid.st_shape)
    vals = integrand[weights.active] * _weight(weights, s, power_of_phi, shift)
    return _integrate_q(vals, weights, mask)


def mass_fraction_near_t0(weights: CarlemanWeights, s: float, window=None) -> float:
    """Share of the weighted unit mass inside ``|t - t0| <= window``."""
    grid = weights.grid
    window = grid.T / 8.0 if window is None else window
    near = np.abs(grid.times - grid.t0) <= window + 1e-12
    ones = np.ones(grid.st_shape)
    total = weighted_integral(ones, weights, s)
    part = weighted_integral(ones * near.reshape((-1,) + (1,) * grid.d), weights, s)
    return part / total


def _norm2_components(v, ncomp_axes, lead=1):
    out = v**2
    for _ in range(ncomp_axes):
        out = np.sum(out, axis=lead)
    return out


def lemma1_backward_ratio(ytilde, weights: CarlemanWeights, s: float, shift=None) -> RatioEntry:
    """Both sides of the weighted estimate for the backward operator ``d_t + Lap``."""
    grid = weights.grid
    y = np.asarray(ytilde, dtype=float)
    yt = time_derivative(y, grid)
    grad = gradient_fd(y, grid)
    hess = hessian_fd(y, grid)
    hess2 = _norm2_components(hess, 2)
    grad2 = _norm2_components(grad, 1)
    resid = yt + laplacian_fd(y, grid)
    lhs = (weighted_integral(hess2 + yt**2, weights, s, -1, shift=shift)
           + weighted_integral(grad2, weights, s, 1, shift=shift)
           + weighted_integral(y**2, weights, s, 3, shift=shift))
    rhs = (weighted_integral(resid**2, weights, s, 0, shift=shift)
           + weighted_integral(y**2, weights, s, 3, mask=grid.omega_mask, shift=shift))
    return RatioEntry(s, lhs, rhs)


def lemma1_divergence_ratio(ztilde, G, weights: CarlemanWeights, s: float, shift=None,
                            residual_tol=0.1) -> RatioEntry:
    """Both sides of the estimate for ``z_t - Lap z = div G``.

    Warns when the RMS of the discrete equation residual exceeds
    ``residual_tol`` times the RMS of ``div G``; the ratio is then not
    meaningful.
    """
    grid = weights.grid
    z = np.asarray(ztilde, dtype=float)
    G = np.asarray(G, dtype=float)
    divG = divergence_fd(G, grid)
    resid = time_derivative(z, grid) - laplacian_fd(z, grid) - divG
    inner = (slice(1, -1),) + grid.interior
    scale = np.sqrt(np.mean(divG[inner] ** 2))
    if scale > 0 and np.sqrt(np.mean(resid[inner] ** 2)) > residual_tol * scale:
        warnings.warn("divergence-form residual exceeds tolerance; ratio unreliable",
                      stacklevel=2)
    grad2 = _norm2_components(gradient_fd(z, grid), 1)
    G2 = _norm2_components(G, 1)
    lhs = (weighted_integral(grad2, weights, s, -1, shift=shift)
           + weighted_integral(z**2, weights, s, 1, shift=shift))
    rhs = (weighted_integral(G2, weights, s, 0, shift=shift)
           + weighted_integral(z**2, weights, s, 1, mask=grid.omega_mask, shift=shift))
    return RatioEntry(s, lhs, rhs)


def _D(y, z, weights, s, shift):
    mask = weights.grid.omega_mask
    return (weighted_integral(y**2, weights, s, 3, mask=mask, shift=shift)
            + weighted_integral(z**2, weights, s, 1, mask=mask, shift=shift))


def _time_derivatives(linsol, route):
    grid = linsol.grid
    if route == "solve":
        if linsol.y1 is None or linsol.z1 is None:
            raise ValueError("route='solve' needs y1 and z1 on the linearized solution")
        return linsol.y1, linsol.z1
    if route != "difference":
        raise ValueError(f"unknown route {route!r}")
    return time_derivative(linsol.y, grid), time_derivative(linsol.z, grid)


def key_estimate_ratio(linsol: LinearizedSolution, f, weights: CarlemanWeights, s: float,
                       route="difference", shift=None) -> RatioEntry:
    """Both sides of the combined estimate for ``(y, z)`` and ``(y_t, z_t)``.

    ``route`` selects where ``(y_t, z_t)`` come from: difference quotients of
    the stored trajectories or the time-differentiated solve.
    """
    grid = weights.grid
    y, z = linsol.y, linsol.z
    y1, z1 = _time_derivatives(linsol, route)
    ytt = second_time_derivative(y, grid)
    lhs = (weighted_integral(ytt**2, weights, s, -1, shift=shift)
           + weighted_integral(y1**2, weights, s, 3, shift=shift)
           + weighted_integral(z**2 + z1**2, weights, s, 1, shift=shift))
    f = np.asarray(f, dtype=float)
    rhs = (weighted_integral(f**2, weights, s, 0, shift=shift)
           + _D(y, z, weights, s, shift) + _D(y1, z1, weights, s, shift))
    return RatioEntry(s, lhs, rhs)


def slice_energy_check(linsol: LinearizedSolution, weights: CarlemanWeights, s: float,
                       shift=None) -> dict:
    """Slice energies at ``t0`` against the space-time integrals bounding them.

    Reports both sides and the implied constant for the ``y_t`` slice and for
    the ``z`` slice.
    """
    grid = weights.grid
    shift = weights.alpha_max if shift is None else shift
    k0 = grid.t0_index
    y, z = linsol.y, linsol.z
    yt = time_derivative(y, grid)
    ytt = second_time_derivative(y, grid)
    zt = time_derivative(z, grid)
    wx = quadrature_weights(grid)
    w0 = np.exp(2.0 * s * (weights.alpha[k0] - shift))
    slice_y = float(np.sum(wx * yt[k0] ** 2 * w0 / weights.phi[k0]))
    bound_y = (weighted_integral(yt**2, weights, s, 1, shift=shift)
               + weighted_integral(ytt**2, weights, s, -1, shift=shift))
    slice_z = float(np.sum(wx * z[k0] ** 2 * w0))
    bound_z = (weighted_integral(z**2, weights, s, 1, shift=shift)
               + weighted_integral(z**2 + zt**2, weights, s, 0, shift=shift))

    def _c(a, b):
        if b == 0.0:
            return np.nan if a == 0.0 else np.inf
        return a / b

    return {
        "s": s,
        "slice_y": slice_y,
        "bound_y": bound_y,
        "constant_y": _c(slice_y, bound_y),
        "slice_z": slice_z,
        "bound_z": bound_z,
        "constant_z": _c(slice_z, bound_z),
    }


def ratio_sweep(evaluate, s_values, label, lam) -> RatioReport:
    """Collect ``evaluate(s)`` over an s-sweep into a :class:`RatioReport`."""
    entries = parallel_map(evaluate, list(s_values))
    return RatioReport(label, lam, entries)


def trial_reports(sol1, sol2, p1, p2, c0, weights: CarlemanWeights, s_values,
                  route="difference", params=None) -> dict:
    """Ratio reports for one forward pair solved with ``p1`` and ``p2``.

    The linearized pair supplies the test functions: ``y`` for the backward
    estimate, ``z`` with its divergence-form source for the forward estimate,
    and ``(y, z, y_t, z_t)`` for the combined estimate.  Returns the
    reports keyed by label and the linearized solution they were built from.
    """
    grid = weights.grid
    coeffs = assemble_coefficients(sol1, sol2, p2, c0)
    f = 0.5 * (np.asarray(p1, dtype=float) - np.asarray(p2, dtype=float))
    linsol = solve_time_differentiated(coeffs, f, c0, params)
    G = (coeffs.r2 * linsol.z[:, None]
         + coeffs.r3[:, None] * gradient_fd(linsol.y, grid)
         + coeffs.h * f)
    lam = weights.lam
    evaluators = {
        "backward": lambda s: lemma1_backward_ratio(linsol.y, weights, s),
        "divergence": lambda s: lemma1_divergence_ratio(linsol.z, G, weights, s),
        "key_estimate": lambda s: key_estimate_ratio(linsol, f, weights, s, route=route),
    }
    reports = {name: ratio_sweep(fn, s_values, name, lam) for name, fn in evaluators.items()}
    return reports, linsol

"""Empirical Lipschitz-stability experiments for the Hamiltonian factor.

For two coefficients ``p1``, ``p2`` the harness runs both forward solves and
compares ``||p1 - p2||_{L2}`` with the data norm

    ||y(., t0)||_{H2} + ||y||_{H1(0,T; L2(omega))} + ||z||_{H1(0,T; L2(omega))},

where ``y = u1 - u2`` and ``z = v1 - v2``.  The quotient of the two is the
empirical stability constant for that pair.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .forward import (
    MfgBoundaryData,
    MfgCoefficients,
    MfgSolution,
    SolverParams,
    check_nondegeneracy,
    regularity_bounds,
    solve_mfg,
)
from .grid import Grid, norm_H1t_L2, norm_H2_slice, norm_L2
from .parallel import parallel_map
from .validation import check_field, check_same_grid

logger = logging.getLogger(__name__)

__all__ = [
    "LabSetup",
    "default_setup",
    "default_base_p",
    "data_norms",
    "summarise",
    "record_dict",
    "ObservationData",
    "StabilityRecord",
    "SweepResult",
    "extract_observations",
    "perturbation_family",
    "theorem1_ratio",
    "sweep_perturbations",
    "SWEEP_COLUMNS",
]

SWEEP_COLUMNS = ["family", "member", "amplitude", "lhs", "rhs_h2", "rhs_y", "rhs_z",
                 "ratio", "delta_est", "flags"]


@dataclass
class LabSetup:
    """Everything except ``p`` needed to run a forward solve."""

    grid: Grid
    c0: np.ndarray
    bdata: MfgBoundaryData
    params: SolverParams = field(default_factory=SolverParams)
    M: float = 200.0
    delta_min: float = 0.05
    zero_traces: bool = False
    nondegeneracy_mask: np.ndarray | None = None
    support: tuple = (0.1, 0.9)

    def coefficients(self, p) -> MfgCoefficients:
        return MfgCoefficients(check_field(p, self.grid, "p"), self.c0, self.M)

    def solve(self, p) -> MfgSolution:
        return solve_mfg(self.grid, self.coefficients(p), self.bdata, self.params)

    def mask(self) -> np.ndarray:
        if self.nondegeneracy_mask is not None:
            return self.nondegeneracy_mask
        if self.zero_traces:
            return self.grid.collar_mask(2.0 * self.grid.h)
        return np.ones(self.grid.shape, dtype=bool)


def default_base_p(grid: Grid) -> np.ndarray:
    p = np.ones(grid.shape)
    bump = np.ones(grid.shape)
    for x in grid.coords:
        bump = bump * np.sin(np.pi * x)
    return p + 0.2 * bump


def default_setup(grid: Grid, traces="nonzero", c0=0.5, params=None, **kwargs) -> LabSetup:
    """Standard experiment: ``u_T = x_0`` with matching traces, ``v_0`` a bump.

    ``traces="zero"`` replaces the value data by a zero-trace bump, which
    forces an interior critical point of ``u(., t0)``.
    """
    density = np.ones(grid.shape)
    for x in grid.coords:
        density = density * np.sin(np.pi * x)
    if traces == "nonzero":
        x0 = grid.coords[0]
        bdata = MfgBoundaryData(u_T=x0.copy(), v_0=density,
                                b_u=np.broadcast_to(x0, grid.st_shape).copy())
        zero = False
    elif traces == "zero":
        bdata = MfgBoundaryData(u_T=density.copy(), v_0=density)
        zero = True
    else:
        raise ValueError(f"traces must be 'nonzero' or 'zero', got {traces!r}")
    return LabSetup(grid, check_field(c0, grid, "c0"), bdata,
                    params or SolverParams(), zero_traces=zero, **kwargs)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


@dataclass
class ObservationData:
    grid: Grid
    y_omega: np.ndarray
    z_omega: np.ndarray
    y_slice_t0: np.ndarray
    noise_level: float = 0.0
    rng_seed: int = 0


def extract_observations(sol1: MfgSolution, sol2: MfgSolution, grid: Grid | None = None,
                         noise_level=0.0, rng_seed=0) -> ObservationData:
    """Restrict the solution differences to the observation set, optionally noisy.

    Noise is uniform in ``[-noise_level * scale, noise_level * scale]`` with
    ``scale`` the sup-norm of the clean field, drawn at observed nodes only
    (omega for the trajectories, interior nodes for the slice).
    """
    grid = check_same_grid(grid or sol1.grid, sol1.grid, sol2.grid)
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    om = grid.omega_mask
    y_omega = np.where(om, sol1.u - sol2.u, 0.0)
    z_omega = np.where(om, sol1.v - sol2.v, 0.0)
    y_slice = (sol1.u - sol2.u)[grid.t0_index].copy()
    if noise_level > 0:
        rng = np.random.default_rng(rng_seed)
        for arr, mask in ((y_omega, np.broadcast_to(om, grid.st_shape)),
                          (z_omega, np.broadcast_to(om, grid.st_shape)),
                          (y_slice, grid.interior_mask)):
            scale = np.max(np.abs(arr))
            draw = rng.uniform(-1.0, 1.0, size=arr.shape)
            arr += np.where(mask, noise_level * scale * draw, 0.0)
    return ObservationData(grid, y_omega, z_omega, y_slice, noise_level, rng_seed)


def data_norms(obs: ObservationData) -> tuple:
    grid = obs.grid
    return (
        norm_H2_slice(obs.y_slice_t0, grid),
        norm_H1t_L2(obs.y_omega, grid, grid.omega_mask),
        norm_H1t_L2(obs.z_omega, grid, grid.omega_mask),
    )


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class StabilityRecord:
    lhs: float
    rhs_h2: float
    rhs_y: float
    rhs_z: float
    delta_est: float
    amplitude: float = 0.0
    family: str = ""
    member: str = ""
    converged: bool = True
    degenerate: bool = False
    admissible: bool = True
    M: float = 200.0

    @property
    def ratio(self) -> float:
        return self.ratio_with(("h2", "y", "z"))

    def ratio_with(self, terms) -> float:
        """Stability quotient using only the listed data terms."""
        rhs = sum(getattr(self, f"rhs_{t}") for t in terms)
        if rhs == 0.0:
            return 0.0 if self.lhs == 0.0 else np.inf
        return self.lhs / rhs

    @property
    def flags(self) -> str:
        out = []
        if not self.converged:
            out.append("nonconverged")
        if self.degenerate:
            out.append("degenerate")
        if not self.admissible:
            out.append("inadmissible")
        return "|".join(out)

    def row(self):
        return [self.family, self.member, self.amplitude, self.lhs, self.rhs_h2,
                self.rhs_y, self.rhs_z, self.ratio, self.delta_est, self.flags]


def _record(setup, p1, p2, sol1, sol2, **meta) -> StabilityRecord:
    grid = setup.grid
    obs = extract_observations(sol1, sol2, grid)
    h2, ry, rz = data_norms(obs)
    delta = check_nondegeneracy(sol1.u, grid, setup.mask())
    admissible = True
    for p, sol in ((p1, sol1), (p2, sol2)):
        adm = setup.coefficients(p).admissibility(grid)
        bounds = regularity_bounds(sol)
        admissible &= adm["admissible"] and max(bounds.values()) <= setup.M
    return StabilityRecord(
        lhs=norm_L2(p1 - p2, grid), rhs_h2=h2, rhs_y=ry, rhs_z=rz,
        delta_est=delta, converged=sol1.converged and sol2.converged,
        degenerate=delta < setup.delta_min, admissible=bool(admissible), M=setup.M,
        **meta,
    )


def theorem1_ratio(p1, p2, setup: LabSetup, **meta) -> StabilityRecord:
    """Run both forward solves and compute one stability record (noiseless)."""
    p1 = check_field(p1, setup.grid, "p1")
    p2 = check_field(p2, setup.grid, "p2")
    sol1 = setup.solve(p1)
    sol2 = sol1 if np.array_equal(p1, p2) else setup.solve(p2)
    return _record(setup, p1, p2, sol1, sol2, **meta)


# ---------------------------------------------------------------------------
# perturbation families and sweeps
# ---------------------------------------------------------------------------


def _cutoff(grid, support):
    lo, hi = support
    out = np.ones(grid.shape)
    for x in grid.coords:
        inside = (x > lo) & (x < hi)
        out = out * np.where(inside, np.sin(np.pi * (x - lo) / (hi - lo)) ** 2, 0.0)
    return out


def _normalise(f):
    m = np.max(np.abs(f))
    return f / m if m > 0 else f


def perturbation_family(grid: Grid, family_spec: dict, support=(0.1, 0.9)):
    """Return ``[(member_name, field)]`` with every field scaled to sup-norm one.

    Supported kinds: ``fourier_modes`` (``k_max``), ``random_smooth``
    (``seed``, ``correlation_length``, ``members``) and ``localized_bump``
    (``centers``, ``width``).  Fourier and random members are multiplied by a
    smooth cutoff vanishing outside ``support``.
    """
    kind = family_spec.get("kind")
    cut = _cutoff(grid, support)
    members = []
    if kind == "fourier_modes":
        for k in range(1, int(family_spec.get("k_max", 4)) + 1):
            mode = np.ones(grid.shape)
            for x in grid.coords:
                mode = mode * np.sin(k * np.pi * x)
            members.append((f"k={k}", _normalise(mode * cut)))
    elif kind == "random_smooth":
        seed = int(family_spec.get("seed", 0))
        ell = float(family_spec.get("correlation_length", 0.2))
        n_modes = int(family_spec.get("n_modes", 12))
        for i in range(int(family_spec.get("members", 4))):
            rng = np.random.default_rng(seed + i)
            field_ = np.zeros(grid.shape)
            for ks in np.ndindex(*(n_modes,) * grid.d):
                ks = np.array(ks) + 1
                amp = np.exp(-0.25 * (ell * np.pi) ** 2 * np.sum(ks**2))
                mode = np.ones(grid.shape)
                for k, x in zip(ks, grid.coords):
                    mode = mode * np.sin(k * np.pi * x)
                field_ += amp * rng.standard_normal() * mode
            members.append((f"seed={seed + i}", _normalise(field_ * cut)))
    elif kind == "localized_bump":
        width = float(family_spec.get("width", 0.15))
        for c in family_spec.get("centers", [[0.5] * grid.d]):
            c = np.broadcast_to(np.asarray(c, dtype=float), (grid.d,))
            bump = np.ones(grid.shape)
            for ci, x in zip(c, grid.coords):
                r = np.abs(x - ci)
                bump = bump * np.where(r < width, np.cos(0.5 * np.pi * r / width) ** 2, 0.0)
            name = "center=" + ",".join(f"{v:g}" for v in c)
            members.append((name, _normalise(bump)))
    else:
        raise ValueError(f"unknown perturbation family {kind!r}")
    return members


@dataclass
class SweepResult:
    records: list
    summary: dict

    def rows(self):
        return [r.row() for r in self.records]


def summarise(records, M) -> dict:
    good = [r for r in records if not r.degenerate and r.converged and np.isfinite(r.ratio)
            and r.lhs > 0]
    if not good:
        return {"empirical_C": None, "n_records": len(records), "n_used": 0, "M": M}
    best = max(good, key=lambda r: r.ratio)
    ratios = np.array([r.ratio for r in good])
    return {
        "empirical_C": float(best.ratio),
        "argmax": {"family": best.family, "member": best.member,
                   "amplitude": best.amplitude},
        "delta_est_at_argmax": best.delta_est,
        "min_ratio": float(ratios.min()),
        "spread": float(ratios.max() / ratios.min()),
        "n_records": len(records),
        "n_used": len(good),
        "M": M,
    }


def sweep_perturbations(base_p, family_spec: dict, amplitudes, setup: LabSetup,
                        base_seed: int = 0) -> SweepResult:
    """One record per (family member, amplitude) with ``p2 = base_p + a * member``.

    ``base_seed`` feeds the ``random_smooth`` family when its spec carries no
    seed of its own.
    """
    base_p = check_field(base_p, setup.grid, "base_p")
    amplitudes = list(amplitudes)
    if not amplitudes:
        return SweepResult([], summarise([], setup.M))
    spec = dict(family_spec)
    spec.setdefault("seed", base_seed)
    members = perturbation_family(setup.grid, spec, setup.support)
    base_sol = setup.solve(base_p)
    jobs = [(name, fld, a) for name, fld in members for a in amplitudes]

    def run(job):
        name, fld, a = job
        p2 = base_p + a * fld
        sol2 = setup.solve(p2)
        return _record(setup, base_p, p2, base_sol, sol2, amplitude=float(a),
                       family=spec["kind"], member=name)

    records = parallel_map(run, jobs)
    return SweepResult(records, summarise(records, setup.M))


def record_dict(record: StabilityRecord) -> dict:
    out = asdict(record)
    out["ratio"] = record.ratio
    out["flags"] = record.flags
    return out


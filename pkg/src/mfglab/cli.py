"""Config-driven command line entry point.

One invocation runs one experiment from one JSON config and writes every
artifact into one output directory, together with ``resolved_config.json``
(all defaults filled in) and ``status.json``.

Exit codes
----------
0  success
1  ran, but some result carries a flag (non-convergence, degeneracy, ...)
2  configuration error (nothing was solved)
3  solver failure
"""

from __future__ import annotations

import argparse
import ast
import copy
import json
import logging
import os
import sys
import time

import numpy as np

from . import io as mio
from .carleman import (
    build_eta,
    check_weight_invariants,
    default_s_values,
    eval_weights,
    mass_fraction_near_t0,
    slice_energy_check,
    trial_reports,
)
from .forward import NewtonDivergenceError, SolverParams, regularity_bounds
from .grid import GridError, build_grid
from .linearized import assemble_coefficients, linearization_gap, solve_linearized
from .linsys import LinearSolveError
from .reconstruction import (
    KnownData,
    ReconstructionConfig,
    reconstruct_direct_slice,
    reconstruct_least_squares,
    slice_data_from_solutions,
)
from .stability import (
    SWEEP_COLUMNS,
    default_base_p,
    default_setup,
    extract_observations,
    perturbation_family,
    sweep_perturbations,
    theorem1_ratio,
)

logger = logging.getLogger("mfglab")

EXIT_SUCCESS = 0
EXIT_FLAGGED = 1
EXIT_CONFIG_ERROR = 2
EXIT_SOLVER_FAILURE = 3

COMMANDS = ("forward", "linearize", "carleman", "stability", "reconstruct")

DEFAULTS = {
    "seed": 0,
    "output_dir": "mfglab_out",
    "grid": {
        "d": 1,
        "n": 99,
        "T": 1.0,
        "nt": 200,
        "omega": [0.3, 0.7],
        "omega0": [0.4, 0.6],
        "t0_fraction": 0.5,
    },
    "forward": {
        "p": "base",
        "c0": 0.5,
        "traces": "nonzero",
        "M": 200.0,
        "support": [0.1, 0.9],
        "picard_tol": 1e-9,
        "picard_max_iter": 100,
        "damping": 0.5,
        "newton_steps": 2,
        "linear_solver_tol": 1e-11,
    },
    "perturbation": {
        "kind": "fourier_modes",
        "k_max": 1,
        "member": 0,
        "amplitude": 0.1,
    },
    "carleman": {
        "lambda": 2.0,
        "s_multipliers": [1, 2, 4, 8, 16, 32],
        "route": "difference",
        "trials": 1,
        "correlation_length": 0.2,
    },
    "stability": {
        "family": {"kind": "fourier_modes", "k_max": 4},
        "amplitudes": [0.1, 0.02, 0.004],
        "delta_min": 0.05,
    },
    "reconstruction": {
        "method": "direct_slice",
        "g_floor": 1e-3,
        "regularization_weight": 0.0,
        "p_parameterization": 8,
        "max_gn_iterations": 15,
        "misfit_tol": 1e-20,
        "use_slice": True,
        "noise_level": 0.0,
        "time_quotient": "scheme",
    },
}

# Keys accepted inside a perturbation-family spec, per kind.
FAMILY_KEYS = {
    "fourier_modes": {"kind", "k_max"},
    "random_smooth": {"kind", "seed", "correlation_length", "members", "n_modes"},
    "localized_bump": {"kind", "centers", "width"},
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _check_family(spec, where, extra=()):
    if not isinstance(spec, dict):
        raise ConfigError(f"{where} must be an object")
    kind = spec.get("kind")
    if kind not in FAMILY_KEYS:
        raise ConfigError(f"{where}.kind: unknown family {kind!r}")
    allowed = FAMILY_KEYS[kind] | set(extra)
    for key in spec:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{where}.{key}'")


def resolve_config(user: dict, seed_override=None, out_override=None) -> dict:
    """Merge ``user`` over :data:`DEFAULTS`, rejecting unknown keys."""
    if not isinstance(user, dict):
        raise ConfigError("config root must be an object")
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in user.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key '{key}'")
        if key == "perturbation":
            merged = {"member": 0, "amplitude": 0.1}
            merged.update(value if isinstance(value, dict) else {})
            _check_family(merged, "perturbation", extra=("member", "amplitude"))
            cfg[key] = merged
        elif isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section '{key}' must be an object")
            for sub, subval in value.items():
                if sub not in cfg[key]:
                    raise ConfigError(f"unknown config key '{key}.{sub}'")
                cfg[key][sub] = subval
        else:
            cfg[key] = value
    _check_family(cfg["stability"]["family"], "stability.family")
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    if out_override is not None:
        cfg["output_dir"] = str(out_override)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


_ALLOWED_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt,
                  "abs": np.abs, "tanh": np.tanh}
_ALLOWED_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
                  ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow,
                  ast.USub, ast.UAdd)


def field_from_spec(spec, grid, key):
    """Number, ``"base"`` or an arithmetic expression in ``x0``, ``x1``."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return np.full(grid.shape, float(spec))
    if spec == "base":
        return default_base_p(grid)
    if not isinstance(spec, str):
        raise ConfigError(f"{key}: expected a number, 'base' or an expression")
    try:
        tree = ast.parse(spec, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"{key}: cannot parse expression {spec!r}") from exc
    names = {"pi": np.pi, **_ALLOWED_FUNCS}
    names.update({f"x{i}": x for i, x in enumerate(grid.coords)})
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigError(f"{key}: disallowed syntax {type(node).__name__}")
        if isinstance(node, ast.Name) and node.id not in names:
            raise ConfigError(f"{key}: unknown name {node.id!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name)
                                               and node.func.id in _ALLOWED_FUNCS):
            raise ConfigError(f"{key}: only {sorted(_ALLOWED_FUNCS)} may be called")
    value = eval(compile(tree, "<field>", "eval"), {"__builtins__": {}}, names)  # noqa: S307
    return np.broadcast_to(np.asarray(value, dtype=float), grid.shape).copy()


class _Context:
    """Objects built from a resolved config before any solve happens."""

    def __init__(self, cfg):
        self.cfg = cfg
        g = cfg["grid"]
        try:
            self.grid = build_grid(
                d=int(g["d"]), n=int(g["n"]), T=float(g["T"]), nt=int(g["nt"]),
                omega_spec=tuple(g["omega"]), omega0_spec=tuple(g["omega0"]),
                t0_fraction=float(g["t0_fraction"]),
            )
        except (GridError, TypeError, ValueError) as exc:
            raise ConfigError(f"grid: {exc}") from exc
        fw = cfg["forward"]
        try:
            params = SolverParams(
                picard_tol=float(fw["picard_tol"]),
                picard_max_iter=int(fw["picard_max_iter"]),
                damping=float(fw["damping"]),
                newton_steps=int(fw["newton_steps"]),
                linear_solver_tol=float(fw["linear_solver_tol"]),
            )
            c0 = field_from_spec(fw["c0"], self.grid, "forward.c0")
            self.setup = default_setup(
                self.grid, traces=fw["traces"], c0=c0, params=params,
                M=float(fw["M"]), delta_min=float(cfg["stability"]["delta_min"]),
                support=tuple(fw["support"]),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"forward: {exc}") from exc
        self.p = field_from_spec(fw["p"], self.grid, "forward.p")

    def perturbed_p(self):
        spec = dict(self.cfg["perturbation"])
        member = int(spec.pop("member"))
        amp = float(spec.pop("amplitude"))
        if spec["kind"] == "random_smooth":
            spec.setdefault("seed", self.cfg["seed"])
        members = perturbation_family(self.grid, spec, self.setup.support)
        if not 0 <= member < len(members):
            raise ConfigError(f"perturbation.member: index {member} out of range")
        name, fld = members[member]
        return self.p + amp * fld, name


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_forward(ctx, out):
    sol = ctx.setup.solve(ctx.p)
    grid = ctx.grid
    mio.write_field_csv(os.path.join(out, "u.csv"), grid, sol.u)
    mio.write_field_csv(os.path.join(out, "v.csv"), grid, sol.v)
    mio.write_field_binary(os.path.join(out, "u.bin"), grid, sol.u)
    mio.write_field_binary(os.path.join(out, "v.bin"), grid, sol.v)
    with open(os.path.join(out, "diagnostics.jsonl"), "w", newline="\n") as fh:
        for line in sol.diagnostics_lines():
            fh.write(line + "\n")
    adm = ctx.setup.coefficients(ctx.p).admissibility(grid)
    bounds = regularity_bounds(sol)
    over_M = {k: v for k, v in bounds.items() if v > ctx.setup.M}
    flags = []
    if not sol.converged:
        flags.append("nonconverged")
    if not adm.get("admissible", True):
        flags.append("inadmissible")
    if over_M:
        flags.append("regularity_above_M")
    return flags, {"solution": sol.summary(), "regularity": bounds, "admissibility": adm}


def _pair(ctx):
    p1, member = ctx.perturbed_p()
    sol1 = ctx.setup.solve(p1)
    sol2 = ctx.setup.solve(ctx.p)
    return p1, member, sol1, sol2


def cmd_linearize(ctx, out):
    p1, member, sol1, sol2 = _pair(ctx)
    p2 = ctx.p
    coeffs = assemble_coefficients(sol1, sol2, p2, ctx.setup.c0)
    linsol = solve_linearized(coeffs, 0.5 * (p1 - p2), ctx.setup.c0, ctx.setup.params)
    grid = ctx.grid
    mio.write_field_csv(os.path.join(out, "y.csv"), grid, linsol.y)
    mio.write_field_csv(os.path.join(out, "z.csv"), grid, linsol.z)
    gap = linearization_gap(linsol, sol1, sol2)
    flags = [] if (linsol.converged and sol1.converged and sol2.converged) else ["nonconverged"]
    return flags, {"member": member, "gap": gap, "coefficient_sup_norms": coeffs.sup_norms(),
                   "iterations": linsol.iterations}


def cmd_carleman(ctx, out):
    cc = ctx.cfg["carleman"]
    grid = ctx.grid
    lam = float(cc["lambda"])
    if lam <= 0:
        raise ConfigError("carleman.lambda must be positive")
    weights = eval_weights(build_eta(grid), lam, grid)
    invariants = check_weight_invariants(weights)
    s_values = default_s_values(weights, tuple(cc["s_multipliers"]))
    mio.write_table_csv(
        os.path.join(out, "mass_fraction.csv"), ["s", "lambda", "fraction"],
        [[s, lam, mass_fraction_near_t0(weights, s)] for s in s_values],
    )
    trials = int(cc["trials"])
    if trials < 1:
        raise ConfigError("carleman.trials must be at least 1")
    spec = {"kind": "random_smooth", "seed": ctx.cfg["seed"], "members": trials,
            "correlation_length": float(cc["correlation_length"])}
    members = perturbation_family(grid, spec, ctx.setup.support)
    amp = float(ctx.cfg["perturbation"]["amplitude"])
    p1 = ctx.p
    sol1 = ctx.setup.solve(p1)
    flags = [] if invariants["all"] else ["weight_invariants_failed"]
    summary = []
    for t, (name, fld) in enumerate(members):
        p2 = p1 + amp * fld
        sol2 = ctx.setup.solve(p2)
        if not (sol1.converged and sol2.converged):
            flags.append(f"nonconverged:trial{t:02d}")
        reports, linsol = trial_reports(sol1, sol2, p1, p2, ctx.setup.c0, weights, s_values,
                                route=cc["route"], params=ctx.setup.params)
        if t == 0:
            mio.write_table_csv(
                os.path.join(out, "slice_energy_trial00.csv"),
                ["s", "slice_y", "bound_y", "constant_y", "slice_z", "bound_z", "constant_z"],
                [[r[k] for k in ("s", "slice_y", "bound_y", "constant_y", "slice_z",
                                 "bound_z", "constant_z")]
                 for r in (slice_energy_check(linsol, weights, s) for s in s_values)],
            )
        for label, rep in reports.items():
            with open(os.path.join(out, f"ratios_{label}_trial{t:02d}.csv"), "w",
                      newline="") as fh:
                fh.write(rep.to_csv())
            summary.append({"trial": t, "member": name, "label": label,
                            "log_slope": rep.log_slope(), "spread": rep.spread(),
                            "verdict": rep.verdict})
            if rep.verdict != "bounded":
                flags.append(f"{rep.verdict}:{label}:trial{t:02d}")
    mio.write_json(os.path.join(out, "ratio_summary.json"), summary)
    return flags, {"invariants": {k: bool(v) for k, v in invariants.items()},
                   "s_values": s_values}


def cmd_stability(ctx, out):
    st = ctx.cfg["stability"]
    amps = [float(a) for a in st["amplitudes"]]
    result = sweep_perturbations(ctx.p, st["family"], amps, ctx.setup,
                                 base_seed=ctx.cfg["seed"])
    control = theorem1_ratio(ctx.p, ctx.p, ctx.setup, family="control", member="zero")
    rows = result.rows() + [control.row()]
    mio.write_table_csv(os.path.join(out, "sweep.csv"), SWEEP_COLUMNS, rows)
    summary = dict(result.summary)
    summary["control_lhs"] = control.lhs
    mio.write_json(os.path.join(out, "summary.json"), summary)
    flags = sorted({f"{r.member}@{r.amplitude:g}:{r.flags}" for r in result.records if r.flags})
    if any(not r.converged for r in result.records):
        flags.append("nonconverged")
    return flags, {"empirical_C": summary.get("empirical_C")}


def cmd_reconstruct(ctx, out):
    rc = dict(ctx.cfg["reconstruction"])
    noise = float(rc.pop("noise_level"))
    tq = rc.pop("time_quotient")
    try:
        config = ReconstructionConfig(**rc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"reconstruction: {exc}") from exc
    p1, member, sol1, sol2 = _pair(ctx)
    grid = ctx.grid
    flags = [] if (sol1.converged and sol2.converged) else ["nonconverged"]
    if config.method == "direct_slice":
        if tq not in ("scheme", "central"):
            raise ConfigError("reconstruction.time_quotient must be 'scheme' or 'central'")
        sd = slice_data_from_solutions(sol1, sol2, ctx.p, ctx.setup.c0, tq)
        res = reconstruct_direct_slice(sd, config, p_diff_true=p1 - ctx.p)
        mio.write_field_csv(os.path.join(out, "p_diff_hat.csv"), grid, res.p_hat)
        if res.metadata["excluded_nodes"]:
            flags.append("g_below_floor")
    else:
        obs = extract_observations(sol1, sol2, grid, noise, ctx.cfg["seed"])
        known = KnownData(ctx.setup, ctx.p, sol2)
        res = reconstruct_least_squares(obs, known, config, p_true=p1)
        mio.write_field_csv(os.path.join(out, "p_hat.csv"), grid, res.p_hat)
        if res.metadata["flagged"]:
            flags.append("forward_solve_flagged")
    meta = {"method": res.method, "rel_l2_error": res.rel_l2_error,
            "misfit_history": res.misfit_history, "member": member, **res.metadata}
    mio.write_json(os.path.join(out, "reconstruction.json"), meta)
    return flags, {"rel_l2_error": res.rel_l2_error}


HANDLERS = {
    "forward": cmd_forward,
    "linearize": cmd_linearize,
    "carleman": cmd_carleman,
    "stability": cmd_stability,
    "reconstruct": cmd_reconstruct,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfglab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="JSON experiment config")
    parser.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, metavar="N", help="base seed (overrides config)")
    parser.add_argument("--quiet", action="store_true", help="only report errors")
    return parser


def _status(out, command, code, flags, info, elapsed):
    names = {EXIT_SUCCESS: "success", EXIT_FLAGGED: "flagged",
             EXIT_CONFIG_ERROR: "config-error", EXIT_SOLVER_FAILURE: "solver-failure"}
    mio.write_json(os.path.join(out, "status.json"), {
        "command": command,
        "exit_code": code,
        "status": names[code],
        "flags": flags,
        "info": info,
        "elapsed_seconds": round(elapsed, 3),
    })


def run(command, config_path=None, out=None, seed=None) -> int:
    """Run one command; returns the exit code (also usable from Python)."""
    start = time.perf_counter()
    try:
        user = {}
        if config_path is not None:
            with open(config_path) as fh:
                user = json.load(fh)
        cfg = resolve_config(user, seed, out)
        ctx = _Context(cfg)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        logger.error("config error: %s", exc)
        if out is not None:
            os.makedirs(out, exist_ok=True)
            _status(out, command, EXIT_CONFIG_ERROR, [], {"error": str(exc)},
                    time.perf_counter() - start)
        return EXIT_CONFIG_ERROR
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    mio.write_json(os.path.join(out, "resolved_config.json"), cfg)
    try:
        flags, info = HANDLERS[command](ctx, out)
        code = EXIT_FLAGGED if flags else EXIT_SUCCESS
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        flags, info, code = [], {"error": str(exc)}, EXIT_CONFIG_ERROR
    except (NewtonDivergenceError, LinearSolveError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        logger.error("solver failure: %s", exc)
        flags, info, code = [], {"error": f"{type(exc).__name__}: {exc}"}, EXIT_SOLVER_FAILURE
    _status(out, command, code, flags, info, time.perf_counter() - start)
    if code == EXIT_FLAGGED:
        logger.warning("%s finished with flags: %s", command, ", ".join(flags))
    else:
        logger.info("%s finished with exit code %d", command, code)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())

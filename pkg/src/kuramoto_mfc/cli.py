"""Command-line entry point: config parsing, dispatch, run manifests.

One run = one subcommand + one output directory.  Every effective parameter
is validated against its module's preconditions before any file is created,
echoed into manifest.json, and sufficient to reproduce the run bit-for-bit
(for the deterministic subcommands).

Exit codes: 0 success, 2 config error, 3 numerical failure (CFL violation
or mass leakage), 4 optimizer stall.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .circle import AngularGrid
from .control import ControlField, CostWeights, OptimizeConfig, optimize, optimize_JN
from .errors import CflError, LeakageError
from .liouville import first_marginal, liouville_solve, relative_entropy, tensorized_law
from .particles import SdeParams, empirical_marginal, run_particles, sample_initial
from .pde import DensityField, PdeParams, TargetDensity, solve_pde
from .profiles import (
    cosine_density,
    line_gaussian,
    tabulated_density,
    uniform_density,
    von_mises_density,
)
from .studies import (
    chaos_rate_study,
    ckp_chain_study,
    gamma_consistency_study,
    l1_distance,
    wrapped_consistency_study,
)

ARTIFACT_VERSION = "0.1.0"

SUBCOMMANDS = (
    "solve-pde", "simulate-particles", "solve-liouville", "optimize",
    "optimize-jn", "chaos-study", "ckp-study", "wrapped-study", "gamma-study",
)


def _positive(v):
    return v > 0


def _nonnegative(v):
    return v >= 0


def _key(name, typ, default, constraint=None, check=None):
    return name, {"type": typ, "default": default, "constraint": constraint,
                  "check": check}


_COMMON = dict([
    _key("out", str, "runs"),
    _key("seed", int, 0, "seed >= 0", _nonnegative),
])

_PHYSICS = dict([
    _key("d", float, 0.5, "D > 0", _positive),
    _key("alpha", float, 0.0),
    _key("t_final", float, 1.0, "t_final > 0", _positive),
    _key("dt", float, 1e-3, "dt > 0", _positive),
    _key("n_theta", int, 256, "n_theta >= 4", lambda v: v >= 4),
])

_CONTROL_CONST = dict([
    _key("u1_const", float, 0.0),
    _key("u2_const", float, 0.0),
])

_WEIGHTS = dict([
    _key("alpha_r", float, 1.0, "alpha_r > 0", _positive),
    _key("alpha_t", float, 1.0, "alpha_t > 0", _positive),
    _key("beta1", float, 1e-2, "beta1 > 0", _positive),
    _key("beta2", float, 1e-2, "beta2 > 0", _positive),
])

_CONTROL_GRID = dict([
    _key("big_m", float, 5.0, "M > 0", _positive),
    _key("q_exp", float, 4.0, "q_exp > 2", lambda v: v > 2),
    _key("n_knots", int, 16, "n_knots >= 1", _positive),
    _key("n_theta_control", int, 64, "n_theta_control >= 4", lambda v: v >= 4),
])

_OPT = dict([
    _key("max_iters", int, 60, "max_iters >= 1", _positive),
    _key("tol", float, 1e-7, "tol > 0", _positive),
])

_SCHEMAS = {
    "solve-pde": {**_COMMON, **_PHYSICS, **_CONTROL_CONST,
                  **dict([_key("q0", str, "cosine:1.0"),
                          _key("n_snapshots", int, 11, "n_snapshots >= 2", lambda v: v >= 2)])},
    "simulate-particles": {**_COMMON, **_PHYSICS, **_CONTROL_CONST,
                           **dict([_key("q0", str, "cosine:1.0"),
                                   _key("n_particles", int, 10000, "n_particles > 0", _positive),
                                   _key("n_snapshots", int, 11, "n_snapshots >= 2", lambda v: v >= 2),
                                   _key("n_theta_hist", int, 64, "n_theta_hist >= 4", lambda v: v >= 4)])},
    # tensor solves default to the coarser grid of the design budget
    "solve-liouville": {**_COMMON, **_PHYSICS, **_CONTROL_CONST,
                        **dict([_key("q0", str, "cosine:1.0"),
                                _key("n_theta", int, 64, "n_theta >= 4", lambda v: v >= 4),
                                _key("n_bodies", int, 2, "n_bodies in {2, 3}", lambda v: v in (2, 3)),
                                _key("n_snapshots", int, 11, "n_snapshots >= 2", lambda v: v >= 2)])},
    "optimize": {**_COMMON, **_PHYSICS, **_WEIGHTS, **_CONTROL_GRID, **_OPT,
                 **dict([_key("q0", str, "uniform"),
                         _key("target", str, "von_mises:3.141592653589793,2.0")])},
    # the N-body optimizer pays two Liouville solves per control degree of
    # freedom per gradient, so its defaults are deliberately coarse
    "optimize-jn": {**_COMMON, **_PHYSICS, **_WEIGHTS, **_CONTROL_GRID, **_OPT,
                    **dict([_key("q0", str, "cosine:1.0"),
                            _key("target", str, "free"),
                            _key("n_bodies", int, 2, "n_bodies in {2, 3}", lambda v: v in (2, 3)),
                            _key("n_theta", int, 48, "n_theta >= 4", lambda v: v >= 4),
                            _key("dt", float, 5e-3, "dt > 0", _positive),
                            _key("t_final", float, 0.5, "t_final > 0", _positive),
                            _key("n_knots", int, 4, "n_knots >= 1", _positive),
                            _key("n_theta_control", int, 8, "n_theta_control >= 4", lambda v: v >= 4),
                            _key("max_iters", int, 5, "max_iters >= 1", _positive)])},
    "chaos-study": {**_COMMON, **_PHYSICS, **_CONTROL_CONST,
                    **dict([_key("q0", str, "cosine:1.0"),
                            _key("n_values", list, [100, 1000, 10000, 100000]),
                            _key("seeds", int, 20, "seeds > 0", _positive),
                            _key("n_theta_hist", int, 32, "n_theta_hist >= 4", lambda v: v >= 4)])},
    "ckp-study": {**_COMMON, **_PHYSICS, **_CONTROL_CONST,
                  **dict([_key("q0", str, "cosine:1.0"),
                          _key("n_theta", int, 64, "n_theta >= 4", lambda v: v >= 4),
                          _key("n_bodies", int, 2, "n_bodies in {2, 3}", lambda v: v in (2, 3)),
                          _key("n_snapshots", int, 11, "n_snapshots >= 2", lambda v: v >= 2)])},
    "wrapped-study": {**_COMMON, **_PHYSICS, **_CONTROL_CONST,
                      **dict([_key("line_q0", str, "gaussian:3.141592653589793,0.5"),
                              _key("domain_periods", int, 8, "domain_periods >= 4", lambda v: v >= 4),
                              _key("n_snapshots", int, 6, "n_snapshots >= 2", lambda v: v >= 2)])},
    "gamma-study": {**_COMMON, **_PHYSICS, **_WEIGHTS,
                    **dict([_key("q0", str, "cosine:1.0"),
                            _key("n_theta", int, 64, "n_theta >= 4", lambda v: v >= 4),
                            _key("target", str, "von_mises:3.141592653589793,2.0"),
                            _key("pairs", list, [[0.0, 1.0], [0.3, 0.5], [0.2, 1.0]]),
                            _key("n_values", list, [1000, 10000, 100000]),
                            _key("seeds", int, 10, "seeds > 0", _positive)])},
}


@dataclass
class RunConfig:
    subcommand: str
    params: dict

    def serialize(self) -> dict:
        return {"subcommand": self.subcommand, **self.params}


def _coerce(key, value, spec):
    typ = spec["type"]
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        value = float(value)
    if typ is int:
        if isinstance(value, bool) or (isinstance(value, float) and value != int(value)):
            raise ValueError(f"config key '{key}' expects an integer, got {value!r}")
        if isinstance(value, (int, float)):
            value = int(value)
    if not isinstance(value, typ):
        raise ValueError(
            f"config key '{key}' expects {typ.__name__}, got {type(value).__name__}"
        )
    if spec["check"] is not None and not spec["check"](value):
        raise ValueError(
            f"config key '{key}' violates constraint '{spec['constraint']}' "
            f"(got {value!r})"
        )
    return value


def parse_config(subcommand: str | None, file_values: dict | None = None,
                 overrides: dict | None = None) -> RunConfig:
    """Merge defaults, config-file values and overrides into a validated RunConfig."""
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    sub = file_values.pop("subcommand", None) or subcommand
    if sub is None:
        raise ValueError("no subcommand given (positional argument or 'subcommand' key)")
    if sub not in _SCHEMAS:
        raise ValueError(f"unknown subcommand '{sub}'; choose from {', '.join(SUBCOMMANDS)}")
    schema = _SCHEMAS[sub]
    params = {k: spec["default"] for k, spec in schema.items()}
    for source in (file_values, overrides):
        for key, value in source.items():
            if key not in schema:
                raise ValueError(f"unknown config key '{key}' for subcommand '{sub}'")
            params[key] = _coerce(key, value, schema[key])
    _cross_validate(params)
    return RunConfig(sub, params)


def _cross_validate(params: dict):
    """Checks spanning several keys, so runs cannot fail after files exist."""
    dt = params.get("dt")
    t_final = params.get("t_final")
    if dt is not None and t_final is not None:
        steps = round(t_final / dt)
        if steps < 1 or abs(steps * dt - t_final) > 1e-9 * max(1.0, t_final):
            raise ValueError(
                f"config keys 't_final'={t_final} and 'dt'={dt} violate "
                "'t_final must be a positive multiple of dt'"
            )
        n_snap = params.get("n_snapshots")
        if n_snap is not None:
            spacing = t_final / (n_snap - 1)
            per = round(spacing / dt)
            if per < 1 or abs(per * dt - spacing) > 1e-9 * max(1.0, spacing):
                raise ValueError(
                    f"config key 'n_snapshots'={n_snap} violates 'snapshot "
                    f"spacing {spacing:.6g} must be a multiple of dt'"
                )


def parse_density_spec(spec: str, grid: AngularGrid) -> np.ndarray:
    """Named density families: uniform | cosine:a | von_mises:mu,kappa | csv:path."""
    name, _, arg = spec.partition(":")
    if name == "uniform":
        return uniform_density(grid)
    if name == "cosine":
        return cosine_density(grid, float(arg) if arg else 1.0)
    if name == "von_mises":
        mu, kappa = (float(v) for v in arg.split(","))
        return von_mises_density(grid, mu, kappa)
    if name == "csv":
        data = np.loadtxt(arg, delimiter=",", skiprows=1)
        return tabulated_density(grid, data[:, 0], data[:, 1])
    raise ValueError(f"unknown density family '{name}' in spec '{spec}'")


def _build_pde_params(p) -> PdeParams:
    return PdeParams(diffusion=p["d"], phase_shift=p["alpha"], dt=p["dt"],
                     t_final=p["t_final"], n_theta=p["n_theta"])


def _const_controls(p, t_final) -> ControlField:
    return ControlField.constant(p["u1_const"], p["u2_const"], AngularGrid(16),
                                 t_final)


def _target_from_spec(spec: str, q0: DensityField, params: PdeParams) -> TargetDensity:
    if spec == "free":
        # dense free-evolution trajectory: always step-aligned
        return TargetDensity.from_trajectory(solve_pde(q0, None, params, None))
    return TargetDensity.constant(parse_density_spec(spec, q0.grid), q0.grid,
                                  params.t_final)


def _run_solve_pde(p, out: Path):
    params = _build_pde_params(p)
    grid = params.grid
    q0 = DensityField(grid, parse_density_spec(p["q0"], grid))
    controls = _const_controls(p, params.t_final)
    times = np.linspace(0.0, params.t_final, p["n_snapshots"])
    snaps = solve_pde(q0, controls, params, times)
    files = [io.write_trajectory_csv(out / "trajectory.csv", snaps)]
    mass_err = max(abs(s.mass() - 1.0) for s in snaps)
    min_value = min(float(s.values.min()) for s in snaps)
    flags = {"mass_conserved": mass_err <= 1e-10, "nonnegative": min_value >= -1e-12}
    info = {"max_mass_error": mass_err, "min_value": min_value,
            "control_hash": controls.content_hash()}
    return files, flags, info


def _run_simulate_particles(p, out: Path):
    params = _build_pde_params(p)
    grid = params.grid
    q0 = DensityField(grid, parse_density_spec(p["q0"], grid))
    sde = SdeParams(p["d"], p["alpha"], p["dt"], p["t_final"])
    controls = _const_controls(p, p["t_final"])
    ens = sample_initial(q0, p["n_particles"], p["seed"])
    times = np.linspace(0.0, p["t_final"], p["n_snapshots"])
    snaps = run_particles(ens, controls, sde, times)
    files = []
    if p["n_particles"] <= 64:
        files.append(io.write_phases_csv(out / "phases.csv", snaps, p["n_particles"]))
    else:
        hist_grid = AngularGrid(p["n_theta_hist"])
        fields = []
        for t, phases in snaps:
            ens.phases = phases
            field = empirical_marginal(ens, hist_grid)
            field.time = t
            fields.append(field)
        files.append(io.write_histogram_csv(out / "histogram.csv", fields))
    return files, {}, {}


def _run_solve_liouville(p, out: Path):
    params = _build_pde_params(p)
    grid = params.grid
    q0 = DensityField(grid, parse_density_spec(p["q0"], grid))
    controls = _const_controls(p, params.t_final)
    times = np.linspace(0.0, params.t_final, p["n_snapshots"])
    joint = liouville_solve(q0, controls, params, p["n_bodies"], times)
    marginals = [first_marginal(s) for s in joint]
    mean_field = solve_pde(q0, controls, params, times)
    refs = tensorized_law(mean_field, p["n_bodies"])
    rows = []
    for state, ref, q in zip(joint, refs, mean_field):
        rows.append((state.time, relative_entropy(state, ref),
                     l1_distance(first_marginal(state), q)))
    files = [
        io.write_trajectory_csv(out / "first_marginal.csv", marginals),
        io.write_csv(out / "entropy.csv", ["t", "relative_entropy", "l1_marginal_distance"], rows),
    ]
    mass_err = max(abs(s.mass() - 1.0) for s in joint)
    min_value = min(float(s.values.min()) for s in joint)
    flags = {"mass_conserved": mass_err <= 1e-10, "nonnegative": min_value >= -1e-12}
    info = {"max_mass_error": mass_err, "min_value": min_value,
            "control_hash": controls.content_hash()}
    return files, flags, info


def _run_optimize(p, out: Path, n_body: int | None = None):
    params = _build_pde_params(p)
    grid = params.grid
    q0 = DensityField(grid, parse_density_spec(p["q0"], grid))
    z = _target_from_spec(p["target"], q0, params)
    weights = CostWeights(p["alpha_r"], p["alpha_t"], p["beta1"], p["beta2"])
    cfg = OptimizeConfig(max_iters=p["max_iters"], tol=p["tol"])
    controls0 = ControlField.zeros(AngularGrid(p["n_theta_control"]), params.t_final,
                                   n_knots=p["n_knots"], q_exp=p["q_exp"],
                                   bound=p["big_m"])
    if n_body is None:
        result = optimize(q0, z, weights, params, cfg, controls0=controls0)
    else:
        result = optimize_JN(q0, z, weights, params, n_body, cfg, controls0=controls0)
    files = [
        io.write_opt_log_csv(out / "optimization_log.csv", result.history),
        io.write_controls_csv(out / "controls.csv", result.controls),
    ]
    totals = [rec["cost"].total for rec in result.history]
    flags = {
        "history_non_increasing": all(b <= a + 1e-15 for a, b in zip(totals, totals[1:])),
        "feasible": result.controls.is_feasible(),
        "stalled": result.stalled,
    }
    info = {"final_cost": totals[-1], "iterations": len(totals) - 1,
            "sup_norm": result.controls.sup_norm(),
            "control_hash": result.controls.content_hash()}
    return files, flags, info, result.stalled


def _run_chaos_study(p, out: Path):
    params = _build_pde_params(p)
    grid = params.grid
    q0 = DensityField(grid, parse_density_spec(p["q0"], grid))
    controls = _const_controls(p, params.t_final)
    result = chaos_rate_study(q0, controls, params,
                              [int(v) for v in p["n_values"]],
                              seeds_per_point=p["seeds"],
                              n_theta_hist=p["n_theta_hist"],
                              base_seed=p["seed"])
    files = [io.write_rate_csv(out / "distances.csv", result)]
    # OLS slope confidence interval from the per-N spread
    x = np.log(np.asarray(result.n_values, dtype=float))
    y = np.log(result.distances)
    resid = y - (np.polyval(np.polyfit(x, y, 1), x))
    dof = max(len(x) - 2, 1)
    slope_se = math.sqrt(float(resid @ resid) / dof / float(((x - x.mean()) ** 2).sum()))
    summary = {
        "n_values": result.n_values,
        "distances": result.distances,
        "fitted_slope": result.fitted_slope,
        "slope_ci95": [result.fitted_slope - 1.96 * slope_se,
                       result.fitted_slope + 1.96 * slope_se],
        "fit_r2": result.fit_r2,
        "n_theta_hist": result.n_theta_hist,
        "flags": {
            "slope_in_window": -0.65 <= result.fitted_slope <= -0.35,
            "r2_ok": result.fit_r2 >= 0.95,
            "monotone": bool(np.all(np.diff(result.distances) < 0)),
        },
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=io.json_default)
    files.append(out / "summary.json")
    return files, summary["flags"], {"fitted_slope": result.fitted_slope,
                                     "fit_r2": result.fit_r2}


def _run_ckp_study(p, out: Path):
    params = _build_pde_params(p)
    grid = params.grid
    q0 = DensityField(grid, parse_density_spec(p["q0"], grid))
    controls = _const_controls(p, params.t_final)
    times = np.linspace(0.0, params.t_final, p["n_snapshots"])
    series = ckp_chain_study(q0, controls, params, p["n_bodies"], times)
    files = [io.write_ckp_csv(out / "ckp_chain.csv", series)]
    flags = {"ckp_slack_ok": bool(np.all(series.slack >= -1e-8)),
             "entropy_zero_at_start": series.entropy[0] == 0.0}
    return files, flags, {"max_entropy": float(series.entropy.max()),
                          "worst_slack": float(series.slack.min())}


def _run_wrapped_study(p, out: Path):
    params = _build_pde_params(p)
    name, _, arg = p["line_q0"].partition(":")
    if name != "gaussian":
        raise ValueError(f"unknown line density family '{name}'")
    mu, sigma = (float(v) for v in arg.split(","))
    controls = _const_controls(p, params.t_final)
    result = wrapped_consistency_study(line_gaussian(mu, sigma), controls, params,
                                       domain_radius=p["domain_periods"] * math.pi,
                                       snapshot_times=np.linspace(0.0, params.t_final,
                                                                  p["n_snapshots"]))
    files = [io.write_wrapped_csv(out / "discrepancy.csv", result)]
    return files, {}, {"max_discrepancy": result.max_discrepancy}


def _run_gamma_study(p, out: Path):
    params = _build_pde_params(p)
    grid = params.grid
    q0 = DensityField(grid, parse_density_spec(p["q0"], grid))
    z = TargetDensity.constant(parse_density_spec(p["target"], grid), grid,
                               params.t_final)
    weights = CostWeights(p["alpha_r"], p["alpha_t"], p["beta1"], p["beta2"])
    pairs = [ControlField.constant(a, b, AngularGrid(16), params.t_final)
             for a, b in p["pairs"]]
    result = gamma_consistency_study(q0, z, weights, params, pairs,
                                     particle_n_values=[int(v) for v in p["n_values"]],
                                     seeds_per_point=p["seeds"], base_seed=p["seed"])
    files = [io.write_gamma_csv(out / "gamma_gaps.csv", result)]
    liq = [r for r in result.records if r["route"] == "liouville"]
    by_pair: dict = {}
    for r in liq:
        by_pair.setdefault(r["pair"], {})[r["N"]] = r["gap"]
    gaps_shrink = all(g[2] > g[3] for g in by_pair.values() if 2 in g and 3 in g)
    particle = [r for r in result.records if r["route"] == "particle"]
    by_pair_particle: dict = {}
    for r in particle:
        by_pair_particle.setdefault(r["pair"], []).append((r["N"], r["gap"]))
    particle_decreasing = all(
        all(b[1] < a[1] for a, b in zip(sorted(v), sorted(v)[1:]))
        for v in by_pair_particle.values()) if by_pair_particle else True
    flags = {"liouville_gap_shrinks": gaps_shrink,
             "particle_gap_decreasing": particle_decreasing}
    summary = {"records": result.records, "flags": flags}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=io.json_default)
    files.append(out / "summary.json")
    return files, flags, {}


def run(config: RunConfig) -> int:
    """Execute a validated config; returns the process exit code."""
    out = Path(config.params["out"])
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    status = "ok"
    error = None
    files: list = []
    flags: dict = {}
    info: dict = {}
    exit_code = 0
    stalled = False
    try:
        p = config.params
        if config.subcommand == "solve-pde":
            files, flags, info = _run_solve_pde(p, out)
        elif config.subcommand == "simulate-particles":
            files, flags, info = _run_simulate_particles(p, out)
        elif config.subcommand == "solve-liouville":
            files, flags, info = _run_solve_liouville(p, out)
        elif config.subcommand == "optimize":
            files, flags, info, stalled = _run_optimize(p, out)
        elif config.subcommand == "optimize-jn":
            files, flags, info, stalled = _run_optimize(p, out, n_body=p["n_bodies"])
        elif config.subcommand == "chaos-study":
            files, flags, info = _run_chaos_study(p, out)
        elif config.subcommand == "ckp-study":
            files, flags, info = _run_ckp_study(p, out)
        elif config.subcommand == "wrapped-study":
            files, flags, info = _run_wrapped_study(p, out)
        elif config.subcommand == "gamma-study":
            files, flags, info = _run_gamma_study(p, out)
        if stalled:
            exit_code = 4
    except (CflError, LeakageError) as exc:
        status, error, exit_code = "error", {"type": type(exc).__name__,
                                             "message": str(exc)}, 3
    except ValueError as exc:
        # late validation failure (should be rare: parse_config front-loads)
        status, error, exit_code = "error", {"type": type(exc).__name__,
                                             "message": str(exc)}, 2
    manifest = {
        "config": config.serialize(),
        "artifact_version": ARTIFACT_VERSION,
        "seed": config.params.get("seed"),
        "wall_time_s": time.perf_counter() - started,
        "outputs": [Path(f).name for f in files],
        "flags": flags,
        "info": info,
        "status": status,
        "error": error,
    }
    io.write_manifest(out, manifest)
    return exit_code


def _parse_set_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kuramoto-mfc",
        description="Controlled Kuramoto mean-field laboratory",
    )
    parser.add_argument("subcommand", nargs="?", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="base RNG seed")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    args = parser.parse_args(argv)

    try:
        file_values = {}
        if args.config:
            with open(args.config) as fh:
                file_values = json.load(fh)
        overrides = {}
        for item in args.set:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ValueError(f"--set expects KEY=VALUE, got '{item}'")
            overrides[key] = _parse_set_value(raw)
        if args.out is not None:
            overrides["out"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        config = parse_config(args.subcommand, file_values, overrides)
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    return run(config)


if __name__ == "__main__":
    sys.exit(main())

"""Experiment harnesses: chaos rate, entropy chain, wrapping, Gamma gaps.

These drive the solvers against each other.  The headline quantities:

* chaos_rate_study measures sup-in-time L1 distance between the particle
  histogram marginal and the mean-field solution as N grows; the log-log
  slope should sit near -1/2.
* ckp_chain_study tracks the rescaled relative entropy of a Liouville run
  against the tensorized mean-field law and verifies the entropy/L1 chain
  2*H - L1^2 >= 0 snapshot by snapshot.
* wrapped_consistency_study solves the same dynamics on a wide periodic
  interval (a stand-in for the real line) and on the circle, and compares
  the wrapped solutions.
* gamma_consistency_study evaluates |J_N - J| for fixed controls through
  both the Liouville and the particle routes, optionally comparing the
  minimized costs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .circle import TWO_PI, AngularGrid, coarsen_density, periodic_quadrature, wrap_angle, wrap_density
from .control import (
    ControlField,
    CostWeights,
    OptimizeConfig,
    cost_J,
    cost_JN,
    optimize,
    optimize_JN,
)
from .errors import CflError, LeakageError
from .liouville import first_marginal, liouville_solve, relative_entropy, tensorized_law
from .particles import SdeParams, empirical_marginal, run_particles, sample_initial
from .pde import (
    DensityField,
    PdeParams,
    TargetDensity,
    diffuse,
    diffusion_multiplier,
    face_velocity,
    solve_pde,
    upwind_advect,
)


def l1_distance(a: DensityField, b: DensityField) -> float:
    """L1 distance on the circle between two grid densities."""
    if a.grid.n_theta != b.grid.n_theta:
        raise ValueError("densities must share the angular grid")
    return periodic_quadrature(np.abs(a.values - b.values), a.grid)


# -- propagation-of-chaos rate ----------------------------------------------


@dataclass
class RateStudyResult:
    n_values: list
    distances: np.ndarray  # seed-averaged sup-in-time L1 per N
    fitted_slope: float
    fit_r2: float
    seeds_per_point: int
    n_theta_hist: int
    per_seed: dict  # N -> list of per-seed distances


def _fit_loglog(n_values, distances):
    x = np.log(np.asarray(n_values, dtype=float))
    y = np.log(np.asarray(distances, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    fit = slope * x + intercept
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def chaos_rate_study(q0: DensityField, controls, params: PdeParams,
                     n_values, seeds_per_point: int = 20,
                     n_theta_hist: int = 32, n_snapshots: int = 11,
                     base_seed: int = 0) -> RateStudyResult:
    """Sup-in-time L1 distance of the histogram marginal to the PDE solution.

    The histogram resolution stays fixed across all N so the bin bias is a
    common floor and the N-scaling of the sampling error drives the fit.  If
    the smallest N would put fewer than 5 expected counts per bin the
    histogram is coarsened (for every N) and a warning is emitted.
    """
    n_values = sorted(int(n) for n in n_values)
    while n_values[0] / n_theta_hist < 5 and n_theta_hist > 4:
        warnings.warn(
            f"histogram bins too fine for N={n_values[0]} "
            f"(expected count {n_values[0] / n_theta_hist:.1f} < 5); "
            f"coarsening to {n_theta_hist // 2} bins"
        )
        n_theta_hist //= 2
    if params.n_theta % n_theta_hist != 0:
        raise ValueError("histogram bins must divide the PDE grid")

    times = np.linspace(0.0, params.t_final, n_snapshots)
    hist_grid = AngularGrid(n_theta_hist)
    pde_snaps = solve_pde(q0, controls, params, times)
    pde_on_hist = [
        DensityField(hist_grid, coarsen_density(s.values, s.grid, hist_grid), s.time)
        for s in pde_snaps
    ]

    sde = SdeParams(params.diffusion, params.phase_shift, params.dt,
                    params.t_final)
    per_seed: dict = {}
    means = []
    for i_n, n in enumerate(n_values):
        dists = []
        for s in range(seeds_per_point):
            seed = base_seed + 7919 * i_n + s
            ens = sample_initial(q0, n, seed)
            snaps = run_particles(ens, controls, sde, times)
            worst = 0.0
            for (t, phases), ref in zip(snaps, pde_on_hist):
                ens.phases = phases
                hist = empirical_marginal(ens, hist_grid)
                worst = max(worst, l1_distance(hist, ref))
            dists.append(worst)
        per_seed[n] = dists
        means.append(float(np.mean(dists)))
    slope, r2 = _fit_loglog(n_values, means)
    return RateStudyResult(n_values, np.array(means), slope, r2,
                           seeds_per_point, n_theta_hist, per_seed)


# -- entropy / L1 chain ------------------------------------------------------


@dataclass
class CkpSeries:
    times: np.ndarray
    entropy: np.ndarray
    l1: np.ndarray
    slack: np.ndarray  # 2*H - L1^2, nonnegative up to roundoff


def ckp_chain_study(q0: DensityField, controls, params: PdeParams,
                    n_bodies: int, snapshot_times=None) -> CkpSeries:
    """Relative entropy and marginal L1 distance along matched solves."""
    if snapshot_times is None:
        snapshot_times = np.linspace(0.0, params.t_final, 11)
    joint = liouville_solve(q0, controls, params, n_bodies, snapshot_times)
    mean_field = solve_pde(q0, controls, params, snapshot_times)
    references = tensorized_law(mean_field, n_bodies)
    entropy, l1 = [], []
    for state, ref, q in zip(joint, references, mean_field):
        entropy.append(relative_entropy(state, ref))
        l1.append(l1_distance(first_marginal(state), q))
    entropy = np.array(entropy)
    l1 = np.array(l1)
    return CkpSeries(np.asarray(snapshot_times, dtype=float), entropy, l1,
                     2.0 * entropy - l1 ** 2)


# -- wrapped-distribution equivalence ---------------------------------------


@dataclass
class WrappedStudyResult:
    times: np.ndarray
    discrepancies: np.ndarray  # sup-norm per snapshot
    max_discrepancy: float


def _solve_wide_line(q0_line, controls, params: PdeParams, radius: float,
                     snapshot_times):
    """Advection-diffusion on the wide interval [-R, R) with periodic ends.

    Reuses the circle scheme with the interval length as the period; with
    negligible tail mass near the boundary this is indistinguishable from
    the real line.  The grid is cell-centered on the interval, so its
    sample points sit half a cell off the circle nodes.
    """
    n_periods = radius / math.pi
    if abs(n_periods - round(n_periods)) > 1e-12 or round(n_periods) < 4:
        raise ValueError("domain radius must be a multiple of 2*pi (and >= 4*pi)")
    n_periods = int(round(n_periods))
    n_wide = n_periods * params.n_theta
    h = TWO_PI / params.n_theta
    x = -radius + (np.arange(n_wide) + 0.5) * h

    values = np.asarray(q0_line(x), dtype=float)
    if np.any(values < 0):
        raise ValueError("line density must be nonnegative")
    mass = float(values.sum() * h)
    if abs(mass - 1.0) > 1e-6:
        raise ValueError(
            f"line density mass on the domain is {mass:.8f}; "
            "tails must be negligible inside the radius"
        )
    values = values / mass

    dt = params.dt
    n_steps = params.n_steps()
    wanted = {}
    for t in snapshot_times:
        idx = round(t / dt)
        if abs(idx * dt - t) > 1e-9 * max(1.0, t) or not 0 <= idx <= n_steps:
            raise ValueError(f"snapshot time {t} does not align with the step grid")
        wanted[idx] = t
    half = diffusion_multiplier(n_wide, params.diffusion, 0.5 * dt,
                                length=2.0 * radius)
    x_wrapped = np.asarray(wrap_angle(x))
    cos_x = np.cos(x)
    sin_x = np.sin(x)
    cos_xa = np.cos(x + params.phase_shift)
    sin_xa = np.sin(x + params.phase_shift)
    boundary = (np.abs(x) > radius - math.pi)

    def leak_check(vals):
        leak = float(vals[boundary].sum() * h)
        if leak > 1e-8:
            raise LeakageError(
                f"mass {leak:.3e} reached the outer half-period; widen the domain"
            )

    out = []
    if 0 in wanted:
        leak_check(values)
        out.append((0.0, values.copy()))
    for m in range(n_steps):
        t = m * dt
        a = diffuse(values, half)
        # wrapped order parameter: e^{ix} is 2*pi periodic, so this equals
        # the circle drift of the folded density
        big_c = float(np.sum(a * cos_x) * h)
        big_s = float(np.sum(a * sin_x) * h)
        w = big_s * cos_xa - big_c * sin_xa
        if controls is None:
            u1p, u2p = 0.0, 0.0
        else:
            u1p, u2p = controls.at_particles(t, x_wrapped)
        v = u1p + u2p * w
        vmax = float(np.max(np.abs(v)))
        if dt * vmax > h * (1.0 + 1e-12):
            raise CflError(
                f"CFL violated on the wide line: speed {vmax:.6g} requires "
                f"dt <= {h / vmax:.6g}"
            )
        b = upwind_advect(a, face_velocity(v), dt, h)
        values = diffuse(b, half)
        vmin = values.min()
        # looser floor than the circle solver: the far tail is identically
        # zero here, and the truncated heat kernel rings at the 1e-10 level
        # against it; clamping that is measurement noise, not instability
        if vmin < -1e-8:
            raise LeakageError(f"wide-line density dropped to {vmin:.3e}")
        if vmin < 0:
            mass_before = float(values.sum())
            values = np.maximum(values, 0.0)
            values *= mass_before / values.sum()
        if (m + 1) in wanted:
            leak_check(values)
            out.append(((m + 1) * dt, values.copy()))
    return x, out


def wrapped_consistency_study(q0_line, controls, params: PdeParams,
                              domain_radius: float = 8.0 * math.pi,
                              snapshot_times=None) -> WrappedStudyResult:
    """Wrap-then-solve vs solve-then-wrap, in the sup norm over snapshots."""
    if snapshot_times is None:
        snapshot_times = np.linspace(0.0, params.t_final, 6)
    grid = AngularGrid(params.n_theta)
    q0_wrapped = wrap_density(q0_line, 10, grid)
    q0_wrapped /= periodic_quadrature(q0_wrapped, grid)
    circle_snaps = solve_pde(DensityField(grid, q0_wrapped), controls, params,
                             snapshot_times)
    x, line_snaps = _solve_wide_line(q0_line, controls, params, domain_radius,
                                     snapshot_times)
    n_periods = int(round(domain_radius / math.pi))
    discrepancies = []
    for (t, line_vals), circ in zip(line_snaps, circle_snaps):
        folded = wrap_density((x, line_vals), n_periods // 2 + 1, grid)
        discrepancies.append(float(np.max(np.abs(folded - circ.values))))
    discrepancies = np.array(discrepancies)
    return WrappedStudyResult(np.asarray(snapshot_times, dtype=float),
                              discrepancies, float(discrepancies.max()))


# -- Gamma-consistency of the cost functionals -------------------------------


@dataclass
class GammaStudyResult:
    records: list  # dicts: route, pair index, N, J_N, J, gap
    minima: dict | None


def gamma_consistency_study(q0: DensityField, z: TargetDensity,
                            weights: CostWeights, params: PdeParams,
                            control_pairs, n_bodies_list=(2, 3),
                            particle_n_values=(), seeds_per_point: int = 10,
                            n_theta_hist: int = 32, n_snapshots: int = 11,
                            base_seed: int = 0,
                            reference_q0: DensityField | None = None,
                            reference_params: PdeParams | None = None,
                            minima_settings: dict | None = None) -> GammaStudyResult:
    """|J_N(u) - J(u)| for fixed controls, via Liouville and particle routes.

    Liouville gaps compare against the mean-field solve on the same grid, so
    shared discretization bias cancels.  Particle gaps compare histogram
    costs (per-seed J_N averaged over seeds) against the mean-field cost on
    the histogram grid; pass ``reference_q0``/``reference_params`` to take
    that reference from a finer solve, keeping its own spatial bias below
    the sampling gap at the largest N.  ``minima_settings`` (optional)
    triggers the min-value comparison; see gamma_min_values.
    """
    times = np.linspace(0.0, params.t_final, n_snapshots)
    hist_grid = AngularGrid(n_theta_hist)
    records = []
    sde = SdeParams(params.diffusion, params.phase_shift, params.dt, params.t_final)

    for i_pair, u in enumerate(control_pairs):
        mean_field = None
        if n_bodies_list or (particle_n_values and reference_params is None):
            mean_field = solve_pde(q0, u, params, times)

        for n_bodies in n_bodies_list:
            j_ref = cost_J(mean_field, u, z, weights).total
            joint = liouville_solve(q0, u, params, n_bodies, times)
            marginals = [first_marginal(state) for state in joint]
            j_n = cost_JN(marginals, u, z, weights).total
            records.append({"route": "liouville", "pair": i_pair, "N": n_bodies,
                            "J_N": j_n, "J": j_ref, "gap": abs(j_n - j_ref)})

        if particle_n_values:
            ref_snaps = mean_field
            if reference_params is not None:
                ref_snaps = solve_pde(reference_q0 or q0, u, reference_params,
                                      times)
            pde_hist = [
                DensityField(hist_grid, coarsen_density(s.values, s.grid, hist_grid), s.time)
                for s in ref_snaps
            ]
            z_hist = TargetDensity(
                hist_grid,
                np.stack([coarsen_density(row, z.grid, hist_grid) for row in z.values]),
                z.times,
            )
            j_ref_hist = cost_J(pde_hist, u, z_hist, weights).total
            for i_n, n in enumerate(sorted(int(v) for v in particle_n_values)):
                costs = []
                for s in range(seeds_per_point):
                    seed = base_seed + 104729 * i_pair + 7919 * i_n + s
                    ens = sample_initial(q0, n, seed)
                    snaps = run_particles(ens, u, sde, times)
                    marg = []
                    for t, phases in snaps:
                        ens.phases = phases
                        field = empirical_marginal(ens, hist_grid)
                        field.time = t
                        marg.append(field)
                    costs.append(cost_JN(marg, u, z_hist, weights).total)
                j_n = float(np.mean(costs))
                records.append({"route": "particle", "pair": i_pair, "N": n,
                                "J_N": j_n, "J": j_ref_hist,
                                "gap": abs(j_n - j_ref_hist)})

    minima = None
    if minima_settings is not None:
        minima = gamma_min_values(q0, z, weights, params,
                                  n_bodies_list=n_bodies_list, **minima_settings)
    return GammaStudyResult(records, minima)


def gamma_min_values(q0: DensityField, z: TargetDensity, weights: CostWeights,
                     params: PdeParams, n_bodies_list=(2, 3),
                     control_grid: AngularGrid | None = None, n_knots: int = 2,
                     mf_cfg: OptimizeConfig | None = None,
                     jn_cfg: OptimizeConfig | None = None,
                     jn_params: dict | None = None) -> dict:
    """Min-value comparison: min J vs the mean-field cost of the J_N optima.

    Minimality of the mean-field optimum over the shared feasible set forces
    min J <= J(u_N) for every N-optimal control u_N; this is the operational
    face of the limit theorem.  Both optimizers run on the same coarse
    control grid so the comparison is over one feasible subset.
    """
    cgrid = control_grid or AngularGrid(8)
    u0 = ControlField.zeros(cgrid, params.t_final, n_knots=n_knots)
    mf = optimize(q0, z, weights, params, mf_cfg or OptimizeConfig(max_iters=40),
                  controls0=u0.copy())
    out = {"min_J": mf.final_cost.total, "per_N": {}}
    times = np.linspace(0.0, params.t_final, 11)
    for n_bodies in n_bodies_list:
        overrides = dict(jn_params or {})
        p_n = PdeParams(
            diffusion=params.diffusion, phase_shift=params.phase_shift,
            dt=overrides.get("dt", params.dt),
            t_final=params.t_final,
            n_theta=overrides.get("n_theta", params.n_theta),
        )
        q0_n = q0
        if p_n.n_theta != q0.grid.n_theta:
            coarse = AngularGrid(p_n.n_theta)
            vals = coarsen_density(q0.values, q0.grid, coarse)
            q0_n = DensityField(coarse, vals / periodic_quadrature(vals, coarse))
        res = optimize_JN(q0_n, z_on_grid(z, p_n.n_theta), weights, p_n,
                          n_bodies, jn_cfg or OptimizeConfig(max_iters=5),
                          controls0=u0.copy())
        # evaluate the J_N-optimal control in the mean-field cost
        traj = solve_pde(q0, res.controls, params, times)
        j_of_un = cost_J(traj, res.controls, z, weights).total
        out["per_N"][n_bodies] = {
            "min_J_N": res.final_cost.total,
            "J_at_u_N": j_of_un,
        }
    return out


def z_on_grid(z: TargetDensity, n_theta: int) -> TargetDensity:
    """Project a target onto a coarser grid (exact cell averaging)."""
    if z.grid.n_theta == n_theta:
        return z
    coarse = AngularGrid(n_theta)
    rows = np.stack([coarsen_density(row, z.grid, coarse) for row in z.values])
    return TargetDensity(coarse, rows, z.times)

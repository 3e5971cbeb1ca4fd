"""Control fields, cost functionals, adjoint gradients, projected descent.

Controls (u1, u2) live on their own coarse grid: piecewise constant on the
time knots, linear in the angle, lifted to the state grid inside the
solvers.  The feasible set caps the per-knot discrete W^{1,q} norm at M;
feasibility is restored by rescaling an infeasible slice (a feasibility
map, not the metric projection, which has no closed form in W^{1,q}).

The cost gradient is assembled by the exact transpose of the discrete
forward scheme, step by step: diffusion half-steps are self-adjoint, the
upwind flux and the face interpolation transpose to an advective update on
the adjoint variable, and the order-parameter drift contributes the
nonlocal term

    B[g](theta) = h * sum_j g_j sin(theta - theta_j - alpha),

evaluated with two Fourier-mode reductions exactly like the forward drift.
Transposing the actual scheme (rather than discretizing the formal
backward PDE) keeps the directional derivatives consistent with finite
differences of the discrete cost to roundoff, which is what the gradient
checks demand on coarse grids.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .circle import AngularGrid
from .liouville import first_marginal, liouville_solve
from .pde import (
    DensityField,
    PdeParams,
    TargetDensity,
    diffuse,
    diffusion_multiplier,
    solve_pde,
)


@dataclass
class CostWeights:
    alpha_r: float = 1.0
    alpha_t: float = 1.0
    beta1: float = 1e-2
    beta2: float = 1e-2

    def __post_init__(self):
        for name in ("alpha_r", "alpha_t", "beta1", "beta2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"cost weight {name} must be positive")


@dataclass
class CostBreakdown:
    """Running, terminal and control-effort parts of the tracking cost."""

    running: float
    terminal: float
    effort: float
    weights: CostWeights

    @property
    def total(self) -> float:
        return self.running + self.terminal + self.effort


@lru_cache(maxsize=32)
def _lift_maps(nc: int, ns: int):
    """Index/weight arrays for periodic linear interpolation, control->state."""
    x = np.arange(ns) * (nc / ns)
    i0 = np.floor(x).astype(int) % nc
    frac = x - np.floor(x)
    i1 = (i0 + 1) % nc
    return i0, i1, frac


@dataclass
class ControlField:
    """Pair of control functions on [0, T] x S1 with W^{1,q} bookkeeping."""

    grid: AngularGrid
    t_edges: np.ndarray
    u1: np.ndarray  # (n_knots, n_theta_control)
    u2: np.ndarray
    q_exp: float = 4.0
    bound: float = 5.0

    def __post_init__(self):
        self.t_edges = np.asarray(self.t_edges, dtype=float)
        self.u1 = np.asarray(self.u1, dtype=float)
        self.u2 = np.asarray(self.u2, dtype=float)
        k = self.t_edges.size - 1
        if k < 1 or np.any(np.diff(self.t_edges) <= 0):
            raise ValueError("t_edges must be an increasing partition of [0, T]")
        shape = (k, self.grid.n_theta)
        if self.u1.shape != shape or self.u2.shape != shape:
            raise ValueError(
                f"control arrays must have shape {shape}, got {self.u1.shape} / {self.u2.shape}"
            )
        if self.q_exp <= 2:
            raise ValueError(f"sobolev exponent must exceed 2, got {self.q_exp}")
        if self.bound <= 0:
            raise ValueError(f"norm bound M must be positive, got {self.bound}")

    # -- construction ------------------------------------------------------

    @classmethod
    def zeros(cls, grid: AngularGrid, t_final: float, n_knots: int = 16,
              q_exp: float = 4.0, bound: float = 5.0) -> "ControlField":
        edges = np.linspace(0.0, t_final, n_knots + 1)
        shape = (n_knots, grid.n_theta)
        return cls(grid, edges, np.zeros(shape), np.zeros(shape), q_exp, bound)

    @classmethod
    def constant(cls, u1, u2, grid: AngularGrid, t_final: float,
                 n_knots: int = 1, q_exp: float = 4.0, bound: float = 5.0) -> "ControlField":
        """Time-independent controls from scalars or angle profiles."""
        edges = np.linspace(0.0, t_final, n_knots + 1)
        row1 = np.broadcast_to(np.asarray(u1, dtype=float), (grid.n_theta,))
        row2 = np.broadcast_to(np.asarray(u2, dtype=float), (grid.n_theta,))
        return cls(grid, edges,
                   np.tile(row1, (n_knots, 1)).copy(),
                   np.tile(row2, (n_knots, 1)).copy(), q_exp, bound)

    def copy(self) -> "ControlField":
        return ControlField(self.grid, self.t_edges.copy(), self.u1.copy(),
                            self.u2.copy(), self.q_exp, self.bound)

    def with_values(self, u1, u2) -> "ControlField":
        return ControlField(self.grid, self.t_edges, np.asarray(u1, float),
                            np.asarray(u2, float), self.q_exp, self.bound)

    # -- evaluation --------------------------------------------------------

    @property
    def n_knots(self) -> int:
        return self.t_edges.size - 1

    def knot_lengths(self) -> np.ndarray:
        return np.diff(self.t_edges)

    def knot_index(self, t: float) -> int:
        k = int(np.searchsorted(self.t_edges, t, side="right")) - 1
        return min(max(k, 0), self.n_knots - 1)

    def at(self, t: float, state_grid: AngularGrid):
        """Control slices on the state grid: constant in t on the knot,
        periodic-linear in theta."""
        k = self.knot_index(t)
        i0, i1, frac = _lift_maps(self.grid.n_theta, state_grid.n_theta)
        u1s = self.u1[k][i0] * (1.0 - frac) + self.u1[k][i1] * frac
        u2s = self.u2[k][i0] * (1.0 - frac) + self.u2[k][i1] * frac
        return u1s, u2s

    def at_particles(self, t: float, thetas: np.ndarray):
        """Control values at arbitrary phases (periodic linear interpolation)."""
        k = self.knot_index(t)
        row1, row2 = self.u1[k], self.u2[k]
        if np.ptp(row1) == 0.0 and np.ptp(row2) == 0.0:
            return float(row1[0]), float(row2[0])  # constant slice fast path
        hc = self.grid.cell_width
        x = np.asarray(thetas) / hc
        i0 = np.floor(x).astype(int) % self.grid.n_theta
        frac = x - np.floor(x)
        i1 = (i0 + 1) % self.grid.n_theta
        u1p = row1[i0] * (1.0 - frac) + row1[i1] * frac
        u2p = row2[i0] * (1.0 - frac) + row2[i1] * frac
        return u1p, u2p

    # -- norms -------------------------------------------------------------

    def _slice_norm(self, values: np.ndarray) -> float:
        hc = self.grid.cell_width
        du = (np.roll(values, -1) - np.roll(values, 1)) / (2.0 * hc)
        q = self.q_exp
        return float((hc * np.sum(np.abs(values) ** q)
                      + hc * np.sum(np.abs(du) ** q)) ** (1.0 / q))

    def w1q_norms(self) -> np.ndarray:
        """Per-knot discrete W^{1,q} norms, shape (n_knots, 2)."""
        out = np.empty((self.n_knots, 2))
        for k in range(self.n_knots):
            out[k, 0] = self._slice_norm(self.u1[k])
            out[k, 1] = self._slice_norm(self.u2[k])
        return out

    def sup_norm(self) -> float:
        """Observed sup norm (the empirical stand-in for the Sobolev bound)."""
        return float(max(np.max(np.abs(self.u1)), np.max(np.abs(self.u2)), 0.0))

    def content_hash(self) -> str:
        """Digest of the control data, for run manifests."""
        digest = hashlib.sha256()
        for arr in (self.t_edges, self.u1, self.u2):
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()[:16]

    def is_feasible(self, tol: float = 1e-10) -> bool:
        return bool(np.all(self.w1q_norms() <= self.bound + tol))


def project_control(raw: ControlField) -> ControlField:
    """Rescale infeasible (knot, channel) slices onto the W^{1,q} ball.

    Feasible slices pass through unchanged; an infeasible slice is scaled by
    M / norm, which lands exactly on the boundary (the norm is positively
    homogeneous).
    """
    u1 = raw.u1.copy()
    u2 = raw.u2.copy()
    for k in range(raw.n_knots):
        for channel, arr in ((0, u1), (1, u2)):
            norm = raw._slice_norm(arr[k])
            if norm > raw.bound:
                arr[k] *= raw.bound / norm
    return raw.with_values(u1, u2)


# -- cost functionals -------------------------------------------------------


def _trapezoid_weights(times: np.ndarray) -> np.ndarray:
    w = np.zeros_like(times)
    w[0] = 0.5 * (times[1] - times[0])
    w[-1] = 0.5 * (times[-1] - times[-2])
    if times.size > 2:
        w[1:-1] = 0.5 * (times[2:] - times[:-2])
    return w


def control_effort(controls: ControlField | None, weights: CostWeights) -> float:
    if controls is None:
        return 0.0
    hc = controls.grid.cell_width
    dts = controls.knot_lengths()
    per_knot = (weights.beta1 * np.sum(controls.u1 ** 2, axis=1)
                + weights.beta2 * np.sum(controls.u2 ** 2, axis=1)) * hc
    return float(0.5 * np.sum(dts * per_knot))


def cost_J(q_traj, controls: ControlField | None, z: TargetDensity,
           weights: CostWeights) -> CostBreakdown:
    """Tracking cost of a density trajectory (trapezoid rule in time)."""
    grid = q_traj[0].grid
    if z.grid.n_theta != grid.n_theta:
        raise ValueError("target and trajectory must share the angular grid")
    times = np.array([snap.time for snap in q_traj])
    if times.size < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("trajectory must contain at least two increasing times")
    h = grid.cell_width
    w = _trapezoid_weights(times)
    running = 0.0
    for snap, wt in zip(q_traj, w):
        diff = snap.values - z.at(snap.time)
        running += wt * h * float(np.sum(diff * diff))
    running *= 0.5 * weights.alpha_r
    last = q_traj[-1]
    diff_t = last.values - z.at(last.time)
    terminal = 0.5 * weights.alpha_t * h * float(np.sum(diff_t * diff_t))
    return CostBreakdown(running, terminal, control_effort(controls, weights), weights)


def cost_JN(marginal_traj, controls: ControlField | None, z: TargetDensity,
            weights: CostWeights) -> CostBreakdown:
    """Particle-level cost: identical to cost_J with q replaced by the first
    marginal trajectory (shared implementation on purpose)."""
    return cost_J(marginal_traj, controls, z, weights)


# -- adjoint sweep (exact transpose of the forward scheme) ------------------


@dataclass
class AdjointField:
    """Backward sensitivity density; terminal slice is alpha_t * (q(T) - z(T))."""

    grid: AngularGrid
    values: np.ndarray
    time: float


def kernel_adjoint(g: np.ndarray, grid: AngularGrid, alpha: float) -> np.ndarray:
    """h * sum_j g_j sin(theta - theta_j - alpha) via two Fourier reductions."""
    nodes = grid.nodes
    s = complex(np.sum(g * np.cos(nodes + alpha)), -np.sum(g * np.sin(nodes + alpha)))
    return grid.cell_width * np.imag(np.exp(1j * nodes) * s)


def adjoint_coupling(q_values, dp_values, u2_values, grid: AngularGrid,
                     alpha: float = 0.0) -> np.ndarray:
    """Nonlocal adjoint term B(theta) = int u2 q dp/dtheta sin(theta - . - alpha)."""
    g = np.asarray(u2_values) * np.asarray(q_values) * np.asarray(dp_values)
    return kernel_adjoint(g, grid, alpha)


def _check_dense(q_traj, params: PdeParams):
    times = np.array([snap.time for snap in q_traj])
    n_steps = params.n_steps()
    if times.size != n_steps + 1 or np.any(
            np.abs(np.diff(times) - params.dt) > 1e-9 * max(1.0, params.dt)):
        raise ValueError(
            "adjoint sweep needs the dense forward trajectory (every step, "
            "same dt); rerun solve_pde with snapshot_times=None"
        )


def _step_transpose(g_in: np.ndarray, q_m: np.ndarray, u1s: np.ndarray,
                    u2s: np.ndarray, params: PdeParams, grid: AngularGrid,
                    half: np.ndarray):
    """Transpose of one forward step at the recomputed linearization point.

    Returns (g_out, g_u1s, g_u2s): the pullback of g_in through the step and
    the raw sensitivities to the lifted control slices used in that step.
    """
    h = grid.cell_width
    lam = params.dt / h
    nodes = grid.nodes

    a = diffuse(q_m, half)
    z = complex(h * np.sum(a * np.cos(nodes)), h * np.sum(a * np.sin(nodes)))
    w = np.imag(z * np.exp(-1j * (nodes + params.phase_shift)))
    v = u1s + u2s * w
    vf = 0.5 * (v + np.roll(v, -1))

    r = diffuse(g_in, half)
    g_flux = lam * (np.roll(r, -1) - r)
    a_up = np.where(vf > 0.0, a, np.roll(a, -1))
    g_vf = a_up * g_flux
    g_v = 0.5 * (g_vf + np.roll(g_vf, 1))

    g_u1s = g_v
    g_u2s = g_v * w
    g_w = g_v * u2s

    g_a = r + np.maximum(vf, 0.0) * g_flux + np.roll(np.minimum(vf, 0.0) * g_flux, 1)
    g_a = g_a + kernel_adjoint(g_w, grid, params.phase_shift)
    return diffuse(g_a, half), g_u1s, g_u2s


def adjoint_solve(q_traj, controls: ControlField | None, z: TargetDensity,
                  weights: CostWeights, params: PdeParams):
    """Backward sweep; returns the adjoint trajectory aligned with q_traj.

    The terminal slice is exactly alpha_t * (q(T) - z(T)); interior slices
    carry the accumulated running-cost sources.  The sweep mirrors the
    forward splitting because each stage is transposed in reverse order.
    """
    _check_dense(q_traj, params)
    grid = q_traj[0].grid
    h = grid.cell_width
    dt = params.dt
    half = diffusion_multiplier(grid.n_theta, params.diffusion, 0.5 * dt)
    times = [snap.time for snap in q_traj]
    n_steps = len(q_traj) - 1

    terminal = weights.alpha_t * (q_traj[-1].values - z.at(times[-1]))
    out = [AdjointField(grid, terminal.copy(), times[-1])]
    # raw adjoint includes the trapezoid share of the running cost at T
    g = h * (terminal + weights.alpha_r * 0.5 * dt * (q_traj[-1].values - z.at(times[-1])))
    zeros = np.zeros(grid.n_theta)
    for m in range(n_steps - 1, -1, -1):
        t = times[m]
        if controls is None:
            u1s, u2s = zeros, zeros
        else:
            u1s, u2s = controls.at(t, grid)
        g, _, _ = _step_transpose(g, q_traj[m].values, u1s, u2s, params, grid, half)
        c_m = dt if m > 0 else 0.5 * dt
        g = g + h * weights.alpha_r * c_m * (q_traj[m].values - z.at(t))
        out.append(AdjointField(grid, g / h, t))
    out.reverse()
    return out


def gradient(controls: ControlField, q_traj, p_traj, z: TargetDensity,
             weights: CostWeights, params: PdeParams):
    """L2-functional cost gradient (g1, g2) on the control grid.

    Each step's control sensitivity depends only on the stored pair
    (q_m, p_{m+1}); the per-step raw contributions are scattered back to the
    control cells through the transpose of the lifting and time-averaged
    over each knot, then the quadratic effort term is added.
    """
    _check_dense(q_traj, params)
    grid = q_traj[0].grid
    h = grid.cell_width
    dt = params.dt
    half = diffusion_multiplier(grid.n_theta, params.diffusion, 0.5 * dt)
    nc = controls.grid.n_theta
    i0, i1, frac = _lift_maps(nc, grid.n_theta)
    n_steps = len(q_traj) - 1

    raw1 = np.zeros_like(controls.u1)
    raw2 = np.zeros_like(controls.u2)
    for m in range(n_steps):
        t = q_traj[m].time
        u1s, u2s = controls.at(t, grid)
        p_next = p_traj[m + 1].values
        if m + 1 == n_steps:
            # stored terminal slice excludes the trapezoid running share
            extra = weights.alpha_r * 0.5 * dt * (q_traj[-1].values - z.at(q_traj[-1].time))
            g_in = h * (p_next + extra)
        else:
            g_in = h * p_next
        _, g_u1s, g_u2s = _step_transpose(g_in, q_traj[m].values, u1s, u2s,
                                          params, grid, half)
        k = controls.knot_index(t)
        np.add.at(raw1[k], i0, (1.0 - frac) * g_u1s)
        np.add.at(raw1[k], i1, frac * g_u1s)
        np.add.at(raw2[k], i0, (1.0 - frac) * g_u2s)
        np.add.at(raw2[k], i1, frac * g_u2s)

    hc = controls.grid.cell_width
    dts = controls.knot_lengths()[:, None]
    raw1 += weights.beta1 * controls.u1 * dts * hc
    raw2 += weights.beta2 * controls.u2 * dts * hc
    return raw1 / (dts * hc), raw2 / (dts * hc)


def control_inner(controls: ControlField, a1, a2, b1, b2) -> float:
    """L2(0,T; L2(S1)) inner product of two control-shaped pairs."""
    hc = controls.grid.cell_width
    dts = controls.knot_lengths()[:, None]
    return float(np.sum(dts * hc * (np.asarray(a1) * np.asarray(b1)
                                    + np.asarray(a2) * np.asarray(b2))))


# -- projected descent -------------------------------------------------------


@dataclass
class OptimizeConfig:
    max_iters: int = 60
    tol: float = 1e-7
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 30
    step0: float = 1.0
    step_min: float = 1e-10
    step_max: float = 1e4


@dataclass
class OptimizeResult:
    controls: ControlField
    history: list
    stalled: bool = False
    converged: bool = False

    @property
    def final_cost(self) -> CostBreakdown:
        return self.history[-1]["cost"]


def _pg_norm(u: ControlField, g1, g2) -> float:
    trial = project_control(u.with_values(u.u1 - g1, u.u2 - g2))
    d1 = u.u1 - trial.u1
    d2 = u.u2 - trial.u2
    return math.sqrt(control_inner(u, d1, d2, d1, d2))


def _descend(u: ControlField, evaluate, grad_fn, cfg: OptimizeConfig) -> OptimizeResult:
    """Shared projected-descent loop with BB step seeding and Armijo backtracking.

    The history records one entry per accepted iterate (cost strictly
    non-increasing); each entry's grad_norm is filled in when the gradient at
    that iterate is computed.
    """
    u = project_control(u)
    cost = evaluate(u)
    history = [{"iter": 0, "cost": cost, "grad_norm": None, "step": None}]
    step = cfg.step0
    prev = None  # (u1, u2, g1, g2) for the Barzilai-Borwein ratio
    stalled = converged = False

    for _ in range(cfg.max_iters):
        g1, g2 = grad_fn(u)
        pg = _pg_norm(u, g1, g2)
        history[-1]["grad_norm"] = pg
        if pg <= cfg.tol:
            converged = True
            break

        if prev is not None:
            du1, du2 = u.u1 - prev[0], u.u2 - prev[1]
            dg1, dg2 = g1 - prev[2], g2 - prev[3]
            num = control_inner(u, du1, du2, du1, du2)
            den = control_inner(u, du1, du2, dg1, dg2)
            if den > 0 and np.isfinite(den):
                step = min(max(num / den, cfg.step_min), cfg.step_max)
        prev = (u.u1.copy(), u.u2.copy(), g1, g2)

        accepted = False
        s = step
        for _ in range(cfg.max_backtracks):
            trial = project_control(u.with_values(u.u1 - s * g1, u.u2 - s * g2))
            d1, d2 = u.u1 - trial.u1, u.u2 - trial.u2
            decrease = control_inner(u, d1, d2, d1, d2) / s
            trial_cost = evaluate(trial)
            if trial_cost.total <= cost.total - cfg.armijo_c * decrease:
                u, cost, step = trial, trial_cost, s
                accepted = True
                history.append({"iter": len(history), "cost": cost,
                                "grad_norm": None, "step": s})
                break
            s *= cfg.shrink
            if s < cfg.step_min:
                break
        if not accepted:
            stalled = True
            break

    return OptimizeResult(u, history, stalled=stalled, converged=converged)


def optimize(q0: DensityField, z: TargetDensity, weights: CostWeights,
             params: PdeParams, opt_cfg: OptimizeConfig | None = None,
             controls0: ControlField | None = None) -> OptimizeResult:
    """Projected gradient descent on the mean-field tracking cost.

    The forward solve stores every step so the adjoint transpose is exact;
    the cost history is non-increasing by the Armijo rule.
    """
    cfg = opt_cfg or OptimizeConfig()
    if controls0 is None:
        controls0 = ControlField.zeros(AngularGrid(64), params.t_final, n_knots=16)

    cache: dict[str, list] = {}

    def evaluate(u: ControlField) -> CostBreakdown:
        traj = solve_pde(q0, u, params, snapshot_times=None)
        cache["traj"] = traj
        return cost_J(traj, u, z, weights)

    def grad_fn(u: ControlField):
        traj = cache["traj"]
        p_traj = adjoint_solve(traj, u, z, weights, params)
        return gradient(u, traj, p_traj, z, weights, params)

    return _descend(controls0, evaluate, grad_fn, cfg)


def optimize_JN(q0: DensityField, z: TargetDensity, weights: CostWeights,
                params: PdeParams, n_bodies: int,
                opt_cfg: OptimizeConfig | None = None,
                controls0: ControlField | None = None,
                n_cost_snapshots: int = 11,
                fd_eps: float = 1e-4) -> OptimizeResult:
    """Descent on the N-body cost with central finite-difference gradients.

    Every cost evaluation is a Liouville solve, so the control grid must stay
    coarse (the default is 4 knots x 8 angles, 64 degrees of freedom).
    """
    cfg = opt_cfg or OptimizeConfig(max_iters=8)
    if controls0 is None:
        controls0 = ControlField.zeros(AngularGrid(8), params.t_final, n_knots=4)
    snap_times = np.linspace(0.0, params.t_final, n_cost_snapshots)

    def evaluate(u: ControlField) -> CostBreakdown:
        traj = liouville_solve(q0, u, params, n_bodies, snap_times)
        marginals = [first_marginal(state) for state in traj]
        return cost_JN(marginals, u, z, weights)

    def grad_fn(u: ControlField):
        hc = u.grid.cell_width
        dts = u.knot_lengths()
        grads = []
        for arr in (u.u1, u.u2):
            g = np.zeros_like(arr)
            for k in range(u.n_knots):
                for c in range(u.grid.n_theta):
                    bump = np.zeros_like(arr)
                    bump[k, c] = fd_eps
                    if arr is u.u1:
                        j_plus = evaluate(u.with_values(u.u1 + bump, u.u2)).total
                        j_minus = evaluate(u.with_values(u.u1 - bump, u.u2)).total
                    else:
                        j_plus = evaluate(u.with_values(u.u1, u.u2 + bump)).total
                        j_minus = evaluate(u.with_values(u.u1, u.u2 - bump)).total
                    g[k, c] = (j_plus - j_minus) / (2.0 * fd_eps) / (dts[k] * hc)
            grads.append(g)
        return grads[0], grads[1]

    return _descend(controls0, evaluate, grad_fn, cfg)

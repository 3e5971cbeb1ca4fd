"""Direct tensor-grid solver for the N-body forward Kolmogorov equation.

For N in {2, 3} the joint density q^N on (S1)^N is advanced with the same
building blocks as the one-body solver: exact Fourier diffusion half-steps
(product multiplier over the axes) around a conservative upwind advection
step.  The advection update is dimension-unsplit, a single forward-Euler
increment collecting the flux divergence of every axis from the same input
state; per-axis sweeps would break exchangeability at O(dt) through the
axis-ordering commutator, while the unsplit form commutes with coordinate
transpositions exactly.

The velocity along axis i at a grid point (theta_1, ..., theta_N) is

    v_i = u1(theta_i) + u2(theta_i) / N * sum_j sin(theta_j - theta_i - alpha),

independent of q^N (the equation is linear), so the face-velocity tensors
are cached while the control slice is unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache, reduce

import numpy as np

from .circle import TWO_PI, AngularGrid, periodic_quadrature
from .errors import CflError, LeakageError
from .pde import EPS_POS, DensityField, PdeParams, spectral_derivative

_ENTROPY_FLOOR = 1e-30  # guards log against denormal reference values


@dataclass
class TensorDensity:
    """Joint density on the N-fold tensor grid at one instant."""

    grid: AngularGrid
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = self.grid.n_theta
        if self.values.shape != (n,) * self.values.ndim or self.values.ndim < 1:
            raise ValueError(
                f"tensor values of shape {self.values.shape} do not match an "
                f"(n_theta,)^N grid with n_theta={n}"
            )

    @property
    def n_bodies(self) -> int:
        return self.values.ndim

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_width ** self.n_bodies)

    def copy(self) -> "TensorDensity":
        return TensorDensity(self.grid, self.values.copy(), self.time)


@dataclass
class MarginalSet:
    """First and second (and, for N=3, third) marginals of a joint state."""

    first: DensityField
    second: np.ndarray
    third: np.ndarray | None
    time: float


def tensorized_law(q_trajectory, n_bodies: int):
    """Outer-product reference law q x ... x q per snapshot."""
    out = []
    for snap in q_trajectory:
        values = reduce(np.multiply.outer, [snap.values] * n_bodies)
        out.append(TensorDensity(snap.grid, values, snap.time))
    return out


def first_marginal(state: TensorDensity) -> DensityField:
    """Integrate out all axes but the first."""
    n_extra = state.n_bodies - 1
    values = state.values.sum(axis=tuple(range(1, state.n_bodies)))
    values = values * state.grid.cell_width ** n_extra
    return DensityField(state.grid, values, state.time)


def second_marginal(state: TensorDensity) -> np.ndarray:
    """Joint density of the first two coordinates."""
    if state.n_bodies < 2:
        raise ValueError("second marginal needs at least two bodies")
    extra = tuple(range(2, state.n_bodies))
    values = state.values.sum(axis=extra) if extra else state.values.copy()
    return values * state.grid.cell_width ** len(extra)


def marginal_set(state: TensorDensity) -> MarginalSet:
    third = state.values.copy() if state.n_bodies == 3 else None
    return MarginalSet(first_marginal(state), second_marginal(state), third, state.time)


def transposition_residual(state: TensorDensity) -> float:
    """Max deviation from exchangeability over all coordinate transpositions."""
    res = 0.0
    for i in range(state.n_bodies):
        for j in range(i + 1, state.n_bodies):
            res = max(res, float(np.max(np.abs(
                state.values - state.values.swapaxes(i, j)))))
    return res


def relative_entropy(qn: TensorDensity, q_tensor: TensorDensity) -> float:
    """Rescaled relative entropy (1/N) * int q^N log(q^N / q_tensor).

    Convention 0*log(0) = 0.  Returns +inf when q^N puts mass where the
    reference vanishes; roundoff-level negative results are clamped to 0.
    """
    if qn.values.shape != q_tensor.values.shape:
        raise ValueError("joint densities must share the tensor grid")
    n_bodies = qn.n_bodies
    mask = qn.values > 0.0
    ref = q_tensor.values[mask]
    if np.any(ref <= 0.0):
        return math.inf
    num = qn.values[mask]
    integrand = num * (np.log(num) - np.log(np.maximum(ref, _ENTROPY_FLOOR)))
    value = float(integrand.sum()) * qn.grid.cell_width ** n_bodies / n_bodies
    if -EPS_POS <= value < 0.0:
        return 0.0
    return value


@lru_cache(maxsize=16)
def _tensor_heat_multiplier(n: int, n_bodies: int, coeff: float) -> np.ndarray:
    """rfftn multiplier of the product heat semigroup on (S1)^N."""
    k_full = TWO_PI * np.fft.fftfreq(n, d=TWO_PI / n)
    k_half = TWO_PI * np.fft.rfftfreq(n, d=TWO_PI / n)
    k2 = np.zeros((n,) * (n_bodies - 1) + (k_half.size,))
    for axis in range(n_bodies):
        k = k_half if axis == n_bodies - 1 else k_full
        shape = [1] * n_bodies
        shape[axis] = k.size
        k2 = k2 + (k ** 2).reshape(shape)
    return np.exp(-coeff * k2)


def _diffuse_tensor(values: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
    axes = tuple(range(values.ndim))
    spec = np.fft.rfftn(values, axes=axes)
    return np.fft.irfftn(spec * multiplier, s=values.shape, axes=axes)


def _axis_velocities(grid: AngularGrid, n_bodies: int, u1s, u2s, alpha: float):
    """Face-velocity tensor per axis plus the summed speed for the CFL bound."""
    nodes = grid.nodes
    sin_t, cos_t = np.sin(nodes), np.cos(nodes)

    def along(vec, axis):
        shape = [1] * n_bodies
        shape[axis] = grid.n_theta
        return vec.reshape(shape)

    sin_sum = reduce(np.add, (along(sin_t, ax) for ax in range(n_bodies)))
    cos_sum = reduce(np.add, (along(cos_t, ax) for ax in range(n_bodies)))
    faces = []
    speed_sum = 0.0
    for axis in range(n_bodies):
        coupling = (along(np.cos(nodes + alpha), axis) * sin_sum
                    - along(np.sin(nodes + alpha), axis) * cos_sum)
        v = along(u1s, axis) + along(u2s, axis) / n_bodies * coupling
        vf = 0.5 * (v + np.roll(v, -1, axis=axis))
        faces.append(vf)
        speed_sum = speed_sum + np.abs(vf)
    return faces, float(np.max(speed_sum))


def _clamp_tensor(values: np.ndarray, grid: AngularGrid, n_bodies: int) -> np.ndarray:
    vmin = values.min()
    if vmin >= 0.0:
        return values
    if vmin < -EPS_POS:
        raise LeakageError(
            f"joint density dropped to {vmin:.3e}, below the positivity tolerance"
        )
    cell = grid.cell_width ** n_bodies
    mass_before = float(values.sum()) * cell
    clipped = np.maximum(values, 0.0)
    return clipped * (mass_before / (float(clipped.sum()) * cell))


def liouville_solve(q0: DensityField, controls, params: PdeParams,
                    n_bodies: int, snapshot_times):
    """Solve the joint equation from tensorized initial data q0 x ... x q0."""
    if n_bodies not in (2, 3):
        raise ValueError(
            f"n_bodies={n_bodies} unsupported: tensor grids beyond 3 bodies "
            "exhaust memory; use the particle estimator instead"
        )
    if q0.grid.n_theta != params.n_theta:
        raise ValueError("initial density grid does not match params.n_theta")
    q0.validate()
    grid = q0.grid
    h = grid.cell_width
    dt = params.dt
    n_steps = params.n_steps()

    wanted = {}
    for t in snapshot_times:
        idx = round(t / dt)
        if idx < 0 or idx > n_steps or abs(idx * dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"snapshot time {t} does not align with the step grid")
        wanted[idx] = t

    half = _tensor_heat_multiplier(grid.n_theta, n_bodies,
                                   params.diffusion * 0.5 * dt)
    state = TensorDensity(grid, reduce(np.multiply.outer, [q0.values] * n_bodies), 0.0)

    zeros = np.zeros(grid.n_theta)
    snapshots = []
    if 0 in wanted:
        snapshots.append(state.copy())

    cached_knot = object()  # sentinel that never equals a knot index
    faces = None
    max_speed = 0.0
    for m in range(n_steps):
        t = m * dt
        if controls is None:
            knot = None
            u1s, u2s = zeros, zeros
        else:
            knot = controls.knot_index(t)
            u1s, u2s = controls.at(t, grid)
        if knot != cached_knot:
            faces, max_speed = _axis_velocities(grid, n_bodies, u1s, u2s,
                                                params.phase_shift)
            cached_knot = knot
            if dt * max_speed > h * (1.0 + 1e-12):
                raise CflError(
                    f"CFL violated on the tensor grid: summed face speed "
                    f"{max_speed:.6g} requires dt <= {h / max_speed:.6g}, "
                    f"got dt = {dt:.6g}"
                )

        a = _diffuse_tensor(state.values, half)
        div = np.zeros_like(a)
        for axis in range(n_bodies):
            vf = faces[axis]
            flux = np.where(vf > 0.0, vf * a, vf * np.roll(a, -1, axis=axis))
            div += flux - np.roll(flux, 1, axis=axis)
        b = a - (dt / h) * div
        c = _diffuse_tensor(b, half)
        c = _clamp_tensor(c, grid, n_bodies)
        state = TensorDensity(grid, c, (m + 1) * dt)
        if (m + 1) in wanted:
            snapshots.append(state.copy())
    return snapshots


@dataclass
class ResidualSeries:
    """Discrete residuals of the marginal equations at interior snapshots."""

    times: np.ndarray
    first: np.ndarray
    second: np.ndarray | None


def _coupling_integral(q2: np.ndarray, grid: AngularGrid, alpha: float) -> np.ndarray:
    """Integral of q2(theta, y) against sin(y - theta - alpha) over y."""
    nodes = grid.nodes
    # sin(y - theta - alpha) = sin(y)cos(theta+alpha) - cos(y)sin(theta+alpha)
    s = q2 @ np.sin(nodes)
    c = q2 @ np.cos(nodes)
    return grid.cell_width * (s * np.cos(nodes + alpha) - c * np.sin(nodes + alpha))


def marginal_residual(marginals: list[MarginalSet], controls, params: PdeParams) -> ResidualSeries:
    """L2 residuals of the (non-closed) marginal hierarchy equations.

    The hierarchy is not solvable on its own (each level calls the next),
    but the marginals extracted from a Liouville solve must satisfy it up to
    discretization error; this is the consistency check.  Spatial derivatives
    are spectral, the time derivative is a centered difference of adjacent
    snapshots, so at least 3 snapshots are required.
    """
    if len(marginals) < 3:
        raise ValueError("marginal residual needs at least 3 snapshots")
    grid = marginals[0].first.grid
    alpha = params.phase_shift
    d = params.diffusion
    has_third = marginals[0].third is not None
    n_bodies = 3 if has_third else 2

    times, res1, res2 = [], [], []
    zeros = np.zeros(grid.n_theta)
    for k in range(1, len(marginals) - 1):
        prev_m, cur, next_m = marginals[k - 1], marginals[k], marginals[k + 1]
        t = cur.time
        if controls is None:
            u1s, u2s = zeros, zeros
        else:
            u1s, u2s = controls.at(t, grid)

        dtq1 = (next_m.first.values - prev_m.first.values) / (next_m.time - prev_m.time)
        q1 = cur.first.values
        pair_drift = _coupling_integral(cur.second, grid, alpha)
        flux = (q1 * u1s
                + (n_bodies - 1) / n_bodies * u2s * pair_drift
                + u2s * math.sin(-alpha) * q1 / n_bodies)
        r1 = dtq1 - d * spectral_derivative(q1, 2) + spectral_derivative(flux, 1)
        res1.append(math.sqrt(periodic_quadrature(r1 ** 2, grid)))
        times.append(t)

        if has_third:
            q2 = cur.second
            dtq2 = (next_m.second - prev_m.second) / (next_m.time - prev_m.time)
            h = grid.cell_width
            nodes = grid.nodes
            sin_y, cos_y = np.sin(nodes), np.cos(nodes)
            # integrals of the third marginal against the kernel, per slot
            s_a = cur.third @ sin_y  # (theta, theta~)
            c_a = cur.third @ cos_y
            i3_a = h * (s_a * np.cos(nodes + alpha)[:, None]
                        - c_a * np.sin(nodes + alpha)[:, None])
            i3_b = h * (s_a * np.cos(nodes + alpha)[None, :]
                        - c_a * np.sin(nodes + alpha)[None, :])
            pair_kernel = np.sin(nodes[None, :] - nodes[:, None] - alpha)
            flux_a = (q2 * u1s[:, None]
                      + (n_bodies - 2) / n_bodies * u2s[:, None] * i3_a
                      + u2s[:, None] * (math.sin(-alpha) + pair_kernel) * q2 / n_bodies)
            flux_b = (q2 * u1s[None, :]
                      + (n_bodies - 2) / n_bodies * u2s[None, :] * i3_b
                      + u2s[None, :] * (math.sin(-alpha) + pair_kernel.T) * q2 / n_bodies)
            r2 = (dtq2
                  - d * (spectral_derivative(q2, 2, axis=0)
                         + spectral_derivative(q2, 2, axis=1))
                  + spectral_derivative(flux_a, 1, axis=0)
                  + spectral_derivative(flux_b, 1, axis=1))
            res2.append(math.sqrt(float((r2 ** 2).sum()) * h * h))

    return ResidualSeries(np.array(times), np.array(res1),
                          np.array(res2) if has_third else None)

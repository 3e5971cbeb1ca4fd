"""Conservative solver for the controlled nonlocal oscillator-density PDE.

The equation on the circle is

    dq/dt - D d2q/dtheta2 + d/dtheta ( q * (u1 + u2 * w[q]) ) = 0,

where the nonlocal drift w[q](theta) = int sin(theta' - theta - alpha)
q(theta') dtheta' couples the density to itself through its first Fourier
mode only, so it is evaluated from the complex order parameter in O(n).

One step applies Strang splitting: an exact Fourier-multiplier diffusion
half-step, a conservative finite-volume upwind advection step with face
velocities interpolated from cell centers, and a second diffusion
half-step.  Mass is conserved to roundoff (the k = 0 multiplier is one and
the advective fluxes telescope); upwind plus the heat semigroup keep the
density nonnegative for smooth states, and a clamping policy handles
roundoff-level negatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .circle import TWO_PI, AngularGrid, periodic_quadrature
from .errors import CflError, LeakageError

# Values in (-EPS_POS, 0) are treated as roundoff and clamped; anything more
# negative means the scheme was driven outside its stability envelope.
EPS_POS = 1e-12


@dataclass
class PdeParams:
    """Physical and numerical parameters of a circle solve."""

    diffusion: float = 0.5
    phase_shift: float = 0.0
    dt: float = 1e-3
    t_final: float = 1.0
    n_theta: int = 256

    def __post_init__(self):
        if self.diffusion <= 0:
            raise ValueError(f"diffusion must be positive (D > 0), got {self.diffusion}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_final <= 0:
            raise ValueError(f"t_final must be positive, got {self.t_final}")
        if self.n_theta < 4:
            raise ValueError(f"n_theta must be at least 4, got {self.n_theta}")

    @property
    def grid(self) -> AngularGrid:
        return AngularGrid(self.n_theta)

    def n_steps(self) -> int:
        steps = round(self.t_final / self.dt)
        if abs(steps * self.dt - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ValueError(
                f"t_final={self.t_final} is not a multiple of dt={self.dt}"
            )
        return steps


@dataclass
class DensityField:
    """Nonnegative unit-mass grid density at one instant."""

    grid: AngularGrid
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_theta,):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid "
                f"({self.grid.n_theta},)"
            )

    def mass(self) -> float:
        return periodic_quadrature(self.values, self.grid)

    def validate(self, mass_tol: float = 1e-10, neg_tol: float = EPS_POS):
        if self.values.min() < -neg_tol:
            raise ValueError(
                f"density has negative values down to {self.values.min():.3e}"
            )
        mass = self.mass()
        if abs(mass - 1.0) > mass_tol:
            raise ValueError(f"density mass {mass!r} deviates from 1 beyond {mass_tol}")

    def copy(self) -> "DensityField":
        return DensityField(self.grid, self.values.copy(), self.time)


@dataclass
class TargetDensity:
    """Tracking target z(t, theta) on a time-angle grid, bounded in sup norm."""

    grid: AngularGrid
    values: np.ndarray  # shape (n_times, n_theta)
    times: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.times = np.asarray(self.times, dtype=float)
        if self.values.shape != (self.times.size, self.grid.n_theta):
            raise ValueError("target values must have shape (n_times, n_theta)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("target density must be bounded (finite values)")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("target times must be strictly increasing")

    @classmethod
    def constant(cls, values, grid: AngularGrid, t_final: float) -> "TargetDensity":
        values = np.asarray(values, dtype=float)
        return cls(grid, np.stack([values, values]), np.array([0.0, t_final]))

    @classmethod
    def from_trajectory(cls, snapshots) -> "TargetDensity":
        times = np.array([snap.time for snap in snapshots])
        values = np.stack([snap.values for snap in snapshots])
        return cls(snapshots[0].grid, values, times)

    def at(self, t: float) -> np.ndarray:
        """Piecewise-linear interpolation in time, clamped at the ends."""
        times = self.times
        if t <= times[0]:
            return self.values[0]
        if t >= times[-1]:
            return self.values[-1]
        k = int(np.searchsorted(times, t, side="right")) - 1
        lam = (t - times[k]) / (times[k + 1] - times[k])
        return (1.0 - lam) * self.values[k] + lam * self.values[k + 1]


def order_parameter(q) -> complex:
    """Complex first Fourier moment Z = int exp(i*theta) q(theta) dtheta."""
    if isinstance(q, DensityField):
        grid, values = q.grid, q.values
    else:
        grid, values = q
    nodes = grid.nodes
    return complex(
        grid.cell_width * np.sum(values * np.cos(nodes)),
        grid.cell_width * np.sum(values * np.sin(nodes)),
    )


def nonlocal_drift(q, alpha: float = 0.0) -> np.ndarray:
    """Synchronization drift w[q](theta) = Im( Z * exp(-i*(theta + alpha)) ).

    Equals the kernel integral int sin(theta' - theta - alpha) q(theta')
    dtheta' because the sine kernel only sees the first harmonic of q.
    """
    if isinstance(q, DensityField):
        grid, values = q.grid, q.values
    else:
        grid, values = q
    z = order_parameter((grid, values))
    return np.imag(z * np.exp(-1j * (grid.nodes + alpha)))


@lru_cache(maxsize=64)
def _cached_multiplier(n: int, coeff: float, length: float) -> np.ndarray:
    k = TWO_PI * np.fft.rfftfreq(n, d=length / n)
    return np.exp(-coeff * k * k)


def diffusion_multiplier(n: int, diffusion: float, dt: float, length: float = TWO_PI) -> np.ndarray:
    """rfft multiplier of the exact heat semigroup exp(dt * D * d2/dx2)."""
    return _cached_multiplier(n, diffusion * dt, length)


def diffuse(values: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
    return np.fft.irfft(np.fft.rfft(values) * multiplier, n=values.shape[-1])


def spectral_derivative(values: np.ndarray, order: int = 1, axis: int = -1,
                        length: float = TWO_PI) -> np.ndarray:
    """Fourier differentiation along one axis of a periodic grid function."""
    n = values.shape[axis]
    k = TWO_PI * np.fft.rfftfreq(n, d=length / n)
    shape = [1] * values.ndim
    shape[axis] = k.size
    mult = (1j * k.reshape(shape)) ** order
    return np.fft.irfft(np.fft.rfft(values, axis=axis) * mult, n=n, axis=axis)


def face_velocity(v_cell: np.ndarray) -> np.ndarray:
    """Linear interpolation of cell velocities to faces; entry j sits between
    cells j and j+1 (periodic)."""
    return 0.5 * (v_cell + np.roll(v_cell, -1))


def upwind_advect(values: np.ndarray, v_face: np.ndarray, dt: float, h: float) -> np.ndarray:
    """One conservative upwind step in flux form q <- q - dt/h * div(F)."""
    flux = np.where(v_face > 0.0, v_face * values, v_face * np.roll(values, -1))
    return values - (dt / h) * (flux - np.roll(flux, 1))


def _check_cfl(vmax: float, dt: float, h: float):
    if dt * vmax > h * (1.0 + 1e-12):
        raise CflError(
            f"CFL violated: max transport speed {vmax:.6g} requires "
            f"dt <= {h / vmax:.6g}, got dt = {dt:.6g}"
        )


def _clamp_positive(values: np.ndarray, grid: AngularGrid) -> np.ndarray:
    vmin = values.min()
    if vmin >= 0.0:
        return values
    if vmin < -EPS_POS:
        raise LeakageError(
            f"density dropped to {vmin:.3e}, below the positivity tolerance "
            f"{-EPS_POS:.0e}; the step is outside the scheme's stability envelope"
        )
    mass_before = periodic_quadrature(values, grid)
    clipped = np.maximum(values, 0.0)
    return clipped * (mass_before / periodic_quadrature(clipped, grid))


def pde_step(q: DensityField, u1, u2, params: PdeParams) -> DensityField:
    """Advance the density one step of size params.dt.

    ``u1`` and ``u2`` are grid functions on q.grid (control values for the
    current step).  The nonlocal drift is evaluated once, from the state
    entering the advection stage.
    """
    grid = q.grid
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    if u1.shape != (grid.n_theta,) or u2.shape != (grid.n_theta,):
        raise ValueError("control grid functions must match the density grid")
    half = diffusion_multiplier(grid.n_theta, params.diffusion, 0.5 * params.dt)

    a = diffuse(q.values, half)
    w = nonlocal_drift((grid, a), params.phase_shift)
    v_cell = u1 + u2 * w
    _check_cfl(float(np.max(np.abs(v_cell))), params.dt, grid.cell_width)
    b = upwind_advect(a, face_velocity(v_cell), params.dt, grid.cell_width)
    c = diffuse(b, half)
    c = _clamp_positive(c, grid)
    return DensityField(grid, c, q.time + params.dt)


def solve_pde(q0: DensityField, controls, params: PdeParams, snapshot_times=None):
    """March the PDE from q0 and return the requested snapshots.

    ``controls`` exposes ``at(t, grid) -> (u1, u2)`` giving the control
    slices on the state grid (see control.ControlField); None means zero
    controls.  ``snapshot_times`` must align with the step grid; None stores
    every step (dense trajectory, needed by the adjoint sweep).
    """
    if q0.grid.n_theta != params.n_theta:
        raise ValueError(
            f"initial density lives on n_theta={q0.grid.n_theta}, "
            f"params expect {params.n_theta}"
        )
    q0.validate()
    n_steps = params.n_steps()
    dt = params.dt

    if snapshot_times is None:
        wanted = None
    else:
        wanted = {}
        for t in snapshot_times:
            idx = round(t / dt)
            if idx < 0 or idx > n_steps or abs(idx * dt - t) > 1e-9 * max(1.0, t):
                raise ValueError(
                    f"snapshot time {t} does not align with the step grid "
                    f"(dt={dt}, t_final={params.t_final})"
                )
            wanted[idx] = t

    grid = q0.grid
    zeros = np.zeros(grid.n_theta)
    snapshots = []
    q = DensityField(grid, q0.values.copy(), 0.0)
    if wanted is None or 0 in wanted:
        snapshots.append(q.copy())
    for m in range(n_steps):
        t = m * dt
        if controls is None:
            u1 = u2 = zeros
        else:
            u1, u2 = controls.at(t, grid)
        q = pde_step(q, u1, u2, params)
        q.time = (m + 1) * dt  # avoid accumulating float error in time
        if wanted is None or (m + 1) in wanted:
            snapshots.append(q.copy())
    return snapshots


def mode_amplitude(q: DensityField, mode: int = 1) -> float:
    """Modulus of the complex Fourier coefficient c_k = int exp(-i k theta) q."""
    nodes = q.grid.nodes
    c = q.grid.cell_width * np.sum(q.values * np.exp(-1j * mode * nodes))
    return float(abs(c))

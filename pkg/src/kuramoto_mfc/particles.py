"""Stochastic simulation of the N-oscillator controlled system.

Euler-Maruyama on wrapped phases:

    theta_i <- wrap( theta_i + drift_i * dt + sqrt(2 D dt) * xi_i ),
    drift_i = u1(theta_i) + u2(theta_i) / N * sum_j sin(theta_j - theta_i - alpha).

The interaction sum runs over all j including j = i, so a lone particle
feels the residual drift u2 * sin(-alpha); this matches the per-particle
model exactly and shows up as the 1/N term of the first-marginal equation.
The sum collapses onto the empirical order parameter, giving O(N) steps;
an O(N^2) pairwise mode is kept for cross-checking.

Noise comes from a counter-based Philox stream keyed by the seed, so runs
are bit-reproducible and substreams could be split across workers without
changing results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circle import AngularGrid, wrap_angle
from .pde import DensityField

PAIRWISE = "pairwise"
ORDER_PARAMETER = "order_parameter"


@dataclass
class SdeParams:
    diffusion: float = 0.5
    phase_shift: float = 0.0
    dt: float = 1e-3
    t_final: float = 1.0
    interaction_mode: str = ORDER_PARAMETER

    def __post_init__(self):
        if self.diffusion < 0:
            raise ValueError(f"diffusion must be >= 0, got {self.diffusion}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.interaction_mode not in (PAIRWISE, ORDER_PARAMETER):
            raise ValueError(f"unknown interaction mode {self.interaction_mode!r}")


@dataclass
class ParticleEnsemble:
    """N wrapped phases plus the RNG stream that drives their noise."""

    phases: np.ndarray
    rng: np.random.Generator
    time: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=float)

    @property
    def n(self) -> int:
        return self.phases.size

    def copy(self) -> "ParticleEnsemble":
        # Snapshot of phases AND stream position, for reproducible branching.
        bg = type(self.rng.bit_generator)()
        bg.state = self.rng.bit_generator.state
        return ParticleEnsemble(self.phases.copy(), np.random.Generator(bg),
                                self.time, self.seed)


def _philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def sample_initial(q0: DensityField, n: int, seed: int) -> ParticleEnsemble:
    """Draw n i.i.d. phases from the piecewise-constant grid density q0.

    Inverse-CDF sampling: the CDF of a cell-wise constant density is
    piecewise linear, so a uniform variate is located in a cell by its
    cumulative mass and placed linearly within it.
    """
    if n <= 0:
        raise ValueError(f"particle count must be positive, got {n}")
    q0.validate()
    grid = q0.grid
    h = grid.cell_width
    cell_mass = q0.values * h
    cdf = np.cumsum(cell_mass)
    cdf /= cdf[-1]
    rng = _philox(seed)
    u = rng.random(n)
    cells = np.searchsorted(cdf, u, side="right")
    cells = np.minimum(cells, grid.n_theta - 1)
    cdf_lo = np.where(cells > 0, cdf[cells - 1], 0.0)
    mass = cdf[cells] - cdf_lo
    frac = np.where(mass > 0, (u - cdf_lo) / np.where(mass > 0, mass, 1.0), 0.5)
    # Cell k is centered at grid node k, spanning [node - h/2, node + h/2).
    phases = wrap_angle(grid.nodes[cells] - 0.5 * h + frac * h)
    return ParticleEnsemble(np.asarray(phases), rng, 0.0, seed)


def _per_particle(u, n: int):
    """Scalar controls pass through as floats (cheap broadcasting later)."""
    if u is None:
        return 0.0
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        return float(u)
    if u.shape != (n,):
        raise ValueError(f"control values must be scalar or one per particle, got shape {u.shape}")
    return u


def ensemble_drift(ensemble: ParticleEnsemble, u1, u2, alpha: float = 0.0,
                   mode: str = ORDER_PARAMETER) -> np.ndarray:
    """Per-particle drift; u1 and u2 are control values at the particle
    positions (scalars, per-particle arrays, or None for zero)."""
    theta = ensemble.phases
    n = ensemble.n
    u1p = _per_particle(u1, n)
    u2p = _per_particle(u2, n)
    if isinstance(u2p, float) and u2p == 0.0:
        # no coupling: skip the trig entirely
        return np.full(n, u1p) if isinstance(u1p, float) else u1p.copy()
    if mode == ORDER_PARAMETER:
        # Im( Z * e^{-i(theta+alpha)} ) with Z = C + iS, reusing one sin/cos pass
        sin_t = np.sin(theta)
        cos_t = np.cos(theta)
        big_c = cos_t.mean()
        big_s = sin_t.mean()
        ca, sa = np.cos(alpha), np.sin(alpha)
        interaction = (big_s * (cos_t * ca - sin_t * sa)
                       - big_c * (sin_t * ca + cos_t * sa))
    elif mode == PAIRWISE:
        diff = theta[None, :] - theta[:, None] - alpha
        interaction = np.sin(diff).sum(axis=1) / n
    else:
        raise ValueError(f"unknown interaction mode {mode!r}")
    return u1p + u2p * interaction


def sde_step(ensemble: ParticleEnsemble, u1, u2, params: SdeParams,
             noise: np.ndarray | None = None) -> ParticleEnsemble:
    """One Euler-Maruyama step; mutates AND returns the ensemble.

    ``noise`` overrides the stream draw with given standard normals (used by
    the exchangeability tests); by default one normal per particle is drawn
    from the ensemble's stream.
    """
    drift = ensemble_drift(ensemble, u1, u2, params.phase_shift,
                           params.interaction_mode)
    if noise is None:
        noise = ensemble.rng.standard_normal(ensemble.n)
    else:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != ensemble.phases.shape:
            raise ValueError("noise must provide one standard normal per particle")
    step = drift * params.dt + np.sqrt(2.0 * params.diffusion * params.dt) * noise
    # inline wrap: inputs are finite by construction, skip the checks
    phases = np.mod(ensemble.phases + step, 2.0 * np.pi)
    ensemble.phases = np.where(phases >= 2.0 * np.pi, 0.0, phases)
    ensemble.time += params.dt
    return ensemble


def run_particles(ensemble: ParticleEnsemble, controls, params: SdeParams,
                  snapshot_times) -> list[tuple[float, np.ndarray]]:
    """March the ensemble and return (time, phases-copy) at aligned snapshots."""
    dt = params.dt
    n_steps = round(params.t_final / dt)
    if abs(n_steps * dt - params.t_final) > 1e-9 * max(1.0, params.t_final):
        raise ValueError(f"t_final={params.t_final} is not a multiple of dt={dt}")
    wanted = {}
    for t in snapshot_times:
        idx = round(t / dt)
        if idx < 0 or idx > n_steps or abs(idx * dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"snapshot time {t} does not align with the step grid")
        wanted[idx] = t
    out = []
    if 0 in wanted:
        out.append((0.0, ensemble.phases.copy()))
    for m in range(n_steps):
        t = m * dt
        if controls is None:
            u1p = u2p = 0.0
        else:
            u1p, u2p = controls.at_particles(t, ensemble.phases)
        sde_step(ensemble, u1p, u2p, params)
        ensemble.time = (m + 1) * dt
        if (m + 1) in wanted:
            out.append((ensemble.time, ensemble.phases.copy()))
    return out


def empirical_marginal(ensemble: ParticleEnsemble, grid: AngularGrid) -> DensityField:
    """Histogram estimate of the one-particle density; unit mass by counting.

    Bins follow the cell-centered convention: bin k collects phases in
    [node_k - h/2, node_k + h/2).
    """
    h = grid.cell_width
    idx = np.floor((ensemble.phases + 0.5 * h) / h).astype(int) % grid.n_theta
    counts = np.bincount(idx, minlength=grid.n_theta).astype(float)
    values = counts / (ensemble.n * h)
    return DensityField(grid, values, ensemble.time)


def von_mises_smoothed_marginal(ensemble: ParticleEnsemble, grid: AngularGrid,
                                kappa: float = 50.0) -> DensityField:
    """Wrapped kernel density estimate with a von Mises kernel (for plots)."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    nodes = grid.nodes
    kernel = np.exp(kappa * np.cos(nodes[:, None] - ensemble.phases[None, :]))
    values = kernel.sum(axis=1) / (ensemble.n * 2.0 * np.pi * np.i0(kappa))
    return DensityField(grid, values, ensemble.time)

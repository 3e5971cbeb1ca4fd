"""Angular arithmetic on the circle S1 = R / 2*pi*Z.

Everything downstream (PDE, particles, Liouville tensors) lives on the
uniform cell-centered grid defined here: cell k is centered at
theta_k = 2*pi*k / n_theta and has width 2*pi / n_theta.  Integration is
the rectangle rule, which on a periodic uniform grid coincides with the
trapezoidal rule and is spectrally accurate for smooth integrands.

Angles are always stored in [0, 2*pi), never (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class AngularGrid:
    """Uniform cell-centered discretization of the circle.

    Attributes:
        n_theta: number of cells; cell k is centered at 2*pi*k / n_theta.
    """

    n_theta: int

    def __post_init__(self):
        if self.n_theta < 1:
            raise ValueError(f"n_theta must be positive, got {self.n_theta}")

    @property
    def cell_width(self) -> float:
        return TWO_PI / self.n_theta

    @property
    def nodes(self) -> np.ndarray:
        """Cell-center angles, strictly increasing in [0, 2*pi)."""
        return np.arange(self.n_theta) * self.cell_width


def wrap_angle(x):
    """Reduce an angle (scalar or array) to its representative in [0, 2*pi).

    Computes x - 2*pi*floor(x / 2*pi).  Results that round up to exactly
    2*pi (possible for tiny negative inputs) are mapped to 0.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("wrap_angle: input must be finite")
    wrapped = np.mod(x, TWO_PI)
    wrapped = np.where(wrapped >= TWO_PI, 0.0, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def interaction_kernel(theta, theta_prime, alpha=0.0):
    """Coupling kernel sin(theta' - theta - alpha) of the oscillator model."""
    return np.sin(np.asarray(theta_prime) - np.asarray(theta) - alpha)


def periodic_quadrature(values, grid: AngularGrid) -> float:
    """Integrate a grid function over the circle (rectangle rule)."""
    values = np.asarray(values)
    if values.shape[-1] != grid.n_theta:
        raise ValueError(
            f"grid function has length {values.shape[-1]}, expected {grid.n_theta}"
        )
    return float(grid.cell_width * np.sum(values))


def wrap_density(f, truncation_k: int, grid: AngularGrid) -> np.ndarray:
    """Wrap a density on the real line onto the circle grid.

    Returns f_w(theta_k) = sum_{j=-K..K} f(theta_k + 2*pi*j) evaluated at the
    cell centers.  ``f`` is either a vectorized callable on arrays of floats
    or a tabulated pair ``(x, fx)`` of increasing sample points and values;
    tabulated densities are linearly interpolated and treated as zero outside
    their sample range.

    The truncation K must be large enough that the tail mass of f outside
    [-2*pi*K, 2*pi*(K+1)] is below the caller's tolerance; K = 10 covers
    Gaussian tails up to sigma of order 2*pi.
    """
    if truncation_k < 1:
        raise ValueError(f"truncation_k must be >= 1, got {truncation_k}")
    if callable(f):
        evaluate = f
    else:
        x, fx = f
        x = np.asarray(x, dtype=float)
        fx = np.asarray(fx, dtype=float)
        if np.any(fx < 0):
            raise ValueError("wrap_density: tabulated density has negative values")

        def evaluate(pts):
            return np.interp(pts, x, fx, left=0.0, right=0.0)

    nodes = grid.nodes
    total = np.zeros(grid.n_theta)
    for j in range(-truncation_k, truncation_k + 1):
        vals = np.asarray(evaluate(nodes + TWO_PI * j), dtype=float)
        if np.any(vals < 0):
            raise ValueError("wrap_density: density has negative values")
        total += vals
    return total


def coarsen_density(values, fine: AngularGrid, coarse: AngularGrid) -> np.ndarray:
    """Project a cell-averaged density onto a coarser grid, exactly.

    Conserves mass for any grid ratio: each coarse cell value is the
    length-weighted average of the fine cells overlapping it.  Both grids
    follow the cell-centered node convention, so half-cell overlaps occur
    whenever the ratio is even.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (fine.n_theta,):
        raise ValueError("values must live on the fine grid")
    if fine.n_theta % coarse.n_theta != 0:
        raise ValueError(
            f"fine grid ({fine.n_theta}) must be a multiple of coarse ({coarse.n_theta})"
        )
    ratio = fine.n_theta // coarse.n_theta
    h = fine.cell_width
    out = np.empty(coarse.n_theta)
    # Coarse cell c spans [(c - 1/2)*H, (c + 1/2)*H) with H = ratio * h.
    # Fine cell j spans [(j - 1/2)*h, (j + 1/2)*h); overlap fractions are
    # 1 for interior cells and 1/2 when a fine cell straddles a coarse edge
    # (even ratio).
    for c in range(coarse.n_theta):
        lo = c * ratio - ratio / 2.0
        hi = c * ratio + ratio / 2.0
        j_lo = math.floor(lo + 0.5)
        j_hi = math.floor(hi + 0.5)
        acc = 0.0
        for j in range(j_lo, j_hi + 1):
            overlap = min(hi, j + 0.5) - max(lo, j - 0.5)
            if overlap > 0:
                acc += overlap * values[j % fine.n_theta]
        out[c] = acc * h / coarse.cell_width
    return out

"""Named density families used as initial data and tracking targets.

All builders return grid values normalized to exact unit quadrature mass.
"""

from __future__ import annotations

import numpy as np

from .circle import TWO_PI, AngularGrid, periodic_quadrature


def _normalized(values: np.ndarray, grid: AngularGrid) -> np.ndarray:
    mass = periodic_quadrature(values, grid)
    if mass <= 0:
        raise ValueError("density has nonpositive mass")
    return values / mass


def uniform_density(grid: AngularGrid) -> np.ndarray:
    return np.full(grid.n_theta, 1.0 / TWO_PI)


def cosine_density(grid: AngularGrid, amplitude: float = 1.0, mode: int = 1) -> np.ndarray:
    """(1 + amplitude * cos(mode * theta)) / 2*pi; needs |amplitude| <= 1."""
    if abs(amplitude) > 1.0:
        raise ValueError(f"|amplitude| must be <= 1 for nonnegativity, got {amplitude}")
    values = (1.0 + amplitude * np.cos(mode * grid.nodes)) / TWO_PI
    return _normalized(values, grid)


def von_mises_density(grid: AngularGrid, mu: float, kappa: float) -> np.ndarray:
    """Circular normal: exp(kappa*cos(theta - mu)) / (2*pi*I0(kappa))."""
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    values = np.exp(kappa * np.cos(grid.nodes - mu)) / (TWO_PI * np.i0(kappa))
    return _normalized(values, grid)


def tabulated_density(grid: AngularGrid, theta, values) -> np.ndarray:
    """Interpolate tabulated (theta, value) samples periodically onto the grid."""
    theta = np.asarray(theta, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(values < 0):
        raise ValueError("tabulated density has negative values")
    order = np.argsort(theta)
    theta, values = theta[order], values[order]
    # Pad one period on each side so np.interp sees the wrap-around.
    theta_ext = np.concatenate([theta - TWO_PI, theta, theta + TWO_PI])
    values_ext = np.concatenate([values, values, values])
    out = np.interp(grid.nodes, theta_ext, values_ext)
    return _normalized(out, grid)


def line_gaussian(mu: float, sigma: float):
    """Density of a Gaussian on the real line, as a vectorized callable."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")

    def density(x):
        x = np.asarray(x, dtype=float)
        return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))

    return density

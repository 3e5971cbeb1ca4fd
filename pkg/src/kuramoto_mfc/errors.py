"""Exception types shared across the solvers.

Plain ``ValueError`` is used for usage/domain errors (bad shapes, invalid
parameters, negative densities).  The classes here mark numerical failures
that the CLI maps to a dedicated exit code.
"""


class CflError(RuntimeError):
    """Advective CFL condition violated for the requested time step."""


class LeakageError(RuntimeError):
    """Mass escaped the resolved region (clamping overflow or domain too narrow)."""

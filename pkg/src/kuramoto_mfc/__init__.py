"""Controlled Kuramoto mean-field laboratory.

Solvers and experiment harnesses for the controlled oscillator-density
PDE on the circle, the corresponding N-particle SDE and small-N joint
(Liouville) equation, tracking-cost functionals with adjoint gradients,
and the convergence studies connecting the particle and mean-field levels.
"""

from .circle import AngularGrid, interaction_kernel, periodic_quadrature, wrap_angle, wrap_density
from .control import (
    AdjointField,
    ControlField,
    CostBreakdown,
    CostWeights,
    OptimizeConfig,
    OptimizeResult,
    adjoint_solve,
    cost_J,
    cost_JN,
    gradient,
    optimize,
    optimize_JN,
    project_control,
)
from .errors import CflError, LeakageError
from .liouville import (
    MarginalSet,
    TensorDensity,
    first_marginal,
    liouville_solve,
    marginal_residual,
    marginal_set,
    relative_entropy,
    second_marginal,
    tensorized_law,
)
from .particles import (
    ParticleEnsemble,
    SdeParams,
    empirical_marginal,
    ensemble_drift,
    run_particles,
    sample_initial,
    sde_step,
)
from .pde import (
    DensityField,
    PdeParams,
    TargetDensity,
    mode_amplitude,
    nonlocal_drift,
    order_parameter,
    pde_step,
    solve_pde,
)
from .studies import (
    chaos_rate_study,
    ckp_chain_study,
    gamma_consistency_study,
    gamma_min_values,
    l1_distance,
    wrapped_consistency_study,
)

__version__ = "0.1.0"

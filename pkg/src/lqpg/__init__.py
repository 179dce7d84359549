"""Policy gradient for finite-horizon entropy-regularized linear-quadratic control.

Model-based layer: :mod:`lqpg.model`, :mod:`lqpg.ode`, :mod:`lqpg.gradient`,
:mod:`lqpg.pg`, :mod:`lqpg.landscape`.  Model-free layer:
:mod:`lqpg.montecarlo`.  Front end: :mod:`lqpg.config`, :mod:`lqpg.bench`,
:mod:`lqpg.report`, :mod:`lqpg.cli`.
"""

from .gradient import GradientField, bw_gradient_V, directional_derivative, gradient_field, gradient_K, gradient_V
from .model import (
    DiagnosticsRecord,
    LqcModel,
    Loewner,
    NumericalError,
    Policy,
    SingularityError,
    TimeGrid,
    TrajectorySolution,
    ValidationReport,
    loewner_compare,
    psd_sqrt,
    relative_entropy_gaussian,
    sym,
    validate_model,
)
from .ode import (
    CostBreakdown,
    RiccatiSolution,
    cost,
    evaluate_cost,
    optimal_policy,
    solve_phi,
    solve_policy_lyapunov,
    solve_riccati,
    solve_state_covariance,
    solve_trajectory,
)
from .pg import (
    PgAborted,
    PgConfig,
    RunRecord,
    SweepTable,
    discrete_step,
    iterations_to_tolerance,
    loglinear_fit,
    mesh_optimum,
    mesh_sweep,
    npg_step,
    project_policy_to_grid,
    run_continuous_pg,
    run_discrete_pg,
)
from .presets import BenchmarkPreset, get_preset, mean_variance_model, mean_variance_theta0

__version__ = "0.1.0"

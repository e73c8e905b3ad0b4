"""Safe control with Gaussian-process dynamics and barrier states."""

from .barrier import (
    BarrierConfig,
    CircleConstraint,
    EmbeddedModel,
    EmbeddedState,
    SafetyFunction,
    bas_rhs,
    bas_upper_bound,
    barrier_deriv,
    barrier_inverse,
    barrier_value,
    dbas_gradients,
    dbas_step,
    embedded_jacobians_lqr,
    embedded_step,
    gp_bas_moments,
    quantile_phi,
)
from .control import (
    DdpOptions,
    DdpSolution,
    LqrGains,
    LqrPolicy,
    QuadraticCost,
    dare_solve,
    ddp_optimize,
    gpbas_lqr,
    rollout_policy,
)
from .environments import Environment, dubins_env, generate_training_data, linear_env, make_env, quadrotor_env
from .errors import (
    BoundaryViolationError,
    GpBasError,
    InvalidArgumentError,
    InvariantError,
    NotStabilizableError,
    NumericalError,
    SolverStalledError,
)
from .gp import (
    Dataset,
    GpModel,
    KernelHyperparameters,
    gp_fit,
    gp_posterior,
    gp_posterior_gradient,
    kernel_eval,
    log_marginal_likelihood,
    optimize_hyperparameters,
    train_gp,
)
from .uncertainty import GaussianBelief, SafetyReport, mc_rollout, propagate_belief

__version__ = "0.1.0"

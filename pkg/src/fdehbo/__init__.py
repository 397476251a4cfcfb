"""Hessian/Jacobian-free stochastic bilevel optimization."""

from .errors import (
    BilevelError,
    ConfigError,
    ContractViolationError,
    DivergenceError,
    InvalidArgumentError,
    NumericalError,
    UnsupportedCapabilityError,
)
from .estimators import (
    FdParams,
    MomentumBuffer,
    exact_hypergradient_surrogate,
    exact_ls_gradient,
    fd_hessian_vec,
    fd_jacobian_vec,
    fo_hypergradient,
    fo_ls_gradient,
    momentum_update,
    project_ball,
)
from .optimizers import (
    ALGORITHMS,
    IterationRecord,
    OptimizerState,
    RunResult,
    ScheduleParams,
    baseline_fo_step,
    fdehbo_step,
    fmbo_step,
    init_state,
    run,
    schedule_at,
    theory_schedule,
    tuned_schedule,
)
from .oracle import BilevelOracle, CountingOracle, GroundTruth, Point, ProblemConstants, SampleKey, Stream

__version__ = "0.1.0"

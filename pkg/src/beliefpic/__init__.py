"""Path integral control in Gaussian belief space with controlled sensing."""

from beliefpic.errors import (
    BeliefPicError,
    DegenerateWeights,
    InfeasibleHorizon,
    InvalidArgument,
    MatchingInfeasible,
    PositivityViolation,
    UnsupportedCost,
)
from beliefpic.model import (
    Affine,
    ModelSpec,
    QuadraticCost,
    Scalar,
    Scaled,
    SensingCost,
    gaussian_expect,
    sensing_D,
    sensing_matrix,
)
from beliefpic.covariance import (
    Belief,
    CovariancePath,
    MatchingSolution,
    feasibility_horizon,
    matching_target,
    propagate_cov,
    riccati_rhs,
    selector,
    solve_matching,
)
from beliefpic.sampler import (
    ClosedLoopRecord,
    RolloutBatch,
    rollout_augmented,
    simulate_closed_loop,
    sqrt_psd,
)
from beliefpic.pic import (
    ControlEstimate,
    MartingaleTable,
    ValueEstimate,
    estimate_control,
    estimate_psi,
    martingale_check,
    receding_horizon_control,
)
from beliefpic.oracle import (
    LqgSolution,
    PdeGrid,
    cole_hopf_check,
    hjb_residual,
    lqg_solve,
    solve_scalar_pde,
)

__version__ = "0.1.0"

__all__ = [
    "BeliefPicError",
    "DegenerateWeights",
    "InfeasibleHorizon",
    "InvalidArgument",
    "MatchingInfeasible",
    "PositivityViolation",
    "UnsupportedCost",
    "Affine",
    "ModelSpec",
    "QuadraticCost",
    "Scalar",
    "Scaled",
    "SensingCost",
    "gaussian_expect",
    "sensing_D",
    "sensing_matrix",
    "Belief",
    "CovariancePath",
    "MatchingSolution",
    "feasibility_horizon",
    "matching_target",
    "propagate_cov",
    "riccati_rhs",
    "selector",
    "solve_matching",
    "ClosedLoopRecord",
    "RolloutBatch",
    "rollout_augmented",
    "simulate_closed_loop",
    "sqrt_psd",
    "ControlEstimate",
    "MartingaleTable",
    "ValueEstimate",
    "estimate_control",
    "estimate_psi",
    "martingale_check",
    "receding_horizon_control",
    "LqgSolution",
    "PdeGrid",
    "cole_hopf_check",
    "hjb_residual",
    "lqg_solve",
    "solve_scalar_pde",
]

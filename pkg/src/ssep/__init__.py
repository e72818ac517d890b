"""Symmetric simple exclusion process: simulation, duality and exact oracles."""

__version__ = "0.1.0"

from .dual import (
    CouplingRecord,
    collision_rate_check,
    estimate_basic_lhs,
    estimate_basic_rhs,
    simulate_coupled,
    simulate_dual_exclusion,
)
from .errors import (
    AsymmetricKernel,
    Decomposable,
    DomainMismatch,
    DuplicateSites,
    HorizonTooLarge,
    InvalidKernel,
    NotNormalized,
    PreconditionError,
    QuadratureNotConverged,
    RhoGridTooCoarse,
    SignalBelowNoise,
    SSEPError,
    StateSpaceTooLarge,
    TooFewPoints,
    TruncationBudgetExceeded,
    WindowOutOfRange,
    WindowTooLarge,
    ZeroDisplacement,
)
from .exact import (
    NParticleGenerator,
    correlation_inequality_check,
    exact_basic_identity,
    exact_correlation,
    exact_rho,
    lemma_bes_sum,
)
from .experiments import (
    ExperimentSpec,
    RateTable,
    fit_rate,
    run_basic_identity_sweep,
    run_gradient_sums,
    run_lp_convergence,
    run_vfunction,
    run_weak_convergence,
)
from .graphical import (
    ClockStream,
    dual_walks,
    evolve_configuration,
    sample_clock_stream,
    stirring_map,
)
from .kernel import (
    Kernel,
    TransitionDistribution,
    gradient_sums,
    kernel_from_json,
    make_kernel,
    nearest_neighbor,
    sample_walk_increment,
    transition_distribution,
)
from .measures import (
    Bernoulli,
    BoundProfile,
    LatticeConfiguration,
    LocalRuleField,
    PointMass,
    check_Xphi_membership,
    correlation_table,
    cylinder_prob,
    measure_from_json,
    power_profile,
    sample_configuration,
)

__all__ = [
    "AsymmetricKernel",
    "Bernoulli",
    "BoundProfile",
    "ClockStream",
    "CouplingRecord",
    "Decomposable",
    "DomainMismatch",
    "DuplicateSites",
    "ExperimentSpec",
    "HorizonTooLarge",
    "InvalidKernel",
    "Kernel",
    "LatticeConfiguration",
    "LocalRuleField",
    "NParticleGenerator",
    "NotNormalized",
    "PointMass",
    "PreconditionError",
    "QuadratureNotConverged",
    "RateTable",
    "RhoGridTooCoarse",
    "SSEPError",
    "SignalBelowNoise",
    "StateSpaceTooLarge",
    "TooFewPoints",
    "TransitionDistribution",
    "TruncationBudgetExceeded",
    "WindowOutOfRange",
    "WindowTooLarge",
    "ZeroDisplacement",
    "__version__",
    "check_Xphi_membership",
    "collision_rate_check",
    "correlation_inequality_check",
    "correlation_table",
    "cylinder_prob",
    "dual_walks",
    "estimate_basic_lhs",
    "estimate_basic_rhs",
    "evolve_configuration",
    "exact_basic_identity",
    "exact_correlation",
    "exact_rho",
    "fit_rate",
    "gradient_sums",
    "kernel_from_json",
    "lemma_bes_sum",
    "make_kernel",
    "measure_from_json",
    "nearest_neighbor",
    "power_profile",
    "run_basic_identity_sweep",
    "run_gradient_sums",
    "run_lp_convergence",
    "run_vfunction",
    "run_weak_convergence",
    "sample_clock_stream",
    "sample_configuration",
    "sample_walk_increment",
    "simulate_coupled",
    "simulate_dual_exclusion",
    "stirring_map",
    "transition_distribution",
]

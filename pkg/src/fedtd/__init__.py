"""Federated TD(0) policy evaluation with Polyak-Ruppert averaging."""

from .errors import (
    AggregationError,
    ConfigError,
    DivergenceError,
    FedTdError,
    GenerationError,
    HeterogeneityViolation,
    MixingError,
    NumericalError,
    ProtocolError,
)
from .envgen import (
    AgentFamily,
    FeatureMatrix,
    HeterogeneityBudget,
    gen_agent_family,
    gen_feature_matrix,
    gen_policy,
    verify_heterogeneity,
)
from .fed_td import (
    AvgFedTdState,
    ExpFedTdState,
    PreparedFamily,
    RunTrace,
    StepSchedule,
    prepare_family,
    run_avgfedtd,
    run_expfedtd,
)
from .ground_truth import gap_constants, solve_agent, solve_global
from .mdp import Mdp, Policy, check_ergodic, induce_chain, stationary_distribution

__version__ = "0.1.0"

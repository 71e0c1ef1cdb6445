"""Federated aggregation via masked optimal transport.

The package couples a sparse iterative-proportional-fitting solver for masked
transport problems with an exact max-flow feasibility characterization and a
deterministic federated-learning simulator used to study aggregation rules
under partial client participation.
"""

from .feasibility import (
    FeasibilityVerdict,
    FlowNetwork,
    build_flow_network,
    check_feasible_hall,
    check_feasible_maxflow,
    max_flow,
    subset_inequalities,
)
from .simulation import (
    ExplicitAvailability,
    FedAvgFull,
    FedAvgK,
    Fedavot,
    FederationConfig,
    PairPrior,
    TrainingTrace,
    aggregate,
    expand_availability,
    expected_aggregate_weight,
    fedavgk_expected_scale,
    local_update,
    run_training,
    sample_active_set,
)
from .tasks import (
    TaskSpec,
    gen_label_skew_classification,
    gen_linear_regression,
    global_objective,
    load_mnist_idx,
)
from .transport import (
    SinkhornResult,
    StructuralInfeasibilityError,
    TransportPlan,
    TransportProblem,
    ValidationError,
    WeightMatrix,
    build_problem,
    implied_importance,
    init_plan,
    marginal_residuals,
    normalize_weights,
    sinkhorn_step,
    solve_sinkhorn,
    uniform_weights,
)

__all__ = [
    "ExplicitAvailability",
    "FeasibilityVerdict",
    "FedAvgFull",
    "FedAvgK",
    "Fedavot",
    "FederationConfig",
    "FlowNetwork",
    "PairPrior",
    "SinkhornResult",
    "StructuralInfeasibilityError",
    "TaskSpec",
    "TrainingTrace",
    "TransportPlan",
    "TransportProblem",
    "ValidationError",
    "WeightMatrix",
    "aggregate",
    "build_flow_network",
    "build_problem",
    "check_feasible_hall",
    "check_feasible_maxflow",
    "expand_availability",
    "expected_aggregate_weight",
    "fedavgk_expected_scale",
    "gen_label_skew_classification",
    "gen_linear_regression",
    "global_objective",
    "implied_importance",
    "init_plan",
    "load_mnist_idx",
    "local_update",
    "marginal_residuals",
    "max_flow",
    "normalize_weights",
    "run_training",
    "sample_active_set",
    "sinkhorn_step",
    "solve_sinkhorn",
    "subset_inequalities",
    "uniform_weights",
]

__version__ = "0.1.0"

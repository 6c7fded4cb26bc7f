"""Federated learning with collaborative relaying over intermittent uplinks.

Clients with unreliable uplinks relay weighted combinations of their
neighbors' model updates to a blind parameter server. The relay weights are
optimized to keep the aggregated update unbiased while minimizing its
variance, which tightens the convergence rate of the overall scheme.
"""

__version__ = "0.1.0"

from colrel.topology import (
    ConnectivityGraph,
    build_graph,
    common_neighborhood,
    neighborhood,
    standard_topology,
)
from colrel.weights import (
    RelayWeights,
    check_unbiasedness,
    identity_weights,
    initial_weights,
    optimize_weights,
    variance_objective,
)
from colrel.objectives import (
    ObjectiveEnsemble,
    gradient,
    make_quadratic_ensemble,
    stochastic_gradient,
    suboptimality,
)
from colrel.protocol import (
    AlgorithmVariant,
    EtaSchedule,
    SimulationConfig,
    local_round,
    ps_aggregate,
    relay_combine,
    run_simulation,
    sample_channel,
)
from colrel.analysis import BoundConstants, bound_constants, bound_value, summarize

__all__ = [
    "__version__",
    "ConnectivityGraph",
    "build_graph",
    "neighborhood",
    "common_neighborhood",
    "standard_topology",
    "RelayWeights",
    "initial_weights",
    "identity_weights",
    "check_unbiasedness",
    "variance_objective",
    "optimize_weights",
    "ObjectiveEnsemble",
    "make_quadratic_ensemble",
    "gradient",
    "stochastic_gradient",
    "suboptimality",
    "AlgorithmVariant",
    "EtaSchedule",
    "SimulationConfig",
    "local_round",
    "relay_combine",
    "sample_channel",
    "ps_aggregate",
    "run_simulation",
    "BoundConstants",
    "bound_constants",
    "bound_value",
    "summarize",
]

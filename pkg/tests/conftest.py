import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")

from colrel.topology import build_graph, standard_topology

# Heterogeneous uplink probabilities used for the ring experiments.
HET_RING_P = [0.1, 0.2, 0.3, 0.1, 0.1, 0.5, 0.8, 0.1, 0.2, 0.9]


@pytest.fixture
def het_ring_graph():
    """Ten clients on a ring, each with a different uplink probability."""
    return build_graph(10, standard_topology("ring", 10, 1), HET_RING_P)


@pytest.fixture
def rng():
    return np.random.default_rng(2026)

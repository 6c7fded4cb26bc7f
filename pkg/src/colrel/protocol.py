"""Round engine: local SGD, neighbor relaying, lossy uplinks, server aggregation.

One round proceeds as: the server broadcasts the global model; every client
runs T local SGD steps and forms its update delta; each client combines its
own delta with its neighbors' using its row of the relay weight matrix; each
uplink then succeeds or fails as an independent Bernoulli draw; finally the
server adds the rescaled sum of the updates that arrived. The blind server
never learns which clients got through: it only consumes the masked sum.

Besides the relaying scheme ("colrel") three reference baselines are
provided: federated averaging with no dropouts, blind federated averaging
(missing updates silently count as zero), and a non-blind variant where the
server knows the set of successful uplinks and averages over it.

Randomness discipline: every simulation derives one named substream per
client (gradient noise) plus one for the channel from the master seed, so
runs with equal seeds are coupled draw-for-draw across variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from colrel.objectives import ObjectiveEnsemble, stochastic_gradient, suboptimality
from colrel.topology import ConnectivityGraph, _check_client_id
from colrel.weights import RelayWeights, check_unbiasedness

COLREL = "colrel"
FEDAVG_NO_DROPOUT = "fedavg_no_dropout"
FEDAVG_BLIND_DROPOUT = "fedavg_blind_dropout"
FEDAVG_NONBLIND_DROPOUT = "fedavg_nonblind_dropout"
VARIANT_KINDS = (COLREL, FEDAVG_NO_DROPOUT, FEDAVG_BLIND_DROPOUT, FEDAVG_NONBLIND_DROPOUT)

ETA_CONSTANT = "constant"
ETA_THEOREM = "theorem"

_FEASIBILITY_TOL = 1e-6


class DivergenceError(RuntimeError):
    """A model iterate became non-finite (step size too large)."""

    def __init__(self, client: int | None, local_step: int, round_index: int | None = None):
        self.client = client
        self.local_step = local_step
        self.round_index = round_index
        where = f"round {round_index}, " if round_index is not None else ""
        who = f"client {client}, local step {local_step}" if client is not None else "global model"
        super().__init__(f"non-finite iterate at {where}{who}; reduce the step size")


@dataclass(frozen=True)
class AlgorithmVariant:
    """One of the aggregation schemes; relaying carries its weight matrix."""

    kind: str
    weights: RelayWeights | None = None

    def __post_init__(self) -> None:
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown variant {self.kind!r}; expected one of {VARIANT_KINDS}")
        if self.kind == COLREL and self.weights is None:
            raise ValueError("colrel requires relay weights")
        if self.kind != COLREL and self.weights is not None:
            raise ValueError(f"variant {self.kind!r} does not take relay weights")

    @classmethod
    def colrel(cls, weights: RelayWeights) -> "AlgorithmVariant":
        return cls(COLREL, weights)

    @classmethod
    def fedavg_no_dropout(cls) -> "AlgorithmVariant":
        return cls(FEDAVG_NO_DROPOUT)

    @classmethod
    def fedavg_blind_dropout(cls) -> "AlgorithmVariant":
        return cls(FEDAVG_BLIND_DROPOUT)

    @classmethod
    def fedavg_nonblind_dropout(cls) -> "AlgorithmVariant":
        return cls(FEDAVG_NONBLIND_DROPOUT)


@dataclass(frozen=True)
class EtaSchedule:
    """Step-size schedule: fixed, or the decaying rate 4 / (mu (r T + 1))."""

    kind: str
    value: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in (ETA_CONSTANT, ETA_THEOREM):
            raise ValueError(f"unknown eta schedule {self.kind!r}")
        if self.kind == ETA_CONSTANT:
            if self.value is None or not self.value > 0.0:
                raise ValueError(f"constant schedule needs a positive value, got {self.value!r}")
        elif self.value is not None:
            raise ValueError("the decaying schedule takes no value")

    @classmethod
    def constant(cls, value: float) -> "EtaSchedule":
        return cls(ETA_CONSTANT, value)

    @classmethod
    def theorem(cls) -> "EtaSchedule":
        return cls(ETA_THEOREM)

    def rate(self, r: int, T: int, mu: float) -> float:
        if self.kind == ETA_CONSTANT:
            return float(self.value)
        return 4.0 / (mu * (r * T + 1))


@dataclass(frozen=True)
class ChannelRealization:
    """One round of uplink outcomes: tau[i] = 1 iff client i's uplink is up."""

    tau: np.ndarray = field(repr=False)

    @property
    def num_connected(self) -> int:
        return int(self.tau.sum())


@dataclass(frozen=True)
class SimulationConfig:
    """Static per-run parameters shared by every seed of an experiment."""

    T: int
    R: int
    eta: EtaSchedule
    momentum: float = 0.0
    record_tau: bool = False
    record_model: bool = False

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError(f"local period T must be at least 1, got {self.T}")
        if self.R < 1:
            raise ValueError(f"round count R must be at least 1, got {self.R}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class RoundRecord:
    """Per-round trace entry; suboptimality refers to the post-update model."""

    variant: str
    seed: int
    r: int
    eta: float
    suboptimality: float
    num_connected: int
    tau: tuple[int, ...] | None = None
    x_global: np.ndarray | None = field(default=None, repr=False)


def local_round(
    ens: ObjectiveEnsemble,
    i: int,
    x_global: np.ndarray,
    eta_r: float,
    T: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run T local SGD steps from the broadcast model; return the update delta.

    Raises:
        DivergenceError: an iterate became non-finite (carries client and
            local step; the simulation loop adds the round index).
    """
    if T < 1:
        raise ValueError(f"local period T must be at least 1, got {T}")
    if not eta_r > 0.0:
        raise ValueError(f"step size must be positive, got {eta_r}")
    _check_client_id(ens.n, i)
    x = np.array(x_global, dtype=float)
    # Overflow shows up as the explicit divergence error, not as a warning.
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(T):
            x -= eta_r * stochastic_gradient(ens, i, x, rng)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(client=i, local_step=k)
    return x - x_global


def relay_combine(
    g: ConnectivityGraph, weights: RelayWeights, deltas: np.ndarray, i: int
) -> np.ndarray:
    """Client i's uploaded combination: its row of weights applied to the
    deltas of its closed neighborhood."""
    _check_client_id(g.n, i)
    if weights.n != g.n:
        raise ValueError(f"weight matrix is {weights.n}x{weights.n} but the graph has {g.n} clients")
    deltas = np.asarray(deltas, dtype=float)
    members = np.flatnonzero(g.closed_adjacency[:, i])
    return weights.matrix[i, members] @ deltas[members]


def sample_channel(g: ConnectivityGraph, rng: np.random.Generator) -> ChannelRealization:
    """Draw one round of independent uplink outcomes."""
    tau = (rng.random(g.n) < g.p).astype(np.int64)
    tau.flags.writeable = False
    return ChannelRealization(tau=tau)


def ps_aggregate(
    x_global: np.ndarray,
    relayed: np.ndarray,
    tau: ChannelRealization,
    variant: AlgorithmVariant,
    momentum: float = 0.0,
    momentum_buffer: np.ndarray | None = None,
) -> np.ndarray:
    """One server update from the (n, d) matrix of uploaded updates.

    For the blind schemes (relaying and blind federated averaging) the server
    adds 1/n times the masked sum of arrivals; the non-blind baseline
    averages over the arrivals and keeps the model unchanged when nothing
    arrived; the no-dropout baseline averages everything. With momentum
    beta the update u is folded through m <- beta m + u, x <- x + m, and the
    new buffer can be recovered as the returned x minus the previous one.
    """
    x_global = np.asarray(x_global, dtype=float)
    relayed = np.asarray(relayed, dtype=float)
    n = relayed.shape[0]
    mask = tau.tau.astype(float)

    if variant.kind in (COLREL, FEDAVG_BLIND_DROPOUT):
        update = (mask[:, None] * relayed).sum(axis=0) * (1.0 / n)
    elif variant.kind == FEDAVG_NO_DROPOUT:
        update = relayed.sum(axis=0) * (1.0 / n)
    elif variant.kind == FEDAVG_NONBLIND_DROPOUT:
        arrived = mask.sum()
        if arrived == 0.0:
            update = np.zeros_like(x_global)
        else:
            update = (mask[:, None] * relayed).sum(axis=0) * (1.0 / arrived)
    else:  # pragma: no cover - guarded by AlgorithmVariant
        raise ValueError(f"unknown variant {variant.kind!r}")

    if momentum > 0.0:
        buffer = np.zeros_like(x_global) if momentum_buffer is None else momentum_buffer
        update = momentum * buffer + update
    return x_global + update


def spawn_streams(seed: int, n: int) -> tuple[list[np.random.Generator], np.random.Generator]:
    """Derive the per-client gradient-noise streams and the channel stream."""
    children = np.random.SeedSequence(seed).spawn(n + 1)
    return [np.random.default_rng(c) for c in children[:n]], np.random.default_rng(children[n])


def run_simulation(
    ens: ObjectiveEnsemble,
    g: ConnectivityGraph,
    variant: AlgorithmVariant,
    sim: SimulationConfig,
    seed: int,
) -> list[RoundRecord]:
    """Simulate R rounds of the chosen scheme; returns one record per round.

    The model starts at zero. Equal seeds couple the gradient noise and the
    channel draws across variants, so paired comparisons see identical
    randomness. Deterministic: equal inputs produce identical traces.

    Raises:
        DivergenceError: with full round context, when an iterate or the
            global model becomes non-finite.
    """
    if ens.n != g.n:
        raise ValueError(f"ensemble has {ens.n} clients but the graph has {g.n}")
    weights_matrix = None
    if variant.kind == COLREL:
        report = check_unbiasedness(g, variant.weights, tol=_FEASIBILITY_TOL)
        if not report.all_ok:
            detail = (
                f"support violations at {list(report.support_violations)[:4]}"
                if not report.structural_ok
                else f"max residual {float(report.residuals.max()):.3e}"
            )
            raise ValueError(f"colrel requires feasible relay weights: {detail}")
        weights_matrix = variant.weights.matrix

    n, d, T = ens.n, ens.d, sim.T
    client_rngs, channel_rng = spawn_streams(seed, n)
    noise_scale = ens.sigma / np.sqrt(d)

    x = np.zeros(d)
    momentum_buffer = np.zeros(d) if sim.momentum > 0.0 else None
    records: list[RoundRecord] = []

    for r in range(sim.R):
        eta = sim.eta.rate(r, T, ens.mu)
        if not eta > 0.0:
            raise ValueError(f"step size schedule produced eta={eta} at round {r}")

        # Local training, vectorized across clients. Pre-drawing each
        # client's noise block consumes its stream exactly like T sequential
        # per-step draws.
        iterates = np.broadcast_to(x, (n, d)).copy()
        if ens.sigma > 0.0:
            noise = np.stack([rng.standard_normal((T, d)) for rng in client_rngs]) * noise_scale
        else:
            noise = None
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(T):
                grads = np.einsum("nij,nj->ni", ens.Q, iterates - ens.b)
                if noise is not None:
                    grads += noise[:, k]
                iterates -= eta * grads
                if not np.all(np.isfinite(iterates)):
                    bad = int(np.argmax(~np.isfinite(iterates).all(axis=1)))
                    raise DivergenceError(client=bad, local_step=k, round_index=r)
        deltas = iterates - x

        if weights_matrix is not None:
            uploaded = weights_matrix @ deltas
        else:
            uploaded = deltas

        tau = sample_channel(g, channel_rng)
        x_prev = x
        x = ps_aggregate(
            x, uploaded, tau, variant, momentum=sim.momentum, momentum_buffer=momentum_buffer
        )
        if momentum_buffer is not None:
            momentum_buffer = x - x_prev
        if not np.all(np.isfinite(x)):
            raise DivergenceError(client=None, local_step=T, round_index=r)

        with np.errstate(over="ignore"):
            gap = suboptimality(ens, x)
        records.append(
            RoundRecord(
                variant=variant.kind,
                seed=int(seed),
                r=r,
                eta=float(eta),
                suboptimality=gap,
                num_connected=tau.num_connected,
                tau=tuple(int(t) for t in tau.tau) if sim.record_tau else None,
                x_global=x.copy() if sim.record_model else None,
            )
        )
    return records

"""Run configuration: strict JSON parsing, defaults, and canonicalization.

A run config is a JSON document with sections graph, objective, protocol,
optimizer and experiment. Parsing is strict: unknown keys are rejected by
name, every numeric field is validated against the preconditions of the
module it feeds, and scalar uplink probabilities broadcast to all clients.
The canonical text form has every default materialized and keys sorted, so
equal configurations have equal bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from colrel.objectives import ObjectiveEnsemble, make_quadratic_ensemble
from colrel.protocol import ETA_CONSTANT, ETA_THEOREM, EtaSchedule, SimulationConfig, VARIANT_KINDS
from colrel.topology import (
    EDGELESS,
    FULLY_CONNECTED,
    RING,
    ConnectivityGraph,
    build_graph,
    standard_topology,
)

EXPLICIT_EDGES = "edges"


class ConfigError(ValueError):
    """A config document failed to parse or validate."""


@dataclass(frozen=True)
class TopologySpec:
    kind: str
    k: int | None = None
    edges: tuple[tuple[int, int], ...] | None = None


@dataclass(frozen=True)
class GraphSpec:
    n: int
    topology: TopologySpec
    p: tuple[float, ...]


@dataclass(frozen=True)
class ObjectiveSpec:
    d: int
    mu: float
    L: float
    sigma: float
    heterogeneity: float
    seed: int


@dataclass(frozen=True)
class EtaSpec:
    kind: str
    value: float | None = None


@dataclass(frozen=True)
class ProtocolSpec:
    variants: tuple[str, ...]
    T: int
    R: int
    eta: EtaSpec
    momentum: float


@dataclass(frozen=True)
class OptimizerSpec:
    max_sweeps: int
    bisect_tol: float
    stall_tol: float


@dataclass(frozen=True)
class ExperimentSpec:
    seeds: tuple[int, ...]
    out: str | None


@dataclass(frozen=True)
class RunConfig:
    graph: GraphSpec
    objective: ObjectiveSpec
    protocol: ProtocolSpec
    optimizer: OptimizerSpec
    experiment: ExperimentSpec


_SECTIONS = ("graph", "objective", "protocol", "optimizer", "experiment")

_OBJECTIVE_DEFAULTS = {"d": 20, "mu": 0.5, "L": 5.0, "sigma": 1.0, "heterogeneity": 0.0, "seed": 0}
_PROTOCOL_DEFAULTS = {
    "variants": ["colrel"],
    "T": 8,
    "R": 100,
    "eta": {"kind": ETA_CONSTANT, "value": 0.1},
    "momentum": 0.0,
}
_OPTIMIZER_DEFAULTS = {"max_sweeps": 100, "bisect_tol": 1e-10, "stall_tol": 1e-12}
_EXPERIMENT_DEFAULTS = {"seeds": {"count": 5, "start": 0}, "out": None}


def parse_config(source: str | Path | Mapping[str, Any]) -> RunConfig:
    """Parse a config from JSON text, a file path, or a mapping.

    A string containing '{' is treated as JSON text, any other string as a
    path. Raises ConfigError naming the offending key or field on any
    problem.
    """
    if isinstance(source, Mapping):
        doc: Any = json.loads(json.dumps(source))
    else:
        if isinstance(source, Path) or "{" not in str(source):
            path = Path(source)
            try:
                text = path.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        else:
            text = str(source)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    _reject_unknown(doc, _SECTIONS, "top level")
    if "graph" not in doc:
        raise ConfigError("missing required section 'graph'")

    graph = _parse_graph(_section(doc, "graph"))
    objective = _parse_objective(_section(doc, "objective"))
    protocol = _parse_protocol(_section(doc, "protocol"))
    optimizer = _parse_optimizer(_section(doc, "optimizer"))
    experiment = _parse_experiment(_section(doc, "experiment"))
    return RunConfig(
        graph=graph, objective=objective, protocol=protocol,
        optimizer=optimizer, experiment=experiment,
    )


def canonical_dict(cfg: RunConfig) -> dict[str, Any]:
    """Plain-dict form with every default materialized."""
    topo: dict[str, Any] = {"kind": cfg.graph.topology.kind}
    if cfg.graph.topology.kind == RING:
        topo["k"] = cfg.graph.topology.k
    if cfg.graph.topology.kind == EXPLICIT_EDGES:
        topo["edges"] = [list(e) for e in cfg.graph.topology.edges]
    eta: dict[str, Any] = {"kind": cfg.protocol.eta.kind}
    if cfg.protocol.eta.kind == ETA_CONSTANT:
        eta["value"] = cfg.protocol.eta.value
    return {
        "graph": {"n": cfg.graph.n, "topology": topo, "p": list(cfg.graph.p)},
        "objective": {
            "d": cfg.objective.d,
            "mu": cfg.objective.mu,
            "L": cfg.objective.L,
            "sigma": cfg.objective.sigma,
            "heterogeneity": cfg.objective.heterogeneity,
            "seed": cfg.objective.seed,
        },
        "protocol": {
            "variants": list(cfg.protocol.variants),
            "T": cfg.protocol.T,
            "R": cfg.protocol.R,
            "eta": eta,
            "momentum": cfg.protocol.momentum,
        },
        "optimizer": {
            "max_sweeps": cfg.optimizer.max_sweeps,
            "bisect_tol": cfg.optimizer.bisect_tol,
            "stall_tol": cfg.optimizer.stall_tol,
        },
        "experiment": {"seeds": list(cfg.experiment.seeds), "out": cfg.experiment.out},
    }


def canonical_text(cfg: RunConfig) -> str:
    """Byte-stable canonical JSON text of a config."""
    return json.dumps(canonical_dict(cfg), indent=2, sort_keys=True) + "\n"


def build_graph_from_config(cfg: RunConfig) -> ConnectivityGraph:
    topo = cfg.graph.topology
    if topo.kind == EXPLICIT_EDGES:
        edges: list[tuple[int, int]] = list(topo.edges)
    elif topo.kind == RING:
        edges = standard_topology(RING, cfg.graph.n, k=topo.k)
    else:
        edges = standard_topology(topo.kind, cfg.graph.n)
    return build_graph(cfg.graph.n, edges, np.asarray(cfg.graph.p))


def build_ensemble_from_config(cfg: RunConfig) -> ObjectiveEnsemble:
    o = cfg.objective
    return make_quadratic_ensemble(
        n=cfg.graph.n, d=o.d, mu=o.mu, L=o.L,
        heterogeneity=o.heterogeneity, sigma=o.sigma, seed=o.seed,
    )


def build_simulation_config(cfg: RunConfig, record_tau: bool = False) -> SimulationConfig:
    eta = cfg.protocol.eta
    schedule = (
        EtaSchedule.constant(eta.value) if eta.kind == ETA_CONSTANT else EtaSchedule.theorem()
    )
    return SimulationConfig(
        T=cfg.protocol.T, R=cfg.protocol.R, eta=schedule,
        momentum=cfg.protocol.momentum, record_tau=record_tau,
    )


def _section(doc: Mapping[str, Any], name: str) -> dict[str, Any]:
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object, got {type(raw).__name__}")
    return raw


def _reject_unknown(raw: Mapping[str, Any], allowed: tuple[str, ...], where: str) -> None:
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}; allowed: {sorted(allowed)}")


def _require_int(raw: Mapping[str, Any], key: str, where: str, minimum: int) -> int:
    if key not in raw:
        raise ConfigError(f"{where}.{key} is required")
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}.{key} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{where}.{key} must be at least {minimum}, got {value}")
    return value


def _require_number(
    raw: Mapping[str, Any], key: str, where: str,
    minimum: float | None = None, strict_min: float | None = None,
) -> float:
    if key not in raw:
        raise ConfigError(f"{where}.{key} is required")
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {value!r}")
    value = float(value)
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}.{key} must be at least {minimum}, got {value}")
    if strict_min is not None and value <= strict_min:
        raise ConfigError(f"{where}.{key} must be greater than {strict_min}, got {value}")
    return value


def _parse_graph(raw: dict[str, Any]) -> GraphSpec:
    _reject_unknown(raw, ("n", "topology", "p"), "section 'graph'")
    if "n" not in raw:
        raise ConfigError("graph.n is required")
    n = _require_int(raw, "n", "graph", minimum=1)

    topo_raw = raw.get("topology", {"kind": FULLY_CONNECTED})
    if isinstance(topo_raw, str):
        topo_raw = {"kind": topo_raw}
    if not isinstance(topo_raw, dict):
        raise ConfigError(f"graph.topology must be an object or kind name, got {topo_raw!r}")
    _reject_unknown(topo_raw, ("kind", "k", "edges"), "graph.topology")
    kind = topo_raw.get("kind")
    if kind == RING:
        k = _require_int(topo_raw, "k", "graph.topology", minimum=1) if "k" in topo_raw else 1
        if not k < n / 2:
            raise ConfigError(f"graph.topology.k for a ring must satisfy 1 <= k < n/2 (n={n}), got {k}")
        topology = TopologySpec(kind=RING, k=k)
    elif kind in (FULLY_CONNECTED, EDGELESS):
        if "k" in topo_raw or "edges" in topo_raw:
            raise ConfigError(f"graph.topology kind {kind!r} takes no extra parameters")
        topology = TopologySpec(kind=kind)
    elif kind == EXPLICIT_EDGES:
        edges_raw = topo_raw.get("edges")
        if not isinstance(edges_raw, list):
            raise ConfigError("graph.topology.edges must be a list of client pairs")
        edges = []
        for e in edges_raw:
            if not isinstance(e, list) or len(e) != 2 or not all(isinstance(v, int) for v in e):
                raise ConfigError(f"graph.topology.edges entries must be [i, j] pairs, got {e!r}")
            edges.append((e[0], e[1]))
        topology = TopologySpec(kind=EXPLICIT_EDGES, edges=tuple(edges))
    else:
        raise ConfigError(
            f"graph.topology.kind must be one of "
            f"['{FULLY_CONNECTED}', '{RING}', '{EDGELESS}', '{EXPLICIT_EDGES}'], got {kind!r}"
        )

    p_raw = raw.get("p", 1.0)
    if isinstance(p_raw, bool):
        raise ConfigError(f"graph.p must be a number or list, got {p_raw!r}")
    if isinstance(p_raw, (int, float)):
        p = (float(p_raw),) * n
    elif isinstance(p_raw, list):
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p_raw):
            raise ConfigError("graph.p entries must be numbers")
        p = tuple(float(v) for v in p_raw)
    else:
        raise ConfigError(f"graph.p must be a number or list, got {type(p_raw).__name__}")
    if len(p) != n:
        raise ConfigError(f"graph.p has length {len(p)} but graph.n = {n}")
    for idx, v in enumerate(p):
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"graph.p[{idx}] = {v} is outside [0, 1]")
    return GraphSpec(n=n, topology=topology, p=p)


def _parse_objective(raw: dict[str, Any]) -> ObjectiveSpec:
    _reject_unknown(raw, tuple(_OBJECTIVE_DEFAULTS), "section 'objective'")
    merged = {**_OBJECTIVE_DEFAULTS, **raw}
    d = _require_int(merged, "d", "objective", minimum=1)
    mu = _require_number(merged, "mu", "objective", strict_min=0.0)
    L = _require_number(merged, "L", "objective", minimum=mu)
    sigma = _require_number(merged, "sigma", "objective", minimum=0.0)
    het = _require_number(merged, "heterogeneity", "objective", minimum=0.0)
    seed = _require_int(merged, "seed", "objective", minimum=0)
    return ObjectiveSpec(d=d, mu=mu, L=L, sigma=sigma, heterogeneity=het, seed=seed)


def _parse_protocol(raw: dict[str, Any]) -> ProtocolSpec:
    _reject_unknown(raw, tuple(_PROTOCOL_DEFAULTS), "section 'protocol'")
    merged = {**_PROTOCOL_DEFAULTS, **raw}
    variants_raw = merged["variants"]
    if not isinstance(variants_raw, list) or not variants_raw:
        raise ConfigError(f"protocol.variants must be a nonempty list, got {variants_raw!r}")
    for v in variants_raw:
        if v not in VARIANT_KINDS:
            raise ConfigError(f"protocol.variants entry {v!r} is not one of {list(VARIANT_KINDS)}")
    if len(set(variants_raw)) != len(variants_raw):
        raise ConfigError(f"protocol.variants contains duplicates: {variants_raw}")

    eta_raw = merged["eta"]
    if not isinstance(eta_raw, dict):
        raise ConfigError(f"protocol.eta must be an object, got {eta_raw!r}")
    _reject_unknown(eta_raw, ("kind", "value"), "protocol.eta")
    eta_kind = eta_raw.get("kind")
    if eta_kind == ETA_CONSTANT:
        eta = EtaSpec(kind=ETA_CONSTANT, value=_require_number(eta_raw, "value", "protocol.eta", strict_min=0.0))
    elif eta_kind == ETA_THEOREM:
        if "value" in eta_raw:
            raise ConfigError("protocol.eta kind 'theorem' takes no value")
        eta = EtaSpec(kind=ETA_THEOREM)
    else:
        raise ConfigError(
            f"protocol.eta.kind must be '{ETA_CONSTANT}' or '{ETA_THEOREM}', got {eta_kind!r}"
        )

    T = _require_int(merged, "T", "protocol", minimum=1)
    R = _require_int(merged, "R", "protocol", minimum=1)
    momentum = _require_number(merged, "momentum", "protocol", minimum=0.0)
    if momentum >= 1.0:
        raise ConfigError(f"protocol.momentum must be below 1, got {momentum}")
    return ProtocolSpec(variants=tuple(variants_raw), T=T, R=R, eta=eta, momentum=momentum)


def _parse_optimizer(raw: dict[str, Any]) -> OptimizerSpec:
    _reject_unknown(raw, tuple(_OPTIMIZER_DEFAULTS), "section 'optimizer'")
    merged = {**_OPTIMIZER_DEFAULTS, **raw}
    return OptimizerSpec(
        max_sweeps=_require_int(merged, "max_sweeps", "optimizer", minimum=1),
        bisect_tol=_require_number(merged, "bisect_tol", "optimizer", strict_min=0.0),
        stall_tol=_require_number(merged, "stall_tol", "optimizer", minimum=0.0),
    )


def _parse_experiment(raw: dict[str, Any]) -> ExperimentSpec:
    _reject_unknown(raw, tuple(_EXPERIMENT_DEFAULTS), "section 'experiment'")
    merged = {**_EXPERIMENT_DEFAULTS, **raw}
    seeds_raw = merged["seeds"]
    if isinstance(seeds_raw, list):
        if not seeds_raw or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds_raw
        ):
            raise ConfigError(f"experiment.seeds must be a nonempty list of integers, got {seeds_raw!r}")
        if len(set(seeds_raw)) != len(seeds_raw):
            raise ConfigError(f"experiment.seeds contains duplicates: {seeds_raw}")
        seeds = tuple(seeds_raw)
    elif isinstance(seeds_raw, dict):
        _reject_unknown(seeds_raw, ("count", "start"), "experiment.seeds")
        count = _require_int(seeds_raw, "count", "experiment.seeds", minimum=1)
        start = (
            _require_int(seeds_raw, "start", "experiment.seeds", minimum=0)
            if "start" in seeds_raw
            else 0
        )
        seeds = tuple(range(start, start + count))
    else:
        raise ConfigError(f"experiment.seeds must be a list or {{count, start}}, got {seeds_raw!r}")

    out = merged["out"]
    if out is not None and not isinstance(out, str):
        raise ConfigError(f"experiment.out must be a string path or null, got {out!r}")
    return ExperimentSpec(seeds=seeds, out=out)

"""Client communication graphs with per-client uplink success probabilities.

Clients are indexed 0..n-1. The graph is undirected and need not be
connected; isolated clients are allowed. Each client i has an uplink to the
parameter server that succeeds independently per round with probability p[i],
while client-to-client links are treated as reliable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Edge = tuple[int, int]

RING = "ring"
EDGELESS = "edgeless"
FULLY_CONNECTED = "fully_connected"
TOPOLOGY_KINDS = (FULLY_CONNECTED, RING, EDGELESS)


class GraphValidationError(ValueError):
    """Base class for connectivity-graph validation failures."""


class EndpointRangeError(GraphValidationError):
    """An edge endpoint or client id lies outside [0, n)."""


class SelfLoopError(GraphValidationError):
    """An edge connects a client to itself."""


class ProbabilityRangeError(GraphValidationError):
    """An uplink probability lies outside [0, 1]."""


class LengthMismatchError(GraphValidationError):
    """The probability vector length does not match the client count."""


@dataclass(frozen=True)
class ConnectivityGraph:
    """Undirected client graph plus uplink success probabilities.

    Attributes:
        n: Number of clients.
        edges: Normalized undirected edges as sorted (i, j) pairs, i < j.
        p: Length-n vector of uplink success probabilities (read-only).
        neighbors: Per-client sorted neighbor tuples.
        closed_adjacency: Dense boolean matrix; entry [j, i] is True iff
            j is in the closed neighborhood of i (j == i or {i, j} is an
            edge). Symmetric, with a True diagonal.

    Instances are immutable and safe to share across concurrent runs.
    Construct via :func:`build_graph`, which validates all invariants.
    """

    n: int
    edges: frozenset[Edge]
    p: np.ndarray = field(repr=False)
    neighbors: tuple[tuple[int, ...], ...] = field(repr=False, compare=False)
    closed_adjacency: np.ndarray = field(repr=False, compare=False)

    def degree(self, i: int) -> int:
        """Number of neighbors of client i."""
        _check_client_id(self.n, i)
        return len(self.neighbors[i])


def _check_client_id(n: int, i: int) -> None:
    if not 0 <= i < n:
        raise EndpointRangeError(f"client id {i} out of range [0, {n})")


def build_graph(n: int, edges: Iterable[Sequence[int]], p: Sequence[float]) -> ConnectivityGraph:
    """Validate and build a connectivity graph.

    Args:
        n: Client count, at least 1.
        edges: Iterable of client pairs. Orientation and duplicates are
            normalized away; self-loops and out-of-range endpoints are
            rejected.
        p: Length-n uplink success probabilities, each in [0, 1].

    Raises:
        LengthMismatchError: p does not have length n.
        ProbabilityRangeError: some p entry is outside [0, 1] or not finite.
        EndpointRangeError: an edge endpoint is outside [0, n).
        SelfLoopError: an edge of the form (i, i).
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise GraphValidationError(f"client count must be a positive integer, got {n!r}")
    n = int(n)

    p_arr = np.asarray(p, dtype=float)
    if p_arr.shape != (n,):
        raise LengthMismatchError(
            f"probability vector has shape {p_arr.shape}, expected ({n},)"
        )
    if not np.all(np.isfinite(p_arr)) or np.any(p_arr < 0.0) or np.any(p_arr > 1.0):
        bad = int(np.argmax(~(np.isfinite(p_arr) & (p_arr >= 0.0) & (p_arr <= 1.0))))
        raise ProbabilityRangeError(f"p[{bad}] = {p_arr[bad]!r} is outside [0, 1]")

    normalized: set[Edge] = set()
    for e in edges:
        a, b = int(e[0]), int(e[1])
        for v in (a, b):
            if not 0 <= v < n:
                raise EndpointRangeError(f"edge ({a}, {b}) has endpoint {v} outside [0, {n})")
        if a == b:
            raise SelfLoopError(f"self-loop ({a}, {b}) is not allowed")
        normalized.add((min(a, b), max(a, b)))

    adjacency: list[set[int]] = [set() for _ in range(n)]
    closed = np.eye(n, dtype=bool)
    for a, b in normalized:
        adjacency[a].add(b)
        adjacency[b].add(a)
        closed[a, b] = True
        closed[b, a] = True

    p_arr = p_arr.copy()
    p_arr.flags.writeable = False
    closed.flags.writeable = False
    return ConnectivityGraph(
        n=n,
        edges=frozenset(normalized),
        p=p_arr,
        neighbors=tuple(tuple(sorted(s)) for s in adjacency),
        closed_adjacency=closed,
    )


def neighborhood(g: ConnectivityGraph, i: int) -> frozenset[int]:
    """Open neighborhood of client i (excludes i itself)."""
    _check_client_id(g.n, i)
    return frozenset(g.neighbors[i])


def common_neighborhood(g: ConnectivityGraph, i: int, l: int) -> frozenset[int]:
    """Intersection of the closed neighborhoods of clients i and l."""
    _check_client_id(g.n, i)
    _check_client_id(g.n, l)
    closed_i = frozenset(g.neighbors[i]) | {i}
    closed_l = frozenset(g.neighbors[l]) | {l}
    return closed_i & closed_l


def standard_topology(kind: str, n: int, k: int = 1) -> list[Edge]:
    """Generate the edge list of a named topology.

    Supported kinds:
        fully_connected: every pair of clients is an edge.
        ring: client i is adjacent to its k nearest clients on each side,
            i.e. (i +- 1) .. (i +- k) modulo n; requires 1 <= k < n / 2.
        edgeless: no edges.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise GraphValidationError(f"client count must be a positive integer, got {n!r}")
    n = int(n)
    if kind == FULLY_CONNECTED:
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    if kind == EDGELESS:
        return []
    if kind == RING:
        if not isinstance(k, (int, np.integer)) or not 1 <= k < n / 2:
            raise GraphValidationError(
                f"ring width k={k!r} invalid: need an integer with 1 <= k < n/2 (n={n})"
            )
        out: set[Edge] = set()
        for i in range(n):
            for step in range(1, int(k) + 1):
                j = (i + step) % n
                out.add((min(i, j), max(i, j)))
        return sorted(out)
    raise GraphValidationError(f"unknown topology kind {kind!r}; expected one of {TOPOLOGY_KINDS}")

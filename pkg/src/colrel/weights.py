"""Relay-weight feasibility, the aggregate-variance objective, and its optimizer.

A relay weight matrix A stores alpha_ji at position [j, i]: the weight client
j applies to client i's update inside the combination that j uploads to the
server. Column i is supported on the closed neighborhood of i, since a client
can only relay updates it receives. A column is *feasible* (unbiased) when

    sum_{j in N_i u {i}} p_j * alpha_ji = 1,

so that each client's update arrives at the server with expected total
weight one. Subject to feasibility, the optimizer minimizes the aggregate
variance proxy

    S(p, A) = sum_{i,l} sum_{j in N_il} p_j (1 - p_j) alpha_ji alpha_jl,

where N_il is the common closed neighborhood of i and l. For matrices with
valid support the double sum collapses to the row-sum form

    S(p, A) = sum_j p_j (1 - p_j) (sum_i alpha_ji)^2,

used here for evaluation. S is jointly convex in A with per-column separable
constraints, so cyclic exact minimization over columns converges to the
global optimum. Each column subproblem has a water-filling style closed form
with a single multiplier found by bisection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from colrel.topology import ConnectivityGraph, _check_client_id

DEFAULT_BISECT_TOL = 1e-10
DEFAULT_STALL_TOL = 1e-12
DEFAULT_MAX_SWEEPS = 100
_MAX_BRACKET_DOUBLINGS = 60
_MAX_BISECT_STEPS = 500


class InfeasibleColumnError(ValueError):
    """No client in a closed neighborhood has a positive uplink probability.

    The affected clients' updates can never reach the server with expected
    weight one, so no feasible relay weights exist for them.
    """

    def __init__(self, clients: tuple[int, ...]):
        self.clients = tuple(clients)
        super().__init__(
            "no feasible relay weights: closed neighborhood of client(s) "
            f"{list(self.clients)} has uplink probability 0 everywhere"
        )


class BisectionError(RuntimeError):
    """Bracket expansion for the column multiplier failed to converge."""

    def __init__(self, column: int | None, detail: str):
        self.column = column
        where = f" (column {column})" if column is not None else ""
        super().__init__(f"bisection failed{where}: {detail}")


@dataclass(frozen=True)
class RelayWeights:
    """Nonnegative n-by-n relay weight matrix, immutable after construction."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"relay weights must be a square matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("relay weights must be finite")
        if np.any(m < 0.0):
            j, i = np.unravel_index(int(np.argmin(m)), m.shape)
            raise ValueError(f"relay weights must be nonnegative, got matrix[{j}, {i}] = {m[j, i]}")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class ColumnSubproblem:
    """Data of the single-column minimization for a target column.

    Attributes:
        column: Target column i.
        members: Client ids the column may place weight on.
        p: Uplink probabilities of the members.
        beta: Per-member cross-coupling, beta_j = total weight member j
            currently assigns to every column other than i whose closed
            neighborhood contains j.
        p_max: Maximum uplink probability over the closed neighborhood of i
            (including members that may have been filtered out).
    """

    column: int
    members: np.ndarray = field(repr=False)
    p: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)
    p_max: float


@dataclass(frozen=True)
class UnbiasednessReport:
    """Per-column feasibility report.

    residuals[i] is |sum_j p_j alpha_ji - 1| over the closed neighborhood of
    i; passed[i] is True when the residual is within tolerance. Nonzero
    entries outside the support are a structural failure, reported in
    support_violations as (row, column) positions and kept distinct from
    residual failures.
    """

    residuals: np.ndarray = field(repr=False)
    passed: np.ndarray = field(repr=False)
    tol: float
    support_violations: tuple[tuple[int, int], ...]

    @property
    def structural_ok(self) -> bool:
        return not self.support_violations

    @property
    def all_ok(self) -> bool:
        return self.structural_ok and bool(np.all(self.passed))


@dataclass(frozen=True)
class OptimizationResult:
    """Optimizer output: final weights plus the per-sweep objective history.

    s_history[0] is the objective at the initial weights; s_history[k] is the
    value after the k-th full sweep. converged is True when the relative
    per-sweep decrease fell below the stall tolerance before max_sweeps.
    """

    weights: RelayWeights
    s_history: tuple[float, ...]
    sweeps: int
    converged: bool


def identity_weights(n: int) -> RelayWeights:
    """Identity matrix: every client uploads only its own update, weight 1."""
    return RelayWeights(np.eye(n))


def initial_weights(g: ConnectivityGraph) -> RelayWeights:
    """Starting point of the optimizer: equal split over closed neighborhoods.

    Sets alpha_ji = 1 / ((|N_i| + 1) p_j) for members j with p_j > 0 and 0
    otherwise. When every member of a closed neighborhood has p_j > 0 the
    column is already feasible, since each member then contributes exactly
    1 / (|N_i| + 1); columns containing zero-probability members come out
    short and are repaired by the first optimizer sweep.
    """
    closed = g.closed_adjacency
    sizes = closed.sum(axis=0)  # |N_i| + 1 per column
    with np.errstate(divide="ignore"):
        inv_p = np.where(g.p > 0.0, 1.0 / np.where(g.p > 0.0, g.p, 1.0), 0.0)
    matrix = closed * inv_p[:, None] / sizes[None, :]
    return RelayWeights(matrix)


def check_unbiasedness(
    g: ConnectivityGraph, weights: RelayWeights, tol: float = 1e-9
) -> UnbiasednessReport:
    """Report per-column unbiasedness residuals and support violations."""
    if tol < 0.0:
        raise ValueError(f"tolerance must be nonnegative, got {tol}")
    a = _matrix_for(g, weights)
    off_support = (a != 0.0) & ~g.closed_adjacency
    violations = tuple((int(j), int(i)) for j, i in zip(*np.nonzero(off_support)))
    supported = np.where(g.closed_adjacency, a, 0.0)
    residuals = np.abs(g.p @ supported - 1.0)
    residuals.flags.writeable = False
    passed = residuals <= tol
    passed.flags.writeable = False
    return UnbiasednessReport(
        residuals=residuals, passed=passed, tol=float(tol), support_violations=violations
    )


def variance_objective(g: ConnectivityGraph, weights: RelayWeights) -> float:
    """Aggregate-variance proxy S(p, A) for a matrix with valid support."""
    a = _matrix_for(g, weights)
    rows = a.sum(axis=1)
    return float(np.dot(g.p * (1.0 - g.p), rows * rows))


def build_column_subproblem(
    g: ConnectivityGraph, weights: RelayWeights, i: int
) -> ColumnSubproblem:
    """Assemble the column-i subproblem against the current matrix.

    beta_j sums, over every other column l whose closed neighborhood contains
    member j, the weight alpha_jl currently assigned there.
    """
    _check_client_id(g.n, i)
    a = _matrix_for(g, weights)
    return _column_subproblem(g, a, i)


def _column_subproblem(g: ConnectivityGraph, a: np.ndarray, i: int) -> ColumnSubproblem:
    members = np.flatnonzero(g.closed_adjacency[:, i])
    coupled = np.array(g.closed_adjacency[members, :], dtype=float)
    coupled[:, i] = 0.0
    beta = np.einsum("mj,mj->m", a[members, :], coupled)
    p = g.p[members]
    return ColumnSubproblem(
        column=int(i), members=members, p=p, beta=beta, p_max=float(p.max())
    )


def bisect_lambda(subproblem: ColumnSubproblem, tol: float = DEFAULT_BISECT_TOL) -> float:
    """Find the multiplier solving the column's weighted clamp equation.

    Returns lam >= 0 with |h(lam) - 1| <= tol, where

        h(lam) = sum_j p_j * max(0, -beta_j + lam / (2 (1 - p_j))).

    h is continuous, nondecreasing, h(0) = 0 and unbounded, so a root
    exists; the initial bracket is found by doubling. Requires every member
    probability to lie strictly inside (0, 1).
    """
    if tol <= 0.0:
        raise ValueError(f"bisection tolerance must be positive, got {tol}")
    p = np.asarray(subproblem.p, dtype=float)
    beta = np.asarray(subproblem.beta, dtype=float)
    if p.size == 0:
        raise ValueError("column subproblem has no members")
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("bisection requires all member probabilities strictly inside (0, 1)")

    half_slope = p / (2.0 * (1.0 - p))

    def h(lam: float) -> float:
        return float(np.sum(np.maximum(0.0, lam * half_slope - p * beta)))

    hi = 1.0
    for _ in range(_MAX_BRACKET_DOUBLINGS):
        if h(hi) >= 1.0:
            break
        hi *= 2.0
    else:
        raise BisectionError(
            subproblem.column,
            f"bracket expansion exceeded {_MAX_BRACKET_DOUBLINGS} doublings (h({hi}) < 1)",
        )

    lo = 0.0
    val = h(hi)
    lam = hi
    for _ in range(_MAX_BISECT_STEPS):
        if abs(val - 1.0) <= tol:
            return lam
        assert h(lo) <= 1.0 + tol and h(hi) >= 1.0 - tol
        lam = 0.5 * (lo + hi)
        val = h(lam)
        if val < 1.0:
            lo = lam
        else:
            hi = lam
    raise BisectionError(
        subproblem.column, f"residual {abs(val - 1.0):.3e} > tol {tol:.3e} after bisection"
    )


def solve_column(
    g: ConnectivityGraph,
    weights: RelayWeights,
    i: int,
    bisect_tol: float = DEFAULT_BISECT_TOL,
) -> np.ndarray:
    """Exactly minimize column i with all other columns held fixed.

    Returns a full-length nonnegative column vector supported on the closed
    neighborhood of i that satisfies the unbiasedness constraint to within
    the bisection tolerance. Members with p_j = 1 split weight 1 equally and
    everyone else gets 0; otherwise members with p_j in (0, 1) receive the
    clamped water-filling solution and p_j = 0 members receive 0.

    Raises:
        InfeasibleColumnError: every member has p_j = 0.
    """
    _check_client_id(g.n, i)
    a = _matrix_for(g, weights)
    return _solve_column(g, a, i, bisect_tol)


def _solve_column(g: ConnectivityGraph, a: np.ndarray, i: int, bisect_tol: float) -> np.ndarray:
    sub = _column_subproblem(g, a, i)
    column = np.zeros(g.n)
    if sub.p_max <= 0.0:
        raise InfeasibleColumnError((i,))
    if sub.p_max >= 1.0:
        sure = sub.members[sub.p >= 1.0]
        column[sure] = 1.0 / sure.size
        return column
    active = sub.p > 0.0
    reduced = ColumnSubproblem(
        column=sub.column,
        members=sub.members[active],
        p=sub.p[active],
        beta=sub.beta[active],
        p_max=sub.p_max,
    )
    lam = bisect_lambda(reduced, bisect_tol)
    vals = np.maximum(0.0, -reduced.beta + lam / (2.0 * (1.0 - reduced.p)))
    column[reduced.members] = vals
    return column


def optimize_weights(
    g: ConnectivityGraph,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    bisect_tol: float = DEFAULT_BISECT_TOL,
    stall_tol: float = DEFAULT_STALL_TOL,
) -> OptimizationResult:
    """Minimize S(p, A) by cyclic exact column minimization.

    Starting from :func:`initial_weights`, sweeps the columns in ascending
    order, replacing each with its exact minimizer against the current
    matrix. Stops after max_sweeps sweeps or once the relative decrease of
    the objective over a full sweep falls below stall_tol. The objective is
    nonincreasing across sweeps and the output passes
    :func:`check_unbiasedness` at a tolerance of the order of bisect_tol.

    Raises:
        InfeasibleColumnError: some client's closed neighborhood has uplink
            probability 0 everywhere (names all such clients).
    """
    if max_sweeps < 1:
        raise ValueError(f"max_sweeps must be at least 1, got {max_sweeps}")
    if stall_tol < 0.0:
        raise ValueError(f"stall_tol must be nonnegative, got {stall_tol}")

    reachable = g.closed_adjacency @ (g.p > 0.0)
    if not np.all(reachable):
        raise InfeasibleColumnError(tuple(int(i) for i in np.flatnonzero(~reachable)))

    a = np.array(initial_weights(g).matrix)
    p_var = g.p * (1.0 - g.p)

    def s_of(m: np.ndarray) -> float:
        rows = m.sum(axis=1)
        return float(np.dot(p_var, rows * rows))

    history = [s_of(a)]
    converged = False
    sweeps = 0
    for _ in range(max_sweeps):
        for i in range(g.n):
            a[:, i] = _solve_column(g, a, i, bisect_tol)
        sweeps += 1
        history.append(s_of(a))
        prev, cur = history[-2], history[-1]
        # A sweep that repairs an infeasible start may raise S; only a small
        # |change| counts as a stall.
        if abs(prev - cur) <= stall_tol * max(prev, cur, np.finfo(float).tiny):
            converged = True
            break

    return OptimizationResult(
        weights=RelayWeights(a),
        s_history=tuple(history),
        sweeps=sweeps,
        converged=converged,
    )


def _matrix_for(g: ConnectivityGraph, weights: RelayWeights) -> np.ndarray:
    if weights.n != g.n:
        raise ValueError(f"weight matrix is {weights.n}x{weights.n} but the graph has {g.n} clients")
    return weights.matrix

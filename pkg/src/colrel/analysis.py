"""Convergence-bound constants and cross-seed trace summaries.

The guarantee for the relaying scheme with the decaying step schedule
eta_r = 4 / (mu (r T + 1)) bounds the expected squared distance to the
optimum after round r (for r >= r0) by

    (r0 T + 1) / (r T + 1)^2 * ||x0 - x*||^2
      + C1 T / (r T + 1) + C2 (T - 1)^2 / (r T + 1) + C3 T / (r T + 1)^2,

with constants driven by the aggregate-variance proxy S of the relay
weights, the curvature constants and the gradient-noise level. This module
evaluates those constants and the bound, and aggregates simulation traces
across seeds (mean, standard error, confidence band, and the fitted log-log
tail slope of the mean curve).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from colrel.objectives import ObjectiveEnsemble
from colrel.protocol import RoundRecord
from colrel.topology import ConnectivityGraph
from colrel.weights import RelayWeights, variance_objective


@dataclass(frozen=True)
class BoundConstants:
    """Constants of the convergence bound, with their inputs echoed."""

    S: float
    B: float
    C1: float
    C2: float
    C3: float
    r0: float
    mu: float
    L: float
    sigma: float
    n: int
    T: int


def bound_constants_from_values(
    S: float, mu: float, L: float, sigma: float, n: int, T: int
) -> BoundConstants:
    """Evaluate the bound constants from raw scalars."""
    if not mu > 0.0:
        raise ValueError(f"strong-convexity constant must be positive, got {mu}")
    if T < 1:
        raise ValueError(f"local period T must be at least 1, got {T}")
    if S < 0.0:
        raise ValueError(f"variance proxy must be nonnegative, got {S}")
    e = math.e
    B = 2.0 * L**2 / n**2 * S
    C1 = (16.0 / mu**2) * (2.0 * sigma**2 / n**2) * S
    C2 = (16.0 / mu**2) * L**2 * (sigma**2 / n) * e
    C3 = (256.0 / mu**4) * (L**2 * sigma**2 * e + 2.0 * L**2 * sigma**2 * e * S / n**2)
    r0 = max(L / mu, 4.0 * (B / mu**2 + 1.0), 1.0 / T, 4.0 * n / (mu**2 * T))
    return BoundConstants(
        S=float(S), B=B, C1=C1, C2=C2, C3=C3, r0=r0,
        mu=float(mu), L=float(L), sigma=float(sigma), n=int(n), T=int(T),
    )


def bound_constants(
    ens: ObjectiveEnsemble, g: ConnectivityGraph, weights: RelayWeights, T: int
) -> BoundConstants:
    """Evaluate the bound constants for an ensemble and relay weights."""
    S = variance_objective(g, weights)
    return bound_constants_from_values(S, ens.mu, ens.L, ens.sigma, ens.n, T)


def bound_value(consts: BoundConstants, init_gap: float, T: int, r: float) -> float:
    """The convergence bound after round r; only asserted for r >= r0."""
    if init_gap < 0.0:
        raise ValueError(f"initial gap must be nonnegative, got {init_gap}")
    if T != consts.T:
        raise ValueError(f"period T={T} does not match the constants' T={consts.T}")
    if r < consts.r0:
        raise ValueError(f"bound not asserted below r0: r={r} < r0={consts.r0}")
    denom = r * T + 1.0
    return (
        (consts.r0 * T + 1.0) / denom**2 * init_gap
        + consts.C1 * T / denom
        + consts.C2 * (T - 1.0) ** 2 / denom
        + consts.C3 * T / denom**2
    )


@dataclass(frozen=True)
class SummaryRow:
    """Cross-seed statistics of suboptimality for one (variant, round) cell."""

    variant: str
    r: int
    mean: float
    stderr: float
    ci_lo: float
    ci_hi: float
    count: int


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares slope of log10(mean suboptimality) vs log10(round)."""

    variant: str
    slope: float
    r_lo: int
    r_hi: int
    points: int


@dataclass(frozen=True)
class SummaryTable:
    rows: tuple[SummaryRow, ...]
    slopes: tuple[SlopeFit, ...]

    def variant_rows(self, variant: str) -> list[SummaryRow]:
        return [row for row in self.rows if row.variant == variant]

    def slope_for(self, variant: str) -> SlopeFit | None:
        for fit in self.slopes:
            if fit.variant == variant:
                return fit
        return None


_REQUIRED_KEYS = ("variant", "seed", "r", "suboptimality")


def summarize(
    records: Iterable[RoundRecord | Mapping[str, object]],
    tail_fraction: float = 0.1,
) -> SummaryTable:
    """Aggregate traces across seeds, grouped by (variant, round).

    Every cell gets the mean, the standard error (sample std over sqrt of
    the seed count) and a 95% normal-approximation confidence interval. Per
    variant, the slope of log10(mean) against log10(r) is fitted over the
    tail window r >= tail_fraction * r_max (rounds >= 1 with positive mean).
    """
    if not 0.0 < tail_fraction < 1.0:
        raise ValueError(f"tail fraction must lie in (0, 1), got {tail_fraction}")

    cells: dict[tuple[str, int], list[float]] = {}
    for rec in records:
        if isinstance(rec, RoundRecord):
            variant, r, value = rec.variant, rec.r, rec.suboptimality
        else:
            missing = [key for key in _REQUIRED_KEYS if key not in rec]
            if missing:
                raise ValueError(f"trace record is missing field(s) {missing}: {dict(rec)!r}")
            variant, r, value = str(rec["variant"]), int(rec["r"]), float(rec["suboptimality"])
        cells.setdefault((variant, int(r)), []).append(float(value))
    if not cells:
        raise ValueError("no trace records to summarize")

    rows: list[SummaryRow] = []
    for (variant, r), values in sorted(cells.items()):
        arr = np.asarray(values)
        mean = float(arr.mean())
        stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        half = 1.96 * stderr
        rows.append(
            SummaryRow(
                variant=variant, r=r, mean=mean, stderr=stderr,
                ci_lo=mean - half, ci_hi=mean + half, count=arr.size,
            )
        )

    slopes: list[SlopeFit] = []
    for variant in sorted({row.variant for row in rows}):
        series = [(row.r, row.mean) for row in rows if row.variant == variant]
        r_max = max(r for r, _ in series)
        window = [(r, m) for r, m in series if r >= tail_fraction * r_max and r >= 1 and m > 0.0]
        if len(window) < 2:
            continue
        logs_r = np.log10([r for r, _ in window])
        logs_m = np.log10([m for _, m in window])
        slope = float(np.polyfit(logs_r, logs_m, 1)[0])
        slopes.append(
            SlopeFit(
                variant=variant,
                slope=slope,
                r_lo=min(r for r, _ in window),
                r_hi=r_max,
                points=len(window),
            )
        )

    return SummaryTable(rows=tuple(rows), slopes=tuple(slopes))

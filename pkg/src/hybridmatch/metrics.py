"""Loss, waiting time, congestion and policy usage from a finished run."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .market import MATCHED, WAITING, PolicyKind, TraceSummary

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    loss: float
    mean_wait: float
    congestion: float
    usage: dict[PolicyKind, float]
    switch_count: int
    d: float
    window: tuple[float, float]
    flags: set[str] = field(default_factory=set)


def compute_loss(trace: TraceSummary) -> float:
    """Perished fraction of the cohort arriving in [T0, T]."""
    A = trace.A
    if A == 0:
        log.warning("no arrivals in the measurement window; loss defined as 0")
        return 0.0
    return trace.D / A


def loss_from_counts(A: int, M: int, Z_T: int) -> float:
    return (A - M - Z_T) / A if A else 0.0


def compute_mean_wait(trace: TraceSummary, matched_only: bool = False) -> float:
    mask = trace.cohort
    if matched_only:
        mask = mask & (trace.status == MATCHED)
    if not np.any(mask):
        log.warning("empty cohort; mean wait defined as 0")
        return 0.0
    return float(np.mean(trace.waits()[mask]))


def compute_congestion(trace: TraceSummary, T0: float | None = None, T: float | None = None) -> float:
    T0 = trace.T0 if T0 is None else T0
    T = trace.T if T is None else T
    if T <= T0:
        return 0.0
    return trace.pool_integral(T0, T) / (T - T0)


def usage_from_kinds(kinds: list[PolicyKind]) -> tuple[dict[PolicyKind, float], int]:
    if not kinds:
        return {}, 0
    n = len(kinds)
    usage = {k: sum(1 for x in kinds if x is k) / n for k in PolicyKind}
    switches = sum(1 for a, b in zip(kinds, kinds[1:]) if a is not b)
    return usage, switches


def compute_usage(trace: TraceSummary, T0: float | None = None, T: float | None = None):
    """Share of windows under each policy among windows overlapping [T0, T].

    Static runs report their single policy with no switches.
    """
    if trace.static_kind is not None and not trace.policy_schedule:
        usage = {k: 0.0 for k in PolicyKind}
        usage[trace.static_kind] = 1.0
        return usage, 0
    T0 = trace.T0 if T0 is None else T0
    T = trace.T if T is None else T
    sched = trace.policy_schedule
    kinds = []
    for i, e in enumerate(sched):
        end = sched[i + 1].start if i + 1 < len(sched) else trace.T
        if end > T0 and e.start <= T:
            kinds.append(e.kind)
    return usage_from_kinds(kinds)


def compute_metrics(trace: TraceSummary) -> MetricsReport:
    flags = set()
    if trace.A == 0:
        flags.add("empty_cohort")
    usage, switches = compute_usage(trace)
    return MetricsReport(
        loss=compute_loss(trace),
        mean_wait=compute_mean_wait(trace),
        congestion=compute_congestion(trace),
        usage=usage,
        switch_count=switches,
        d=trace.d,
        window=(trace.T0, trace.T),
        flags=flags,
    )


def total_wait(trace: TraceSummary, cohort_only: bool = False) -> float:
    w = trace.waits()
    if cohort_only:
        w = w[trace.cohort]
    return float(np.sum(w))


__all__ = [
    "MetricsReport", "compute_loss", "compute_mean_wait", "compute_congestion",
    "compute_usage", "compute_metrics", "loss_from_counts", "usage_from_kinds", "total_wait",
    "WAITING",
]

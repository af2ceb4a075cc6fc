"""Greedy, Patient and the windowed Hybrid controller."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .estimation import InsufficientData, clamp_for_model, fit_lognormal
from .market import PolicyKind, Pool, ScheduleEntry, pick_uniform

__all__ = [
    "PolicyKind",
    "GreedyPolicy",
    "PatientPolicy",
    "HybridConfig",
    "HybridPolicy",
    "greedy_on_arrival",
    "patient_on_critical",
    "greedy_on_critical",
    "static_policy",
]


class GapPredictor(Protocol):
    def predict(self, mu: float, sigma: float) -> float: ...


@dataclass(frozen=True)
class GreedyPolicy:
    kind: PolicyKind = PolicyKind.GREEDY


@dataclass(frozen=True)
class PatientPolicy:
    kind: PolicyKind = PolicyKind.PATIENT


def static_policy(kind: PolicyKind | str):
    kind = PolicyKind(kind)
    return GreedyPolicy() if kind is PolicyKind.GREEDY else PatientPolicy()


def _select(candidates: list[int], rng: np.random.Generator) -> int:
    # the selection stream is only touched when there is a real choice
    if len(candidates) == 1:
        return candidates[0]
    return candidates[pick_uniform(len(candidates), rng.random())]


def greedy_on_arrival(pool: Pool, agent_id: int, rng: np.random.Generator) -> int | None:
    """Match the newcomer to a uniformly chosen compatible waiting agent.

    Returns the partner id, or None after adding the newcomer to the pool.
    """
    if agent_id in pool.active:
        raise ValueError(f"agent {agent_id} is already in the pool")
    candidates = pool.compatible_with(agent_id)
    if not candidates:
        pool.active.add(agent_id)
        return None
    partner = _select(candidates, rng)
    pool.active.discard(partner)
    return partner


def patient_on_critical(pool: Pool, agent_id: int, rng: np.random.Generator) -> int | None:
    """Last-chance match for a critical agent; None means it perishes.

    Greedy uses the same hook. Under pure Greedy no waiting agent is ever
    compatible with another, so it only matters for agents carried over
    from a Patient window.
    """
    if agent_id not in pool.active:
        raise ValueError(f"agent {agent_id} is not waiting")
    pool.active.discard(agent_id)
    candidates = pool.compatible_with(agent_id)
    if not candidates:
        return None
    partner = _select(candidates, rng)
    pool.active.discard(partner)
    return partner


greedy_on_critical = patient_on_critical


@dataclass
class HybridConfig:
    tau: float
    w: float
    gap_model: GapPredictor
    min_samples: int = 2
    initial_policy: PolicyKind = PolicyKind.PATIENT
    sample_source: str = "reported"

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError(f"window size must be positive, got {self.w}")
        if not self.tau >= 0 and not self.tau == -math.inf:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if self.min_samples < 2:
            raise ValueError("min_samples must be at least 2")
        if self.sample_source not in ("reported", "perished"):
            raise ValueError(f"unknown sample source {self.sample_source!r}")


def decide(score: float, tau: float) -> PolicyKind:
    return PolicyKind.PATIENT if score >= tau else PolicyKind.GREEDY


class HybridPolicy:
    """Switches between Greedy and Patient once per window.

    At each boundary the sojourns collected since the previous boundary are
    fitted, the gap model scores the fit, and the next window runs Patient
    when the predicted gap reaches ``tau``. Too few samples keeps the
    incumbent policy.
    """

    def __init__(self, cfg: HybridConfig):
        self.cfg = cfg
        self.active = cfg.initial_policy

    @property
    def window(self) -> float:
        return self.cfg.w

    @property
    def sample_source(self) -> str:
        return self.cfg.sample_source

    def reset(self):
        self.active = self.cfg.initial_policy

    def on_boundary(self, index: int, start: float, batch: np.ndarray) -> ScheduleEntry:
        entry = ScheduleEntry(index=index, start=start, kind=self.active, n_samples=len(batch))
        if len(batch) < self.cfg.min_samples:
            return entry
        try:
            est = fit_lognormal(batch)
        except InsufficientData:
            return entry
        score = float(self.cfg.gap_model.predict(*_as_tuple(clamp_for_model(est))))
        if math.isnan(score):
            raise ValueError(f"gap model returned NaN at mu={est.mu} sigma={est.sigma}")
        self.active = decide(score, self.cfg.tau)
        entry.kind = self.active
        entry.mu, entry.sigma, entry.score = est.mu, est.sigma, score
        return entry


def _as_tuple(params) -> tuple[float, float]:
    return params.mu, params.sigma

"""Point estimation of log-normal departure parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import LogNormalParams

SIGMA_FLOOR = 1e-4


class InsufficientData(ValueError):
    pass


class InvalidSample(ValueError):
    pass


@dataclass(frozen=True)
class SampleBatch:
    values: np.ndarray
    window_index: int = 0


def fit_lognormal(batch: SampleBatch | np.ndarray) -> LogNormalParams:
    """Maximum-likelihood (mu, sigma): mean and 1/n standard deviation of log values."""
    values = np.asarray(batch.values if isinstance(batch, SampleBatch) else batch, dtype=float)
    if values.size < 2:
        raise InsufficientData(f"need at least 2 samples, got {values.size}")
    if not np.all(values > 0.0):
        raise InvalidSample("sojourn samples must be strictly positive")
    logs = np.log(values)
    mu = float(np.mean(logs))
    # exact zero for a constant sample (np.std can leave rounding residue)
    if np.all(logs == logs[0]):
        return LogNormalParams(float(logs[0]), 0.0)
    sigma = float(np.sqrt(np.mean((logs - mu) ** 2)))
    return LogNormalParams(mu, sigma)


def clamp_for_model(params: LogNormalParams) -> LogNormalParams:
    return LogNormalParams(params.mu, max(params.sigma, SIGMA_FLOOR))

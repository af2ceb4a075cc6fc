import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridmatch.estimation import (
    SIGMA_FLOOR,
    InsufficientData,
    InvalidSample,
    SampleBatch,
    clamp_for_model,
    fit_lognormal,
)
from hybridmatch.market import LogNormalParams

positive = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False, allow_infinity=False)
samples = st.lists(positive, min_size=2, max_size=40)


def test_hand_computed_estimate():
    est = fit_lognormal(np.array([1.0, math.e ** 2]))
    assert est.mu == pytest.approx(1.0)
    assert est.sigma == pytest.approx(1.0)  # 1/n variance, not 1/(n-1)


def test_constant_sample_has_zero_sigma():
    est = fit_lognormal([3.0, 3.0, 3.0])
    assert est.sigma == 0.0
    assert est.mu == pytest.approx(math.log(3.0))
    assert clamp_for_model(est).sigma == SIGMA_FLOOR


def test_rejects_short_and_non_positive_samples():
    with pytest.raises(InsufficientData):
        fit_lognormal([1.0])
    with pytest.raises(InsufficientData):
        fit_lognormal(SampleBatch(np.array([])))
    with pytest.raises(InvalidSample):
        fit_lognormal([1.0, 0.0])
    with pytest.raises(InvalidSample):
        fit_lognormal([1.0, -2.0])


def test_large_sample_recovery():
    rng = np.random.default_rng(0)
    for mu, sigma in [(-0.8, 0.3), (0.0, 1.0), (1.5, 2.0)]:
        est = fit_lognormal(np.exp(mu + sigma * rng.standard_normal(100_000)))
        assert abs(est.mu - mu) <= 0.01 + 3 * sigma / math.sqrt(1e5)
        assert abs(est.sigma - sigma) <= 0.01


def test_clamp_keeps_larger_sigma():
    assert clamp_for_model(LogNormalParams(0.1, 0.5)) == LogNormalParams(0.1, 0.5)


@settings(max_examples=200, deadline=None)
@given(samples, st.floats(min_value=0.01, max_value=100.0))
def test_scale_shifts_mu_only(xs, c):
    a = fit_lognormal(xs)
    b = fit_lognormal(np.array(xs) * c)
    assert b.mu == pytest.approx(a.mu + math.log(c), abs=1e-9)
    assert b.sigma == pytest.approx(a.sigma, abs=1e-7)


@settings(max_examples=200, deadline=None)
@given(samples, st.randoms(use_true_random=False))
def test_permutation_invariant(xs, rnd):
    ys = list(xs)
    rnd.shuffle(ys)
    a, b = fit_lognormal(xs), fit_lognormal(ys)
    assert b.mu == pytest.approx(a.mu, abs=1e-12)
    assert b.sigma == pytest.approx(a.sigma, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(samples)
def test_sigma_zero_iff_constant(xs):
    est = fit_lognormal(xs)
    assert est.sigma >= 0.0
    assert (est.sigma == 0.0) == (len(set(np.log(xs))) == 1)

import math

import numpy as np
import pytest

from hybridmatch.market import (
    MATCHED,
    PERISHED,
    WAITING,
    LogNormalParams,
    MarketConfig,
    PolicyKind,
    ScheduleEntry,
    TraceSummary,
    simulate,
)
from hybridmatch.metrics import (
    compute_congestion,
    compute_loss,
    compute_mean_wait,
    compute_metrics,
    compute_usage,
    loss_from_counts,
    usage_from_kinds,
)
from hybridmatch.policies import GreedyPolicy, PatientPolicy

G, P = PolicyKind.GREEDY, PolicyKind.PATIENT


def make_trace(arrival, resolve, status, T=10.0, T0=0.0, pool_t=(0.0,), pool_n=(0,), schedule=(), static=None):
    n = len(arrival)
    return TraceSummary(
        T=T, T0=T0, lam=1.0, p=0.1,
        arrival=np.asarray(arrival, float), sojourn=np.ones(n),
        status=np.asarray(status, np.int8), resolve=np.asarray(resolve, float),
        partner=np.full(n, -1), pool_t=np.asarray(pool_t, float), pool_n=np.asarray(pool_n),
        policy_schedule=list(schedule), static_kind=static,
    )


def test_loss_from_counts_example():
    assert loss_from_counts(10, 6, 1) == pytest.approx(0.3)


def test_loss_counts_cohort_only():
    # A=10 cohort agents: 6 matched, 1 waiting, 3 perished; plus one warm-up agent
    status = [PERISHED] + [MATCHED] * 6 + [WAITING] + [PERISHED] * 3
    arrival = [0.5] + [2.0] * 10
    tr = make_trace(arrival, [1.0] + [3.0] * 10, status, T0=1.0)
    assert (tr.A, tr.M, tr.D, tr.Z_T) == (10, 6, 3, 1)
    assert compute_loss(tr) == pytest.approx(0.3)


def test_empty_cohort_loss_is_zero():
    tr = make_trace([], [], [])
    assert compute_loss(tr) == 0.0
    assert compute_mean_wait(tr) == 0.0
    assert "empty_cohort" in compute_metrics(tr).flags


def test_wait_of_single_agent():
    tr = make_trace([1.0], [3.0], [MATCHED])
    assert compute_mean_wait(tr) == 2.0


def test_wait_is_censored_at_horizon():
    tr = make_trace([1.0, 4.0], [3.0, math.nan], [MATCHED, WAITING], T=10.0)
    assert compute_mean_wait(tr) == pytest.approx((2.0 + 6.0) / 2)
    assert compute_mean_wait(tr, matched_only=True) == 2.0


def test_congestion_is_time_average_of_step_function():
    # size 0 on [0,1), 2 on [1,3), 1 on [3,10]
    tr = make_trace([], [], [], T=10.0, pool_t=[0.0, 1.0, 3.0], pool_n=[0, 2, 1])
    assert compute_congestion(tr, 0.0, 10.0) == pytest.approx((4 + 7) / 10)
    assert compute_congestion(tr, 2.0, 4.0) == pytest.approx((2 + 1) / 2)
    assert compute_congestion(tr, 5.0, 5.0) == 0.0


def test_usage_alternating():
    usage, switches = usage_from_kinds([P, G, P, G])
    assert usage[P] == 0.5 and usage[G] == 0.5
    assert switches == 3


def test_usage_restricted_to_interval():
    sched = [ScheduleEntry(i, float(i), k) for i, k in enumerate([G, G, P, P, G])]
    tr = make_trace([], [], [], T=5.0, schedule=sched)
    usage, switches = compute_usage(tr, 2.0, 5.0)
    assert usage[P] == pytest.approx(2 / 3) and switches == 1
    usage, switches = compute_usage(tr, 0.0, 5.0)
    assert usage[G] == pytest.approx(3 / 5) and switches == 2


def test_static_runs_report_single_policy():
    tr = make_trace([], [], [], static=G)
    usage, switches = compute_usage(tr)
    assert usage == {G: 1.0, P: 0.0} and switches == 0


def test_metrics_on_simulated_runs():
    cfg = MarketConfig(lam=100, p=0.08, T=40, T0=20, seed=6, departure=LogNormalParams(0.0, 1.0))
    g = compute_metrics(simulate(cfg, GreedyPolicy()))
    p = compute_metrics(simulate(cfg, PatientPolicy()))
    assert 0 <= p.loss <= g.loss <= 1
    assert g.mean_wait < p.mean_wait
    assert g.congestion < p.congestion
    assert g.window == (20.0, 40.0)
    assert g.d == pytest.approx(8.0)


def test_little_law_consistency():
    # congestion over [0, T] equals total time in market divided by T
    cfg = MarketConfig(lam=60, p=0.1, T=30, seed=2)
    tr = simulate(cfg, PatientPolicy())
    assert compute_congestion(tr, 0.0, tr.T) * tr.T == pytest.approx(tr.waits().sum(), rel=1e-10)

"""Continuous-time market state, event calendar and the simulation loop.

The calendar is fully known once arrivals and sojourns are drawn, so it is
materialised as sorted arrays and consumed in order by a compiled loop.
Critical events of agents that already left are skipped on arrival at the
head of the calendar rather than removed.
"""

from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .rng import RngStreams, pair_uniform, pair_uniform_jit

# event kinds double as the tie-break priority at equal timestamps
EV_BOUNDARY = 0
EV_ARRIVAL = 1
EV_CRITICAL = 2

WAITING = 0
MATCHED = 1
PERISHED = 2

MODE_GREEDY = 0
MODE_PATIENT = 1


class SimulationError(RuntimeError):
    pass


class PolicyKind(enum.Enum):
    GREEDY = "greedy"
    PATIENT = "patient"

    @property
    def mode(self) -> int:
        return MODE_GREEDY if self is PolicyKind.GREEDY else MODE_PATIENT


@dataclass(frozen=True)
class LogNormalParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (self.sigma >= 0.0) or not math.isfinite(self.mu):
            raise ValueError(f"invalid log-normal parameters mu={self.mu} sigma={self.sigma}")


@dataclass(frozen=True)
class MarketConfig:
    lam: float
    p: float
    T: float
    T0: float = 0.0
    seed: int = 0
    departure: LogNormalParams = LogNormalParams(0.0, 1.0)

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ValueError(f"arrival rate must be non-negative, got {self.lam}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"compatibility probability must lie in [0, 1], got {self.p}")
        if not (0.0 <= self.T0 < self.T):
            raise ValueError(f"need 0 <= T0 < T, got T0={self.T0} T={self.T}")

    @property
    def d(self) -> float:
        return self.p * self.lam

    @classmethod
    def from_density(cls, d: float, lam: float, **kw) -> MarketConfig:
        return cls(lam=lam, p=d / lam, **kw)


@dataclass(frozen=True)
class Agent:
    id: int
    arrival_time: float
    sojourn: float

    @property
    def critical_time(self) -> float:
        return self.arrival_time + self.sojourn


@dataclass
class ScheduleEntry:
    index: int
    start: float
    kind: PolicyKind
    mu: float = math.nan
    sigma: float = math.nan
    score: float = math.nan
    n_samples: int = 0


class Pool:
    """Waiting agents plus a memo of pairwise compatibility.

    The compiled loop keeps its own array-backed pool; this class is the
    in-process view used by the policy hooks and by callers that want to
    query the compatibility graph of a run directly.
    """

    def __init__(self, p: float, compat_key: int):
        self.p = p
        self.compat_key = compat_key
        self.active: set[int] = set()
        self.compat_cache: dict[tuple[int, int], bool] = {}

    def are_compatible(self, i: int, j: int) -> bool:
        if i == j:
            raise ValueError(f"self-compatibility is undefined (agent {i})")
        key = (i, j) if i < j else (j, i)
        hit = self.compat_cache.get(key)
        if hit is None:
            hit = pair_uniform(self.compat_key, key[0], key[1]) < self.p
            self.compat_cache[key] = hit
        return hit

    def compatible_with(self, agent_id: int) -> list[int]:
        """Waiting agents compatible with ``agent_id``, in id order."""
        return sorted(j for j in self.active if j != agent_id and self.are_compatible(agent_id, j))


def are_compatible(i: int, j: int, p: float, compat_key: int) -> bool:
    if i == j:
        raise ValueError(f"self-compatibility is undefined (agent {i})")
    return pair_uniform(compat_key, i, j) < p


def pick_uniform(n: int, u: float) -> int:
    return min(int(u * n), n - 1)


@dataclass
class Calendar:
    """Sorted event arrays plus the agent draws they were built from."""

    arrival: np.ndarray
    sojourn: np.ndarray
    time: np.ndarray
    kind: np.ndarray
    ref: np.ndarray
    selection_u: np.ndarray

    @property
    def n_agents(self) -> int:
        return len(self.arrival)


def sample_arrivals(lam: float, T: float, gen: np.random.Generator) -> np.ndarray:
    if lam <= 0.0:
        return np.empty(0)
    mean_n = lam * T
    chunk = int(mean_n + 6.0 * math.sqrt(mean_n) + 16)
    times = np.cumsum(gen.exponential(1.0 / lam, size=chunk))
    while times[-1] <= T:
        more = times[-1] + np.cumsum(gen.exponential(1.0 / lam, size=chunk))
        times = np.concatenate([times, more])
    return times[times <= T]


def sample_sojourns(n: int, params: LogNormalParams, gen: np.random.Generator) -> np.ndarray:
    z = gen.standard_normal(n)
    with np.errstate(over="ignore", under="ignore"):
        return np.exp(params.mu + params.sigma * z)


def n_windows(T: float, w: float) -> int:
    return max(1, math.ceil(round(T / w, 9)))


def build_event_calendar(
    cfg: MarketConfig, streams: RngStreams, window: float | None = None
) -> Calendar:
    """Draw arrivals and sojourns from their streams and order all events."""
    arrival = sample_arrivals(cfg.lam, cfg.T, streams.arrivals)
    sojourn = sample_sojourns(len(arrival), cfg.departure, streams.sojourns)
    # one draw per possible matching decision is an upper bound
    selection_u = streams.selection.random(len(arrival) + 1)
    return make_calendar(arrival, sojourn, cfg.T, window, selection_u)


def make_calendar(arrival, sojourn, T: float, window: float | None, selection_u) -> Calendar:
    """Order boundary, arrival and critical events by (time, kind, seq)."""
    arrival = np.asarray(arrival, float)
    sojourn = np.asarray(sojourn, float)
    n = len(arrival)
    if np.any(np.diff(arrival) < 0):
        raise ValueError("arrival times must be sorted")
    if np.any(sojourn <= 0.0) or not np.all(np.isfinite(sojourn)):
        raise SimulationError("sojourn underflowed or overflowed; mu/sigma out of floating range")
    critical = arrival + sojourn
    crit_ids = np.nonzero(critical <= T)[0]
    if window is not None:
        nb = n_windows(T, window)
        b_times = np.arange(nb) * window
    else:
        nb = 0
        b_times = np.empty(0)
    time = np.concatenate([b_times, arrival, critical[crit_ids]])
    kind = np.concatenate(
        [
            np.full(nb, EV_BOUNDARY, np.int8),
            np.full(n, EV_ARRIVAL, np.int8),
            np.full(len(crit_ids), EV_CRITICAL, np.int8),
        ]
    )
    ref = np.concatenate([np.arange(nb), np.arange(n), crit_ids]).astype(np.int64)
    seq = np.arange(len(time))
    order = np.lexsort((seq, kind, time))
    selection_u = np.asarray(selection_u, float)
    if len(selection_u) < n // 2 + 1:
        raise ValueError("need at least n/2 + 1 selection draws")
    return Calendar(arrival, sojourn, time[order], kind[order], ref[order], selection_u)


@njit(cache=True)
def _candidates(pool_ids, size, key, p, agent, out):
    n = 0
    for k in range(size):
        j = pool_ids[k]
        if pair_uniform_jit(key, agent, j) < p:
            out[n] = j
            n += 1
    if n > 1:
        out[:n].sort()
    return n


@njit(cache=True, inline="always")
def _pool_add(pool_ids, pool_pos, size, a):
    pool_ids[size] = a
    pool_pos[a] = size
    return size + 1


@njit(cache=True, inline="always")
def _pool_remove(pool_ids, pool_pos, size, a):
    k = pool_pos[a]
    last = pool_ids[size - 1]
    pool_ids[k] = last
    pool_pos[last] = k
    pool_pos[a] = -1
    return size - 1


@njit(cache=True)
def _advance(
    ev_time, ev_kind, ev_ref, start, mode, key, p,
    status, resolve, partner, pool_ids, pool_pos, counters,
    selection_u, trace_t, trace_n, perish_log, cand,
):
    """Consume events from ``start`` up to the next window boundary.

    counters = [pool size, selection draws used, trace length, perish log length].
    Returns the index of the stopping boundary event, or len(ev_time).
    """
    size = counters[0]
    used = counters[1]
    tl = counters[2]
    pl = counters[3]
    i = start
    n_ev = len(ev_time)
    while i < n_ev:
        kind = ev_kind[i]
        if kind == 0:
            break
        t = ev_time[i]
        a = ev_ref[i]
        if kind == 1:
            if mode == 0:
                nc = _candidates(pool_ids, size, key, p, a, cand)
                if nc > 0:
                    if nc == 1:
                        b = cand[0]
                    else:
                        b = cand[min(int(selection_u[used] * nc), nc - 1)]
                        used += 1
                    size = _pool_remove(pool_ids, pool_pos, size, b)
                    status[a] = 1
                    status[b] = 1
                    resolve[a] = t
                    resolve[b] = t
                    partner[a] = b
                    partner[b] = a
                else:
                    size = _pool_add(pool_ids, pool_pos, size, a)
            else:
                size = _pool_add(pool_ids, pool_pos, size, a)
        else:
            if status[a] != 0:
                i += 1
                continue
            size = _pool_remove(pool_ids, pool_pos, size, a)
            # last-chance match under either policy; under pure Greedy the
            # pool is an independent set so this never finds a partner
            nc = _candidates(pool_ids, size, key, p, a, cand)
            if nc > 0:
                if nc == 1:
                    b = cand[0]
                else:
                    b = cand[min(int(selection_u[used] * nc), nc - 1)]
                    used += 1
                size = _pool_remove(pool_ids, pool_pos, size, b)
                status[a] = 1
                status[b] = 1
                resolve[a] = t
                resolve[b] = t
                partner[a] = b
                partner[b] = a
            else:
                status[a] = 2
                resolve[a] = t
                perish_log[pl] = a
                pl += 1
        # record only size changes; same-time entries collapse to the last one
        if tl > 0 and trace_t[tl - 1] == t:
            trace_n[tl - 1] = size
        elif trace_n[tl - 1] != size:
            trace_t[tl] = t
            trace_n[tl] = size
            tl += 1
        i += 1
    counters[0] = size
    counters[1] = used
    counters[2] = tl
    counters[3] = pl
    return i


@dataclass
class TraceSummary:
    """Everything a run produced; metrics are pure functions of this."""

    T: float
    T0: float
    lam: float
    p: float
    arrival: np.ndarray
    sojourn: np.ndarray
    status: np.ndarray
    resolve: np.ndarray
    partner: np.ndarray
    pool_t: np.ndarray
    pool_n: np.ndarray
    policy_schedule: list[ScheduleEntry] = field(default_factory=list)
    static_kind: PolicyKind | None = None

    @property
    def d(self) -> float:
        return self.p * self.lam

    # full-horizon counters
    @property
    def A_full(self) -> int:
        return len(self.arrival)

    @property
    def M_full(self) -> int:
        return int(np.count_nonzero(self.status == MATCHED))

    @property
    def D_full(self) -> int:
        return int(np.count_nonzero(self.status == PERISHED))

    @property
    def Z_T_full(self) -> int:
        return int(np.count_nonzero(self.status == WAITING))

    # measurement cohort: agents arriving in [T0, T]
    @property
    def cohort(self) -> np.ndarray:
        return self.arrival >= self.T0

    @property
    def A(self) -> int:
        return int(np.count_nonzero(self.cohort))

    @property
    def M(self) -> int:
        return int(np.count_nonzero(self.cohort & (self.status == MATCHED)))

    @property
    def D(self) -> int:
        return int(np.count_nonzero(self.cohort & (self.status == PERISHED)))

    @property
    def Z_T(self) -> int:
        return int(np.count_nonzero(self.cohort & (self.status == WAITING)))

    def waits(self) -> np.ndarray:
        """Time in market per agent, right-censored at T."""
        end = np.where(self.status == WAITING, self.T, self.resolve)
        return end - self.arrival

    def pool_integral(self, lo: float = 0.0, hi: float | None = None) -> float:
        """Exact integral of the pool-size step function over [lo, hi]."""
        hi = self.T if hi is None else hi
        t = np.append(self.pool_t, self.T)
        left = np.clip(t[:-1], lo, hi)
        right = np.clip(t[1:], lo, hi)
        return float(np.sum(self.pool_n * (right - left)))

    def per_agent(self) -> list[tuple[float, float, str]]:
        names = {WAITING: "waiting", MATCHED: "matched", PERISHED: "perished"}
        return [
            (float(a), float(r), names[int(s)])
            for a, r, s in zip(self.arrival, self.resolve, self.status)
        ]

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "T0": self.T0,
            "lambda": self.lam,
            "p": self.p,
            "counters": {
                "A": self.A, "M": self.M, "D": self.D, "Z_T": self.Z_T,
                "A_full": self.A_full, "M_full": self.M_full,
                "D_full": self.D_full, "Z_T_full": self.Z_T_full,
            },
            "static_kind": self.static_kind.value if self.static_kind else None,
            "pool_sizes": [[float(t), int(n)] for t, n in zip(self.pool_t, self.pool_n)],
            "per_agent": [
                [float(a), None if math.isnan(r) else float(r), int(s), int(q)]
                for a, r, s, q in zip(self.arrival, self.resolve, self.status, self.partner)
            ],
            "policy_schedule": [
                {
                    "index": e.index, "start": e.start, "kind": e.kind.value,
                    "mu": None if math.isnan(e.mu) else e.mu,
                    "sigma": None if math.isnan(e.sigma) else e.sigma,
                    "score": None if math.isnan(e.score) else e.score,
                    "n_samples": e.n_samples,
                }
                for e in self.policy_schedule
            ],
        }

    def to_text(self) -> str:
        buf = io.StringIO()
        json.dump(self.to_dict(), buf, sort_keys=True, separators=(",", ":"))
        return buf.getvalue()

    def outcome_key(self) -> tuple:
        """Counters, per-agent outcomes and pool path; ignores the schedule."""
        d = self.to_dict()
        return (json.dumps(d["counters"]), json.dumps(d["per_agent"]), json.dumps(d["pool_sizes"]))


class _RunState:
    def __init__(self, n: int):
        self.status = np.zeros(n, np.int8)
        self.resolve = np.full(n, np.nan)
        self.partner = np.full(n, -1, np.int64)
        self.pool_ids = np.zeros(max(n, 1), np.int64)
        self.pool_pos = np.full(max(n, 1), -1, np.int64)
        self.counters = np.zeros(4, np.int64)
        self.trace_t = np.zeros(2 * n + 2)
        self.trace_n = np.zeros(2 * n + 2, np.int64)
        self.counters[2] = 1  # (0, 0) seeds the step function
        self.perish_log = np.zeros(max(n, 1), np.int64)
        self.cand = np.zeros(max(n, 1), np.int64)


def simulate(cfg: MarketConfig, policy, streams: RngStreams | None = None) -> TraceSummary:
    """Run ``policy`` over [0, T] on the market described by ``cfg``.

    ``policy`` is a static policy (has ``kind``) or a windowed controller
    (has ``window``, ``sample_source``, ``reset`` and ``on_boundary``).
    """
    if streams is None:
        streams = RngStreams.from_seed(cfg.seed)
    cal = build_event_calendar(cfg, streams, getattr(policy, "window", None))
    return run_calendar(cal, cfg, streams.compat_key, policy)


def run_calendar(cal: Calendar, cfg: MarketConfig, compat_key: int, policy) -> TraceSummary:
    st = _RunState(cal.n_agents)
    args = (st.status, st.resolve, st.partner, st.pool_ids, st.pool_pos, st.counters,
            cal.selection_u, st.trace_t, st.trace_n, st.perish_log, st.cand)
    key = np.uint64(compat_key)
    window = getattr(policy, "window", None)
    schedule: list[ScheduleEntry] = []
    if window is None:
        end = _advance(cal.time, cal.kind, cal.ref, 0, policy.kind.mode, key, cfg.p, *args)
        if end != len(cal.time):
            raise SimulationError("static run stopped at a window boundary")
        static_kind = policy.kind
    else:
        static_kind = None
        policy.reset()
        i = 0
        n_ev = len(cal.time)
        last_arrival_idx = 0
        last_perish = 0
        while i < n_ev:
            if cal.kind[i] != EV_BOUNDARY:
                raise SimulationError(f"expected a window boundary at event {i}")
            t = float(cal.time[i])
            hi = int(np.searchsorted(cal.arrival, t, side="left"))
            pl = int(st.counters[3])
            if policy.sample_source == "perished":
                batch = cal.sojourn[st.perish_log[last_perish:pl]]
            else:
                batch = cal.sojourn[last_arrival_idx:hi]
            entry = policy.on_boundary(int(cal.ref[i]), t, batch)
            if not isinstance(entry, ScheduleEntry) or not isinstance(entry.kind, PolicyKind):
                raise SimulationError(f"policy returned {entry!r} at boundary t={t}")
            schedule.append(entry)
            last_arrival_idx = hi
            last_perish = pl
            i = _advance(cal.time, cal.kind, cal.ref, i + 1, entry.kind.mode, key, cfg.p, *args)
    tl = int(st.counters[2])
    return TraceSummary(
        T=cfg.T, T0=cfg.T0, lam=cfg.lam, p=cfg.p,
        arrival=cal.arrival, sojourn=cal.sojourn,
        status=st.status, resolve=st.resolve, partner=st.partner,
        pool_t=st.trace_t[:tl].copy(), pool_n=st.trace_n[:tl].copy(),
        policy_schedule=schedule, static_kind=static_kind,
    )

"""Discrete-event simulation of the tiered serving system under Poisson load.

Each tier is an FCFS M/M/c station. A rate-limited tier is a token bucket
that admits requests in FIFO order into unlimited parallel service. A query's
route through the tiers is decided up front by the cascade oracle (the
escalation decision is instant), but it only reaches tier k + 1 once its
service at tier k completes, so queueing delay composes along the cascade.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import ThresholdTable
from .cascade import ROUTER_OVERHEAD_MS, Policy, run_policy
from .portfolio import CapabilityPatch, TierSpec
from .router import RouterModel
from .workload import TaskSpec, Workload

SERVICE_DISTS = ("exponential", "lognormal")


def erlang_c_wait(c: int, lam: float, mu: float) -> tuple[float, float]:
    """(P(wait > 0), mean wait in queue) for M/M/c, time in units of 1 / mu."""
    if c < 1:
        raise ValueError("need at least one server")
    if lam <= 0 or mu <= 0:
        raise ValueError("arrival and service rates must be > 0")
    if lam >= c * mu:
        raise ValueError(f"unstable queue: lambda={lam} >= c*mu={c * mu}")
    a = lam / mu
    b = 1.0  # Erlang B by recursion, stable for large c
    for k in range(1, c + 1):
        b = a * b / (k + a * b)
    p_wait = c * b / (c - a * (1 - b))
    return p_wait, p_wait / (c * mu - lam)


@dataclass(frozen=True)
class LoadProfile:
    arrival_rate: float  # queries per minute
    duration_s: float = 300.0
    warmup_s: float = 30.0

    def __post_init__(self):
        if self.arrival_rate <= 0:
            raise ValueError("arrival_rate must be > 0")
        if not 0 <= self.warmup_s < self.duration_s:
            raise ValueError("need 0 <= warmup_s < duration_s")

    @property
    def rate_per_s(self) -> float:
        return self.arrival_rate / 60.0


@dataclass(frozen=True)
class Station:
    """Queueing parameters of one tier. `workers=None` means unlimited servers."""

    service_rate: float  # per second per server
    workers: int | None = 1
    rate_limit: float | None = None  # token refill per second
    burst: float = 1.0

    def __post_init__(self):
        if self.service_rate <= 0:
            raise ValueError("service rate must be > 0")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.rate_limit is not None and (self.rate_limit <= 0 or self.burst < 1):
            raise ValueError("token bucket needs rate > 0 and burst >= 1")

    @classmethod
    def from_tier(cls, tier: TierSpec) -> "Station":
        if tier.rate_limit_per_sec is not None:
            burst = tier.burst if tier.burst is not None else tier.rate_limit_per_sec
            return cls(tier.service_rate, None, tier.rate_limit_per_sec, burst)
        return cls(tier.service_rate, tier.workers)

    def capacity(self) -> float:
        """Sustainable throughput (per second)."""
        if self.rate_limit is not None:
            return self.rate_limit
        return math.inf if self.workers is None else self.workers * self.service_rate


@dataclass
class EventLog:
    """Per-visit timestamps; visits of one job are contiguous and in tier order."""

    job: np.ndarray
    station: np.ndarray
    enter: np.ndarray
    start: np.ndarray
    end: np.ndarray

    def trace_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.job, self.station, self.enter, self.start, self.end):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def simulate_events(arrivals: np.ndarray, paths: Sequence[Sequence[int]],
                    stations: Sequence[Station], service: np.ndarray) -> EventLog:
    """Run the event calendar.

    `arrivals` are sorted job arrival times; job j visits `paths[j]` in order;
    `service` holds one pre-drawn service time per visit (flattened in job order).
    """
    lengths = np.array([len(p) for p in paths], dtype=np.int64)
    if len(lengths) and lengths.min() < 1:
        raise ValueError("every job needs at least one station")
    n_vis = int(lengths.sum())
    if len(service) != n_vis:
        raise ValueError("need one service time per visit")
    first = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    job = np.repeat(np.arange(len(paths)), lengths)
    station = np.fromiter((s for p in paths for s in p), dtype=np.int64, count=n_vis)
    enter = np.full(n_vis, np.nan)
    start = np.full(n_vis, np.nan)
    end = np.full(n_vis, np.nan)
    last_of_job = np.zeros(n_vis, dtype=bool)
    last_of_job[first + lengths - 1] = True

    svc = service.tolist()
    st_of = station.tolist()
    last = last_of_job.tolist()
    queues = [deque() for _ in stations]
    busy = [0] * len(stations)
    cap = [s.workers if s.workers is not None else math.inf for s in stations]
    tokens = [s.burst if s.rate_limit is not None else 0.0 for s in stations]
    tok_time = [0.0] * len(stations)
    tok_pending = [False] * len(stations)
    cal: list = []
    seq = 0
    DEPART, TOKEN = 0, 1

    def refill(s: int, t: float) -> None:
        sp = stations[s]
        tokens[s] = min(sp.burst, tokens[s] + sp.rate_limit * (t - tok_time[s]))
        tok_time[s] = t

    def begin(v: int, t: float) -> None:
        nonlocal seq
        start[v] = t
        heapq.heappush(cal, (t + svc[v], seq, DEPART, v))
        seq += 1

    def schedule_token(s: int, t: float) -> None:
        nonlocal seq
        wait = max(0.0, (1.0 - tokens[s]) / stations[s].rate_limit)
        heapq.heappush(cal, (t + wait, seq, TOKEN, s))
        seq += 1
        tok_pending[s] = True

    def arrive(v: int, t: float) -> None:
        s = st_of[v]
        enter[v] = t
        if stations[s].rate_limit is not None:
            refill(s, t)
            if not queues[s] and tokens[s] >= 1.0 - 1e-12:
                tokens[s] = max(0.0, tokens[s] - 1.0)
                begin(v, t)
            else:
                queues[s].append(v)
                if not tok_pending[s]:
                    schedule_token(s, t)
        elif busy[s] < cap[s]:
            busy[s] += 1
            begin(v, t)
        else:
            queues[s].append(v)

    arr = arrivals.tolist()
    firsts = first.tolist()
    i, n_jobs = 0, len(arr)
    while i < n_jobs or cal:
        if i < n_jobs and (not cal or arr[i] < cal[0][0]):
            arrive(firsts[i], arr[i])
            i += 1
            continue
        t, _, kind, x = heapq.heappop(cal)
        if kind == TOKEN:
            s = x
            tok_pending[s] = False
            refill(s, t)
            if queues[s]:
                tokens[s] = max(0.0, tokens[s] - 1.0)
                begin(queues[s].popleft(), t)
            if queues[s]:
                schedule_token(s, t)
            continue
        v = x
        end[v] = t
        s = st_of[v]
        if stations[s].rate_limit is None:
            if queues[s]:
                begin(queues[s].popleft(), t)
            else:
                busy[s] -= 1
        if not last[v]:
            arrive(v + 1, t)
    return EventLog(job, station, enter, start, end)


def draw_service(rng: np.random.Generator, rates: np.ndarray, dist: str = "exponential",
                 sigma: float = 1.0) -> np.ndarray:
    """Service times with mean 1 / rate per visit."""
    if dist == "exponential":
        return rng.exponential(size=len(rates)) / rates
    if dist == "lognormal":
        # same mean as the exponential: exp(m + sigma^2 / 2) = 1 / rate
        m = -np.log(rates) - sigma * sigma / 2
        return np.exp(m + sigma * rng.standard_normal(len(rates)))
    raise ValueError(f"unknown service distribution {dist!r}")


# -- single-tier oracle runs ------------------------------------------------------

@dataclass(frozen=True)
class SingleTierStats:
    mean_wait: float
    mean_sojourn: float
    mean_in_system: float  # time average over the measurement window
    arrival_rate: float  # measured entries per unit time in the window
    utilization: float
    completions: int
    trace_hash: str


def _window_overlap(a: np.ndarray, b: np.ndarray, lo: float, hi: float) -> float:
    return float(np.clip(np.minimum(b, hi) - np.maximum(a, lo), 0.0, None).sum())


def simulate_mmc(c: int, lam: float, mu: float, n_jobs: int, seed: int,
                 warmup_fraction: float = 0.05) -> SingleTierStats:
    """Plain M/M/c run with `n_jobs` arrivals; the first `warmup_fraction` of the
    horizon is excluded from every statistic."""
    rng = np.random.default_rng([seed, 0x3E3C])
    arrivals = np.cumsum(rng.exponential(1.0 / lam, size=n_jobs))
    service = rng.exponential(1.0 / mu, size=n_jobs)
    log = simulate_events(arrivals, [(0,)] * n_jobs, [Station(mu, c)], service)
    lo, hi = warmup_fraction * arrivals[-1], arrivals[-1]
    inside = (log.enter >= lo) & (log.enter < hi)
    width = hi - lo
    return SingleTierStats(
        mean_wait=float(np.mean(log.start[inside] - log.enter[inside])),
        mean_sojourn=float(np.mean(log.end[inside] - log.enter[inside])),
        mean_in_system=_window_overlap(log.enter, log.end, lo, hi) / width,
        arrival_rate=float(inside.sum()) / width,
        utilization=_window_overlap(log.start, log.end, lo, hi) / (c * width),
        completions=int(np.isfinite(log.end).sum()),
        trace_hash=log.trace_hash(),
    )


# -- whole-system runs ---------------------------------------------------------------

@dataclass(frozen=True)
class TierQueueStats:
    tier_id: int
    visits: int
    offered_rate: float  # per second, from the routing mix
    mean_wait_ms: float
    p50_ms: float  # sojourn at this tier
    p99_ms: float
    utilization: float
    unstable: bool


@dataclass(frozen=True)
class QueueStats:
    policy: str
    arrival_rate_per_min: float
    completions: int
    mean_wait_ms: float  # total queueing delay per query
    mean_latency_ms: float
    p50_ms: float
    p99_ms: float
    sla_violation_rate: float
    unstable: bool
    tiers: tuple[TierQueueStats, ...]
    trace_hash: str


def _pct(x: np.ndarray, q: float) -> float:
    return float(np.percentile(x, q)) if len(x) else 0.0


def simulate_load(policy: Policy | str, queries: Workload, portfolio: Sequence[TierSpec],
                  tasks: Sequence[TaskSpec], profile: LoadProfile, *, seed: int,
                  router: RouterModel | None = None, thresholds: ThresholdTable | None = None,
                  patches: Sequence[CapabilityPatch] = (), service_dist: str = "exponential",
                  service_sigma: float = 1.0) -> QueueStats:
    """Poisson arrivals drawn from `queries`; each follows its precomputed cascade path."""
    policy = Policy(policy)
    stations = [Station.from_tier(t) for t in portfolio]
    run = run_policy(policy, queries, portfolio, tasks, seed=seed, router=router,
                     thresholds=thresholds, patches=patches)
    overhead = ROUTER_OVERHEAD_MS / 1000 if policy in (Policy.ROUTED, Policy.NO_CASCADE) \
        else 0.0

    rng = np.random.default_rng([seed, 0x10AD])
    lam = profile.rate_per_s
    n_jobs = int(rng.poisson(lam * profile.duration_s))
    arrivals = np.sort(rng.uniform(0.0, profile.duration_s, size=n_jobs))
    rows = rng.integers(0, len(queries), size=n_jobs)
    entry, final = run.entry_tier[rows], run.final_tier[rows]
    paths = [tuple(range(e - 1, f)) for e, f in zip(entry.tolist(), final.tolist())]
    rates = np.array([s.service_rate for s in stations])
    visit_station = np.fromiter((s for p in paths for s in p), dtype=np.int64)
    service = draw_service(rng, rates[visit_station], service_dist, service_sigma)
    log = simulate_events(arrivals + overhead, paths, stations, service)

    # offered load per tier from the routing mix (fraction of queries visiting k)
    visits_per_query = np.zeros(len(portfolio))
    for k in range(len(portfolio)):
        visits_per_query[k] = np.mean((run.entry_tier <= k + 1) & (run.final_tier >= k + 1))
    offered = lam * visits_per_query
    tier_unstable = [bool(o >= s.capacity()) for o, s in zip(offered, stations)]

    lo, hi = profile.warmup_s, profile.duration_s
    measured = (arrivals >= lo) & (arrivals < hi)
    lengths = np.array([len(p) for p in paths], dtype=np.int64)
    last = np.cumsum(lengths) - 1
    latency_ms = (log.end[last] - arrivals) * 1000.0
    waits = (log.start - log.enter) * 1000.0
    wait_per_job = np.add.reduceat(waits, np.cumsum(lengths) - lengths) if n_jobs else waits
    sla = np.array([t.sla_latency_ms for t in tasks])[queries.task_id[rows]]
    lat_m = latency_ms[measured]

    tiers = []
    vis_measured = measured[log.job]
    for k, st in enumerate(stations):
        at = (log.station == k) & vis_measured
        sojourn = (log.end[at] - log.enter[at]) * 1000.0
        if st.rate_limit is not None:
            util = min(1.0, offered[k] / st.rate_limit)
        else:
            busy = _window_overlap(log.start[log.station == k], log.end[log.station == k],
                                   lo, hi)
            util = min(1.0, busy / (st.workers * (hi - lo)))
        tiers.append(TierQueueStats(
            k + 1, int(at.sum()), float(offered[k]),
            float(np.mean(waits[at])) if at.any() else 0.0,
            _pct(sojourn, 50), _pct(sojourn, 99), float(util), tier_unstable[k]))
    return QueueStats(
        policy=policy.value,
        arrival_rate_per_min=float(profile.arrival_rate),
        completions=int(measured.sum()),
        mean_wait_ms=float(np.mean(wait_per_job[measured])) if measured.any() else 0.0,
        mean_latency_ms=float(np.mean(lat_m)) if len(lat_m) else 0.0,
        p50_ms=_pct(lat_m, 50),
        p99_ms=_pct(lat_m, 99),
        sla_violation_rate=float(np.mean(lat_m > sla[measured])) if len(lat_m) else 0.0,
        unstable=any(tier_unstable),
        tiers=tuple(tiers),
        trace_hash=log.trace_hash(),
    )


SWEEP_HEADER = ["arrival_rate_per_min", "policy", "p50_ms", "p99_ms", "sla_violation_rate",
                "unstable_flag"]


def write_latency_csv(stats: Sequence[QueueStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for s in stats:
            w.writerow([f"{s.arrival_rate_per_min:g}", s.policy, f"{s.p50_ms:.6f}",
                        f"{s.p99_ms:.6f}", f"{s.sla_violation_rate:.6f}", int(s.unstable)])

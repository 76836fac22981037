"""Route-then-escalate execution, cumulative cost accounting and policy metrics."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import keyed_rng
from .calibration import ThresholdTable, walk_pipeline
from .portfolio import CapabilityPatch, QualityOutcome, TierSpec, evaluate_many
from .router import RouterModel, predict_tier, predict_tiers
from .workload import Query, TaskSpec, Workload

ROUTER_OVERHEAD_MS = 4.2


class Policy(str, enum.Enum):
    ROUTED = "routed"  # learned router + calibrated cascade
    NO_CASCADE = "no_cascade"  # learned router, responses always accepted
    ALWAYS_T4 = "always_t4"  # always the top tier
    ALWAYS_T2 = "always_t2"
    RANDOM = "random"
    RULE_BASED = "rule_based"  # structured -> T1, generation -> T3


@dataclass(frozen=True)
class Attempt:
    tier: int
    outcome: QualityOutcome
    escalated: bool


@dataclass(frozen=True)
class CascadeTrace:
    query_id: int
    task_id: int
    entry_tier: int
    attempts: tuple[Attempt, ...]
    final_tier: int
    cumulative_cost: float
    final_quality: float
    final_pass: bool
    latency_ms: float

    def __post_init__(self):
        tiers = [a.tier for a in self.attempts]
        if not tiers or tiers[0] != self.entry_tier:
            raise ValueError("first attempt must be at the entry tier")
        if any(b - a != 1 for a, b in zip(tiers, tiers[1:])):
            raise ValueError("escalation must move up exactly one tier")
        if self.attempts[-1].escalated or not all(a.escalated for a in self.attempts[:-1]):
            raise ValueError("only the last attempt may be non-escalated")


def execute_cascade(query: Query, router: RouterModel | None, portfolio: Sequence[TierSpec],
                    thresholds: ThresholdTable, seed: int, taus: np.ndarray,
                    patches: Sequence[CapabilityPatch] = (), entry_tier: int | None = None,
                    router_overhead_ms: float = ROUTER_OVERHEAD_MS) -> CascadeTrace:
    """Single-query cascade: start at the router's tier, escalate while u > delta."""
    k = predict_tier(router, query) if entry_tier is None else entry_tier
    entry, attempts = k, []
    K = len(portfolio)
    while True:
        out = evaluate_many(portfolio[k - 1], query, patches, seed, taus)[0]
        esc = k < K and out.uncertainty > thresholds.delta.get((k, query.task_id), 0.0)
        attempts.append(Attempt(k, out, esc))
        if not esc:
            break
        k += 1
    last = attempts[-1].outcome
    latency = math.fsum(a.outcome.latency_ms for a in attempts) + router_overhead_ms
    return CascadeTrace(query.query_id, query.task_id, entry, tuple(attempts), k,
                        math.fsum(a.outcome.cost for a in attempts), last.quality,
                        last.passes, latency)


@dataclass
class CascadeRun:
    """Batch cascade results. Per-query arrays are aligned with the workload;
    the attempt table has one row per (query, tier) evaluation."""

    query_id: np.ndarray
    task_id: np.ndarray
    entry_tier: np.ndarray
    final_tier: np.ndarray
    n_attempts: np.ndarray
    cumulative_cost: np.ndarray
    final_quality: np.ndarray
    final_pass: np.ndarray
    latency_ms: np.ndarray
    # attempt table
    att_query: np.ndarray  # index into the workload
    att_tier: np.ndarray
    att_quality: np.ndarray
    att_pass: np.ndarray
    att_uncertainty: np.ndarray
    att_cost: np.ndarray
    att_latency_ms: np.ndarray
    att_escalated: np.ndarray
    att_tokens: np.ndarray

    def __len__(self) -> int:
        return len(self.query_id)

    def trace(self, i: int) -> CascadeTrace:
        rows = np.flatnonzero(self.att_query == i)
        rows = rows[np.argsort(self.att_tier[rows])]
        attempts = tuple(
            Attempt(int(self.att_tier[r]),
                    QualityOutcome(float(self.att_quality[r]), bool(self.att_pass[r]),
                                   float(self.att_uncertainty[r]), int(self.att_tokens[r]),
                                   float(self.att_cost[r]), float(self.att_latency_ms[r])),
                    bool(self.att_escalated[r]))
            for r in rows)
        return CascadeTrace(int(self.query_id[i]), int(self.task_id[i]), int(self.entry_tier[i]),
                            attempts, int(self.final_tier[i]), float(self.cumulative_cost[i]),
                            float(self.final_quality[i]), bool(self.final_pass[i]),
                            float(self.latency_ms[i]))

    def traces(self) -> list[CascadeTrace]:
        return [self.trace(i) for i in range(len(self))]

    def total_cost(self) -> float:
        """Metered cost: exact-rounded sum over every attempt."""
        return math.fsum(self.att_cost.tolist())


def run_cascade(queries: Workload, entry: np.ndarray, portfolio: Sequence[TierSpec],
                thresholds: ThresholdTable | None, seed: int, taus: np.ndarray,
                patches: Sequence[CapabilityPatch] = (), overhead_ms: float = 0.0
                ) -> CascadeRun:
    """Vectorized cascade over a workload. `thresholds=None` accepts every response."""
    n = len(queries)

    def lookup(k, idx, out):
        if thresholds is None:
            return np.full(len(idx), np.inf)
        return thresholds.lookup(k, queries.task_id[idx])

    cols = {k: [] for k in ("q", "tier", "quality", "pass", "u", "cost", "lat", "esc", "tok")}
    for k, idx, out, esc in walk_pipeline(portfolio, queries, entry, patches, seed, taus, lookup):
        cols["q"].append(idx)
        cols["tier"].append(np.full(len(idx), k))
        cols["quality"].append(out.quality)
        cols["pass"].append(out.passes)
        cols["u"].append(out.uncertainty)
        cols["cost"].append(out.cost)
        cols["lat"].append(out.latency_ms)
        cols["esc"].append(esc)
        cols["tok"].append(out.tokens)
    a = {k: np.concatenate(v) for k, v in cols.items()}
    # sort attempts by (query, tier) so per-query sums run in ladder order
    order = np.lexsort((a["tier"], a["q"]))
    a = {k: v[order] for k, v in a.items()}

    final_rows = np.flatnonzero(~a["esc"])  # exactly one per query
    final_tier = np.zeros(n, dtype=np.int64)
    final_tier[a["q"][final_rows]] = a["tier"][final_rows]
    final_quality = np.zeros(n)
    final_quality[a["q"][final_rows]] = a["quality"][final_rows]
    final_pass = np.zeros(n, dtype=bool)
    final_pass[a["q"][final_rows]] = a["pass"][final_rows]

    starts = np.searchsorted(a["q"], np.arange(n))
    ends = np.searchsorted(a["q"], np.arange(n), side="right")
    costs = a["cost"].tolist()
    lats = a["lat"].tolist()
    cumulative = np.array([math.fsum(costs[s:e]) for s, e in zip(starts, ends)])
    latency = np.array([math.fsum(lats[s:e]) for s, e in zip(starts, ends)]) + overhead_ms
    return CascadeRun(
        queries.query_id.copy(), queries.task_id.copy(), np.asarray(entry, dtype=np.int64),
        final_tier, ends - starts, cumulative, final_quality, final_pass, latency,
        a["q"], a["tier"], a["quality"], a["pass"], a["u"], a["cost"], a["lat"], a["esc"],
        a["tok"],
    )


@dataclass(frozen=True)
class ExperimentMetrics:
    policy: str
    n_queries: int
    quality_ratio: float
    cost_ratio: float
    mean_quality: float
    total_cost: float
    tier_shares: tuple[float, ...]
    escalation_rate: tuple[float, ...]  # per tier below K
    sla_violation_rate: float
    coverage_violation_rate: float  # queries served an accepted-but-failed cheap-tier response
    pass_rate: float

    @property
    def cheap_share(self) -> float:
        """Final-tier share of the two cheapest tiers."""
        return float(sum(self.tier_shares[:2]))

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def entry_tiers(policy: Policy, queries: Workload, portfolio: Sequence[TierSpec],
                tasks: Sequence[TaskSpec], router: RouterModel | None, seed: int) -> np.ndarray:
    K = len(portfolio)
    n = len(queries)
    if policy in (Policy.ROUTED, Policy.NO_CASCADE):
        if router is None:
            raise ValueError(f"policy {policy.value} needs a trained router")
        return predict_tiers(router, queries)
    if policy is Policy.ALWAYS_T4:
        return np.full(n, K, dtype=np.int64)
    if policy is Policy.ALWAYS_T2:
        return np.full(n, min(2, K), dtype=np.int64)
    if policy is Policy.RANDOM:
        # dedicated stream: never perturbs oracle draws
        u = keyed_rng.uniforms(seed, queries.query_id, 0, keyed_rng.ROUTING, 1)[:, 0]
        return np.minimum((u * K).astype(np.int64), K - 1) + 1
    if policy is Policy.RULE_BASED:
        gen = np.array([t.kind == "generation" for t in tasks])
        return np.where(gen[queries.task_id], min(3, K), 1).astype(np.int64)
    raise ValueError(f"unknown policy {policy!r}")


def run_policy(policy: Policy | str, queries: Workload, portfolio: Sequence[TierSpec],
               tasks: Sequence[TaskSpec], *, seed: int, router: RouterModel | None = None,
               thresholds: ThresholdTable | None = None,
               patches: Sequence[CapabilityPatch] = ()) -> CascadeRun:
    policy = Policy(policy)
    taus = np.array([t.quality_threshold for t in tasks])
    entry = entry_tiers(policy, queries, portfolio, tasks, router, seed)
    if policy is Policy.ROUTED:
        if thresholds is None:
            raise ValueError("policy routed needs a calibrated threshold table")
        return run_cascade(queries, entry, portfolio, thresholds, seed, taus, patches,
                           ROUTER_OVERHEAD_MS)
    overhead = ROUTER_OVERHEAD_MS if policy is Policy.NO_CASCADE else 0.0
    return run_cascade(queries, entry, portfolio, None, seed, taus, patches, overhead)


def summarize(policy: Policy | str, run: CascadeRun, reference: CascadeRun,
              portfolio: Sequence[TierSpec], tasks: Sequence[TaskSpec]) -> ExperimentMetrics:
    K = len(portfolio)
    n = len(run)
    shares = np.bincount(run.final_tier, minlength=K + 1)[1:] / n
    esc = []
    for k in range(1, K):
        at = run.att_tier == k
        esc.append(float(run.att_escalated[at].mean()) if at.any() else 0.0)
    below = run.att_tier < K
    accepted_fail = below & ~run.att_escalated & ~run.att_pass
    sla = np.array([t.sla_latency_ms for t in tasks])[run.task_id]
    total = run.total_cost()
    return ExperimentMetrics(
        policy=Policy(policy).value,
        n_queries=n,
        quality_ratio=float(run.final_quality.mean() / reference.final_quality.mean()),
        cost_ratio=total / reference.total_cost(),
        mean_quality=float(run.final_quality.mean()),
        total_cost=total,
        tier_shares=tuple(float(s) for s in shares),
        escalation_rate=tuple(esc),
        sla_violation_rate=float(np.mean(run.latency_ms > sla)),
        coverage_violation_rate=float(accepted_fail.sum() / n),
        pass_rate=float(run.final_pass.mean()),
    )


def run_experiment(policy: Policy | str, queries: Workload, portfolio: Sequence[TierSpec],
                   tasks: Sequence[TaskSpec], *, seed: int, router: RouterModel | None = None,
                   thresholds: ThresholdTable | None = None,
                   patches: Sequence[CapabilityPatch] = ()
                   ) -> tuple[ExperimentMetrics, CascadeRun]:
    """Run one policy over the workload; ratios are relative to an Always-T4 run
    on the same queries and seed."""
    run = run_policy(policy, queries, portfolio, tasks, seed=seed, router=router,
                     thresholds=thresholds, patches=patches)
    reference = run_policy(Policy.ALWAYS_T4, queries, portfolio, tasks, seed=seed,
                           patches=patches)
    return summarize(policy, run, reference, portfolio, tasks), run


def write_traces_csv(run: CascadeRun, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "task_id", "entry_tier", "final_tier", "attempts", "cost",
                    "quality", "pass", "latency_ms"])
        for i in range(len(run)):
            w.writerow([int(run.query_id[i]), int(run.task_id[i]), int(run.entry_tier[i]),
                        int(run.final_tier[i]), int(run.n_attempts[i]),
                        f"{run.cumulative_cost[i]:.6f}", f"{run.final_quality[i]:.6f}",
                        int(run.final_pass[i]), f"{run.latency_ms[i]:.6f}"])


def write_metrics_json(metrics: ExperimentMetrics, path: str | Path) -> None:
    Path(path).write_text(metrics.to_json())

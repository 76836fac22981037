"""Escalation-threshold calibration, coverage diagnostics and Wilson intervals.

Thresholds are fitted per (tier, task) cell on calibration traffic that flows
through the deployed pipeline: the router picks an entry tier, and a cell at
tier k also receives queries escalated out of tier k - 1.

Two threshold rules are available:

* ``risk_control`` (default): the largest observed uncertainty ``d`` with
  ``(#{fail and u <= d} + 1) / (n + 1) <= alpha``. This bounds the marginal
  accepted-but-failed rate by alpha under exchangeability.
* ``quantile``: the ``ceil((1 - alpha)(n0 + 1))``-th smallest uncertainty among
  correctly-handled examples. It bounds the rate at which correct responses are
  escalated, not the accepted-failure rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.stats import norm

from .portfolio import CapabilityPatch, Outcomes, TierSpec, evaluate_many
from .router import RouterModel, predict_tiers
from .workload import Workload

RULES = ("risk_control", "quantile")


def wilson_interval(successes: int, total: int, confidence: float = 0.95) -> tuple[float, float]:
    if total < 1:
        raise ValueError("Wilson interval needs total >= 1")
    if not 0 <= successes <= total:
        raise ValueError("successes must lie in [0, total]")
    z = norm.ppf(0.5 + confidence / 2)
    p = successes / total
    denom = 1 + z * z / total
    center = (p + z * z / (2 * total)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / total + z * z / (4 * total * total))
    low = 0.0 if successes == 0 else max(0.0, center - half)
    high = 1.0 if successes == total else min(1.0, center + half)
    return low, high


def quantile_threshold(correct_uncertainty: Sequence[float], alpha: float) -> tuple[float, bool]:
    """``ceil((1 - alpha)(n0 + 1))``-th smallest correct-example uncertainty.

    Returns (delta, degenerate). n0 = 0 gives (0.0, True): always escalate. An
    index past n0 saturates at (1.0, True).
    """
    u = np.sort(np.asarray(correct_uncertainty, dtype=float))
    n0 = len(u)
    if n0 == 0:
        return 0.0, True
    idx = math.ceil((1 - alpha) * (n0 + 1) - 1e-9)
    if idx > n0:
        return 1.0, True
    return float(u[max(idx, 1) - 1]), False


def risk_control_threshold(uncertainty: Sequence[float], failed: Sequence[bool],
                           alpha: float) -> tuple[float, bool]:
    """Largest observed uncertainty whose conformal risk bound stays within alpha.

    Loss is 1[failed and u <= delta] (bounded by 1); the bound is
    (n * R_hat(delta) + 1) / (n + 1) <= alpha. Returns (0.0, True) when no
    candidate qualifies (always escalate).
    """
    u = np.asarray(uncertainty, dtype=float)
    f = np.asarray(failed, dtype=bool)
    n = len(u)
    if n == 0:
        return 0.0, True
    budget = alpha * (n + 1) - 1
    if budget < -1e-12:
        return 0.0, True
    order = np.argsort(u, kind="stable")
    us, fs = u[order], f[order]
    # accepted failures if delta = us[i] (ties included)
    last = np.searchsorted(us, us, side="right") - 1
    fails_at = np.cumsum(fs)[last]
    ok = fails_at <= budget + 1e-12
    if not ok.any():
        return 0.0, True
    # feasibility is a prefix in sorted order, so take the last feasible value
    return float(us[np.flatnonzero(ok)[-1]]), False


@dataclass
class ThresholdTable:
    alpha: float
    rule: str
    delta: dict[tuple[int, int], float] = field(default_factory=dict)
    n_calib: dict[tuple[int, int], int] = field(default_factory=dict)
    n0: dict[tuple[int, int], int] = field(default_factory=dict)
    degenerate: set[tuple[int, int]] = field(default_factory=set)

    def lookup(self, tier_id: int, task_ids: np.ndarray) -> np.ndarray:
        """Per-query delta at `tier_id`; cells without an entry escalate (0.0)."""
        table = np.array([self.delta.get((tier_id, t), 0.0)
                          for t in range(int(task_ids.max()) + 1)]) if len(task_ids) else []
        return np.asarray(table)[task_ids] if len(task_ids) else np.zeros(0)

    def equals(self, other: "ThresholdTable") -> bool:
        return (self.alpha == other.alpha and self.rule == other.rule
                and self.delta == other.delta and self.n_calib == other.n_calib
                and self.n0 == other.n0 and self.degenerate == other.degenerate)

    @classmethod
    def constant(cls, n_tiers: int, n_tasks: int, delta: float,
                 alpha: float = 0.05) -> "ThresholdTable":
        cells = [(k, t) for k in range(1, n_tiers) for t in range(n_tasks)]
        return cls(alpha, "constant", {c: float(delta) for c in cells},
                   {c: 0 for c in cells}, {c: 0 for c in cells}, set())


def walk_pipeline(portfolio: Sequence[TierSpec], queries: Workload, entry: np.ndarray,
                  patches: Sequence[CapabilityPatch], seed: int, taus: np.ndarray,
                  delta_fn: Callable[[int, np.ndarray, Outcomes], np.ndarray]
                  ) -> Iterator[tuple[int, np.ndarray, Outcomes, np.ndarray]]:
    """Push queries through the tier ladder.

    Yields (tier_id, query indices at that tier, outcomes, escalate mask). A
    query at tier k < K escalates when its uncertainty exceeds
    ``delta_fn(k, idx, outcomes)``; tier K always terminates.
    """
    K = len(portfolio)
    carried = np.zeros(0, dtype=np.int64)
    for tier in portfolio:
        k = tier.tier_id
        idx = np.union1d(np.flatnonzero(entry == k), carried)
        if len(idx) == 0:
            carried = idx
            continue
        out = evaluate_many(tier, queries.take(idx), patches, seed, taus)
        if k < K:
            escalate = out.uncertainty > delta_fn(k, idx, out)
        else:
            escalate = np.zeros(len(idx), dtype=bool)
        yield k, idx, out, escalate
        carried = idx[escalate]


def calibrate_thresholds(portfolio: Sequence[TierSpec], router: RouterModel | None,
                         calib_queries: Workload, alpha: float = 0.05, *, seed: int,
                         taus: np.ndarray, patches: Sequence[CapabilityPatch] = (),
                         rule: str = "risk_control", entry: np.ndarray | None = None
                         ) -> ThresholdTable:
    """Fit delta[k, t] tier by tier on routed calibration traffic.

    `entry` overrides the router's choice (e.g. every query entering tier 1).
    """
    if len(calib_queries) == 0:
        raise ValueError("empty calibration set")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if rule not in RULES:
        raise ValueError(f"unknown threshold rule {rule!r}")
    if entry is None:
        entry = predict_tiers(router, calib_queries)
    n_tasks = len(taus)
    table = ThresholdTable(alpha, rule)

    def fit(k: int, idx: np.ndarray, out: Outcomes) -> np.ndarray:
        tasks = calib_queries.task_id[idx]
        deltas = np.zeros(len(idx))
        for t in range(n_tasks):
            m = tasks == t
            u, ok = out.uncertainty[m], out.passes[m]
            if rule == "risk_control":
                d, degen = risk_control_threshold(u, ~ok, alpha)
            else:
                d, degen = quantile_threshold(u[ok], alpha)
            table.delta[(k, t)] = d
            table.n_calib[(k, t)] = int(m.sum())
            table.n0[(k, t)] = int(ok.sum())
            if degen:
                table.degenerate.add((k, t))
            deltas[m] = d
        return deltas

    for _ in walk_pipeline(portfolio, calib_queries, entry, patches, seed, taus, fit):
        pass
    # cells no calibration query reached: always escalate
    for k in range(1, len(portfolio)):
        for t in range(n_tasks):
            if (k, t) not in table.delta:
                table.delta[(k, t)] = 0.0
                table.n_calib[(k, t)] = 0
                table.n0[(k, t)] = 0
                table.degenerate.add((k, t))
    return table


@dataclass(frozen=True)
class CoverageReport:
    violations: int
    total: int
    rate: float
    wilson_low: float | None  # None when total == 0
    wilson_high: float | None

    @classmethod
    def from_counts(cls, violations: int, total: int) -> "CoverageReport":
        if total == 0:
            return cls(0, 0, 0.0, None, None)
        lo, hi = wilson_interval(violations, total)
        return cls(violations, total, violations / total, float(lo), float(hi))


def coverage_check(portfolio: Sequence[TierSpec], router: RouterModel | None,
                   thresholds: ThresholdTable, test_queries: Workload, *, seed: int,
                   taus: np.ndarray, patches: Sequence[CapabilityPatch] = (),
                   entry: np.ndarray | None = None
                   ) -> tuple[dict[tuple[int, int], CoverageReport], CoverageReport]:
    """Accepted-but-failed counts per (tier, task) for tiers below K, as a share of
    the attempts in each cell, plus the same share pooled over all those attempts."""
    if entry is None:
        entry = predict_tiers(router, test_queries)
    n_tasks = len(taus)
    viol = np.zeros((len(portfolio) + 1, n_tasks), dtype=np.int64)
    tot = np.zeros_like(viol)

    def lookup(k, idx, out):
        return thresholds.lookup(k, test_queries.task_id[idx])

    for k, idx, out, esc in walk_pipeline(portfolio, test_queries, entry, patches, seed,
                                          taus, lookup):
        if k == len(portfolio):
            break
        tasks = test_queries.task_id[idx]
        np.add.at(tot[k], tasks, 1)
        np.add.at(viol[k], tasks, (~esc) & (~out.passes))
    cells = {(k, t): CoverageReport.from_counts(int(viol[k, t]), int(tot[k, t]))
             for k in range(1, len(portfolio)) for t in range(n_tasks)}
    pooled = CoverageReport.from_counts(int(viol.sum()), int(tot.sum()))
    return cells, pooled


def write_thresholds_csv(table: ThresholdTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tier", "task", "delta", "n_calib", "n0", "degenerate"])
        for (k, t) in sorted(table.delta):
            w.writerow([k, t, repr(table.delta[(k, t)]), table.n_calib[(k, t)],
                        table.n0[(k, t)], int((k, t) in table.degenerate)])


def read_thresholds_csv(path: str | Path, alpha: float, rule: str = "risk_control"
                        ) -> ThresholdTable:
    table = ThresholdTable(alpha, rule)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cell = (int(row["tier"]), int(row["task"]))
            table.delta[cell] = float(row["delta"])
            table.n_calib[cell] = int(row["n_calib"])
            table.n0[cell] = int(row["n0"])
            if int(row["degenerate"]):
                table.degenerate.add(cell)
    return table

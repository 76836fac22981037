"""Parametric model oracles standing in for the serving tiers.

A tier maps (query difficulty, effective capability) to a quality score, a
token-level uncertainty, a cost and a service-latency sample. All randomness
comes from `keyed_rng`, so an outcome is a pure function of
(tier, query, patches, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, ndtr

from . import keyed_rng
from .workload import Query, Workload

UNCERTAINTY_TOKENS = 64

LINKS = {
    "logistic": expit,
    "probit": ndtr,
}


@dataclass(frozen=True)
class TierSpec:
    tier_id: int  # 1..K
    name: str
    cost_per_1k: float
    capability: float
    quality_noise: float = 0.05
    quality_scale: float = 0.06
    uncertainty_scale: float = 0.15
    workers: int = 1
    service_rate: float = 10.0  # completions / s / worker
    rate_limit_per_sec: float | None = None
    burst: float | None = None
    link: str = "logistic"

    def __post_init__(self):
        if self.tier_id < 1:
            raise ValueError("tier ids start at 1")
        if self.cost_per_1k <= 0:
            raise ValueError(f"tier {self.tier_id}: cost_per_1k must be > 0")
        if self.quality_noise < 0:
            raise ValueError(f"tier {self.tier_id}: quality_noise must be >= 0")
        if self.quality_scale <= 0 or self.uncertainty_scale <= 0:
            raise ValueError(f"tier {self.tier_id}: logistic scales must be > 0")
        if self.workers < 1:
            raise ValueError(f"tier {self.tier_id}: workers must be >= 1")
        if self.service_rate <= 0:
            raise ValueError(f"tier {self.tier_id}: service_rate must be > 0")
        if self.rate_limit_per_sec is not None and self.rate_limit_per_sec <= 0:
            raise ValueError(f"tier {self.tier_id}: rate limit must be > 0")
        if self.link not in LINKS:
            raise ValueError(f"tier {self.tier_id}: unknown link {self.link!r}")


def default_portfolio() -> tuple[TierSpec, ...]:
    return (
        TierSpec(1, "T1", 0.01, 0.35, workers=8, service_rate=1000 / 15),
        TierSpec(2, "T2", 0.10, 0.55, workers=4, service_rate=1000 / 40),
        TierSpec(3, "T3", 0.80, 0.75, workers=4, service_rate=1000 / 100),
        TierSpec(4, "T4", 8.00, 0.95, workers=1, service_rate=1000 / 400,
                 rate_limit_per_sec=60.0, burst=60.0),
    )


def validate_portfolio(portfolio: Sequence[TierSpec], check_costs: bool = True) -> None:
    if not portfolio:
        raise ValueError("portfolio is empty")
    if [t.tier_id for t in portfolio] != list(range(1, len(portfolio) + 1)):
        raise ValueError("tier ids must be 1..K in order")
    for lo, hi in zip(portfolio, portfolio[1:]):
        if check_costs and not lo.cost_per_1k < hi.cost_per_1k:
            raise ValueError("tier costs must be strictly increasing")
        if not lo.capability < hi.capability:
            raise ValueError("tier capabilities must be strictly increasing")


def with_costs(portfolio: Sequence[TierSpec], costs: Sequence[float]) -> tuple[TierSpec, ...]:
    """Re-price tiers without touching capabilities (no ordering check on costs)."""
    return tuple(replace(t, cost_per_1k=float(c)) for t, c in zip(portfolio, costs))


@dataclass(frozen=True)
class CapabilityPatch:
    """Localized capability boost for one (tier, task), applied in feature space."""

    tier_id: int
    task_id: int
    centroid: tuple[float, ...]
    radius: float
    boost: float
    ceiling: float = float("inf")  # patched capability never exceeds this

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("patch radius must be > 0")
        if self.boost < 0:
            raise ValueError("patch boost must be >= 0")


@dataclass(frozen=True)
class QualityOutcome:
    quality: float
    passes: bool
    uncertainty: float
    tokens: int
    cost: float
    latency_ms: float


@dataclass
class Outcomes:
    """Vectorized outcomes for one tier over a batch of queries."""

    quality: np.ndarray
    passes: np.ndarray
    uncertainty: np.ndarray
    tokens: np.ndarray
    cost: np.ndarray
    latency_ms: np.ndarray

    def __getitem__(self, i: int) -> QualityOutcome:
        return QualityOutcome(float(self.quality[i]), bool(self.passes[i]),
                              float(self.uncertainty[i]), int(self.tokens[i]),
                              float(self.cost[i]), float(self.latency_ms[i]))


def attempt_cost(cost_per_1k: float, tokens):
    return cost_per_1k * tokens / 1000


def effective_capability(tier: TierSpec, task_ids: np.ndarray, features: np.ndarray,
                         patches: Sequence[CapabilityPatch]) -> np.ndarray:
    cap = np.full(len(task_ids), float(tier.capability))
    own = [p for p in patches if p.tier_id == tier.tier_id and p.boost > 0]
    if not own:
        return cap
    boost = np.zeros(len(task_ids))
    ceiling = np.full(len(task_ids), np.inf)
    for p in own:
        hit = task_ids == p.task_id
        if not hit.any():
            continue
        d = np.linalg.norm(features[hit] - np.asarray(p.centroid), axis=1)
        inside = np.flatnonzero(hit)[d <= p.radius]
        boost[inside] += p.boost
        ceiling[inside] = np.minimum(ceiling[inside], p.ceiling)
    return np.maximum(np.minimum(cap + boost, ceiling), tier.capability)


def _as_workload(queries) -> Workload:
    if isinstance(queries, Workload):
        return queries
    if isinstance(queries, Query):
        return Workload.from_queries([queries])
    return Workload.from_queries(list(queries))


def evaluate_many(tier: TierSpec, queries, patches: Sequence[CapabilityPatch], seed: int,
                  taus: np.ndarray) -> Outcomes:
    """Evaluate every query in `queries` on `tier`. `taus[t]` is task t's threshold."""
    wl = _as_workload(queries)
    link = LINKS[tier.link]
    c_eff = effective_capability(tier, wl.task_id, wl.features, patches)
    margin = c_eff - wl.difficulty
    z = keyed_rng.normals(seed, wl.query_id, tier.tier_id, keyed_rng.QUALITY)
    quality = np.clip(link(margin / tier.quality_scale) + tier.quality_noise * z, 0.0, 1.0)
    passes = quality >= np.asarray(taus)[wl.task_id]

    # token confidences p_i ~ Beta(a, 1) with mean a / (a + 1) = link(margin / s_u),
    # drawn by inversion p = U^(1/a); uncertainty is the mean of (1 - p_i)
    mean_conf = np.clip(link(margin / tier.uncertainty_scale), 1e-9, 1 - 1e-9)
    a = mean_conf / (1 - mean_conf)
    L = np.minimum(wl.token_len, UNCERTAINTY_TOKENS)
    width = UNCERTAINTY_TOKENS  # fixed width: row sums never depend on batch composition
    u = keyed_rng.uniforms(seed, wl.query_id, tier.tier_id, keyed_rng.TOKENS, width)
    p = np.exp(np.log(u) / a[:, None])
    mask = np.arange(width)[None, :] < L[:, None]
    uncertainty = ((1.0 - p) * mask).sum(axis=1) / L

    lat_u = keyed_rng.uniforms(seed, wl.query_id, tier.tier_id, keyed_rng.LATENCY, 1)[:, 0]
    latency_ms = -np.log(lat_u) / tier.service_rate * 1000.0
    cost = attempt_cost(tier.cost_per_1k, wl.token_len.astype(float))
    return Outcomes(quality, passes, uncertainty, wl.token_len.copy(), cost, latency_ms)


def evaluate(tier: TierSpec, query: Query, patches: Sequence[CapabilityPatch], seed: int,
             taus: np.ndarray) -> QualityOutcome:
    return evaluate_many(tier, query, patches, seed, taus)[0]


def pass_matrix(queries: Workload, portfolio: Sequence[TierSpec],
                patches: Sequence[CapabilityPatch], seed: int, taus: np.ndarray) -> np.ndarray:
    """(N, K) boolean matrix of per-tier pass indicators."""
    return np.column_stack([evaluate_many(t, queries, patches, seed, taus).passes
                            for t in portfolio])


def cheapest_sufficient_tiers(queries: Workload, portfolio: Sequence[TierSpec],
                              patches: Sequence[CapabilityPatch], seed: int,
                              taus: np.ndarray) -> np.ndarray:
    """Tier id (1..K) of the cheapest passing tier per query; 0 where none passes."""
    pm = pass_matrix(queries, portfolio, patches, seed, taus)
    first = pm.argmax(axis=1) + 1
    return np.where(pm.any(axis=1), first, 0)


def cheapest_sufficient_tier(query: Query, portfolio: Sequence[TierSpec],
                             patches: Sequence[CapabilityPatch], seed: int,
                             taus: np.ndarray) -> int | None:
    for tier in portfolio:
        if evaluate(tier, query, patches, seed, taus).passes:
            return tier.tier_id
    return None

"""Failure clustering and the distillation-routing co-optimization loop.

Each round: run the pipeline on training traffic, collect escalated queries,
cluster them per task in router-representation space (PCA + k-means with
silhouette model selection), rank clusters by size x mean quality gap, build
a distillation set from the hardest members, patch the cheaper tiers around
those regions, relabel and retrain the router, recalibrate, and measure.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import ThresholdTable, calibrate_thresholds
from .cascade import CascadeRun, ExperimentMetrics, Policy, run_experiment
from .portfolio import CapabilityPatch, TierSpec
from .router import RouterModel, TrainingConfig, forward_batch, label_examples, train
from .workload import TaskSpec, Workload

log = logging.getLogger(__name__)


# -- failure collection --------------------------------------------------------

@dataclass(frozen=True)
class FailureRecord:
    query_index: int  # row in the workload the traces came from
    query_id: int
    task_id: int
    entry_tier: int
    escalated_from: tuple[int, ...]
    hidden: np.ndarray
    features: np.ndarray
    quality_gap: float


def collect_failures(run: CascadeRun, router: RouterModel, queries: Workload,
                     taus: np.ndarray) -> list[FailureRecord]:
    """One record per query that escalated at least once."""
    escalated = np.flatnonzero(run.n_attempts > 1)
    if len(escalated) == 0:
        return []
    _, hidden, _ = forward_batch(router, queries.task_id[escalated],
                                 queries.features[escalated])
    records = []
    for j, i in enumerate(escalated):
        rows = np.flatnonzero((run.att_query == i) & run.att_escalated)
        best = float(run.att_quality[rows].max())
        tau = float(taus[queries.task_id[i]])
        records.append(FailureRecord(
            int(i), int(queries.query_id[i]), int(queries.task_id[i]), int(run.entry_tier[i]),
            tuple(sorted(int(k) for k in run.att_tier[rows])), hidden[j],
            queries.features[i].copy(), max(0.0, tau - best)))
    return records


# -- PCA ----------------------------------------------------------------------

@dataclass
class PCAResult:
    projected: np.ndarray
    retained_variance: float
    mean: np.ndarray
    components: np.ndarray  # (H, d)
    eigenvalues: np.ndarray  # all, descending


def pca_project(vectors, target_dim: int) -> PCAResult:
    X = np.asarray(vectors, dtype=float)
    if target_dim <= 0:
        raise ValueError("target_dim must be positive")
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("PCA needs at least two vectors")
    d = min(target_dim, X.shape[1])
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    # sign convention: largest-magnitude loading of each component is positive
    flip = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(vecs.shape[1])])
    vecs = vecs * np.where(flip == 0, 1.0, flip)
    total = vals.sum()
    retained = 1.0 if total <= 0 else float(vals[:d].sum() / total)
    comps = vecs[:, :d]
    return PCAResult(Xc @ comps, retained, mean, comps, vals)


# -- k-means ------------------------------------------------------------------

def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plus_plus_seeds(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d = _sq_dists(X, np.array(centers)).min(axis=1)
        if d.sum() <= 0:
            centers.append(X[rng.integers(n)])
        else:
            centers.append(X[rng.choice(n, p=d / d.sum())])
    return np.array(centers, dtype=float)


def _kmeans_from(X: np.ndarray, C: np.ndarray, max_iter: int):
    n, k = len(X), len(C)
    C = C.copy()
    assign = np.full(n, -1)
    for _ in range(max_iter):
        D = _sq_dists(X, C)
        new = D.argmin(axis=1)
        # refill empty clusters with the point farthest from its centre
        for j in range(k):
            if not (new == j).any():
                far = D[np.arange(n), new].argmax()
                new[far] = j
                D[far] = 0
        if np.array_equal(new, assign):
            break
        assign = new
        C = np.array([X[assign == j].mean(axis=0) for j in range(k)])
    assign, C = _hartigan_refine(X, assign, C)
    inertia = float(((X - C[assign]) ** 2).sum())
    return assign, C, inertia


def _hartigan_refine(X: np.ndarray, assign: np.ndarray, C: np.ndarray,
                     max_moves: int = 10_000):
    """Single-point transfers that strictly lower inertia once centroids move too.
    Lloyd fixed points are not always local optima of this neighbourhood; each
    step applies the best improving transfer."""
    assign = assign.copy()
    n, k = len(X), len(C)
    rows = np.arange(n)
    sizes = np.bincount(assign, minlength=k).astype(float)
    for _ in range(max_moves):
        D = _sq_dists(X, C)
        own = sizes[assign]
        with np.errstate(divide="ignore", invalid="ignore"):
            remove = np.where(own > 1, own / (own - 1) * D[rows, assign], -np.inf)
        add = sizes / (sizes + 1) * D
        add[rows, assign] = np.inf
        target = add.argmin(axis=1)
        gain = remove - add[rows, target]
        i = int(gain.argmax())
        if not gain[i] > 1e-12 * max(remove[i], 1e-300):
            break
        a, b = assign[i], target[i]
        assign[i] = b
        sizes[a] -= 1
        sizes[b] += 1
        C[a] = X[assign == a].mean(axis=0)
        C[b] = X[assign == b].mean(axis=0)
    return assign, C


EXHAUSTIVE_SEEDS = 64  # enumerate every seed set when there are at most this many


def kmeans(X, k: int, seed: int, restarts: int = 10, max_iter: int = 100):
    """Lloyd iterations plus Hartigan transfers; best inertia over restarts.

    Small instances start from every k-subset of the points; larger ones from
    `restarts` k-means++ draws. Returns (assignment, centroids, inertia).
    """
    X = np.asarray(X, dtype=float)
    if not 1 <= k <= len(X):
        raise ValueError("k must lie in [1, n_points]")
    if math.comb(len(X), k) <= EXHAUSTIVE_SEEDS:
        starts = (X[list(c)] for c in itertools.combinations(range(len(X)), k))
    else:
        rng = np.random.default_rng([seed, k, 0xC1A5])
        starts = (_plus_plus_seeds(X, k, rng) for _ in range(restarts))
    best = None
    for C in starts:
        res = _kmeans_from(X, C, max_iter)
        if best is None or res[2] < best[2] - 1e-12:
            best = res
    return best


def silhouette(X, assignment) -> float:
    """Mean silhouette coefficient; singleton clusters score 0."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(assignment)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        return 0.0
    D = np.sqrt(_sq_dists(X, X))
    s = np.zeros(len(X))
    sizes = {c: int((labels == c).sum()) for c in uniq}
    for i in range(len(X)):
        own = labels[i]
        if sizes[own] == 1:
            continue
        a = D[i, labels == own].sum() / (sizes[own] - 1)
        b = min(D[i, labels == c].mean() for c in uniq if c != own)
        s[i] = 0.0 if max(a, b) == 0 else (b - a) / max(a, b)
    return float(s.mean())


@dataclass
class ClusteringResult:
    assignment: np.ndarray
    chosen_k: int
    silhouette: float
    inertia: float
    trivial: bool = False  # too few points for any candidate k


def kmeans_with_silhouette(projected, candidate_ks: Sequence[int] = (5, 10, 20),
                           seed: int = 0, restarts: int = 10) -> ClusteringResult:
    X = np.asarray(projected, dtype=float)
    if not candidate_ks:
        raise ValueError("candidate_ks is empty")
    usable = sorted(k for k in set(candidate_ks) if 1 < k < len(X))
    if not usable:
        log.warning("%d points: fewer than the smallest candidate k; one cluster", len(X))
        centre = X.mean(axis=0)
        return ClusteringResult(np.zeros(len(X), dtype=int), 1, 0.0,
                                float(((X - centre) ** 2).sum()), trivial=True)
    best = None
    for k in usable:
        assign, _, inertia = kmeans(X, k, seed, restarts)
        score = silhouette(X, assign)
        if best is None or score > best.silhouette + 1e-12:
            best = ClusteringResult(assign, k, score, inertia)
    return best


# -- ranking, distillation set, patches ----------------------------------------

@dataclass(frozen=True)
class FailureCluster:
    cluster_id: int
    task_id: int
    centroid: tuple[float, ...]  # reduced space
    member_ids: tuple[int, ...]  # indices into the failure list
    size: int
    mean_quality_gap: float

    @property
    def score(self) -> float:
        return self.size * self.mean_quality_gap


def cluster_failures(failures: Sequence[FailureRecord], seed: int,
                     candidate_ks: Sequence[int] = (5, 10, 20), pca_dim: int | None = None,
                     restarts: int = 10) -> list[FailureCluster]:
    clusters: list[FailureCluster] = []
    tasks = sorted({f.task_id for f in failures})
    for t in tasks:
        idx = [i for i, f in enumerate(failures) if f.task_id == t]
        H = np.array([failures[i].hidden for i in idx])
        gaps = np.array([failures[i].quality_gap for i in idx])
        if len(idx) >= 2:
            dim = min(H.shape[1], 128) if pca_dim is None else pca_dim
            Z = pca_project(H, dim).projected
        else:
            Z = H
        res = kmeans_with_silhouette(Z, candidate_ks, seed=seed + t, restarts=restarts)
        for c in range(res.chosen_k):
            m = np.flatnonzero(res.assignment == c)
            if len(m) == 0:
                continue
            clusters.append(FailureCluster(
                len(clusters), t, tuple(Z[m].mean(axis=0).tolist()),
                tuple(int(idx[j]) for j in m), len(m), float(gaps[m].mean())))
    return clusters


def rank_and_select(clusters: Sequence[FailureCluster], top_n: int = 5) -> list[FailureCluster]:
    """Per task: highest size x mean gap first, ties to the lower cluster_id."""
    out = []
    for t in sorted({c.task_id for c in clusters}):
        group = sorted((c for c in clusters if c.task_id == t),
                       key=lambda c: (-c.score, c.cluster_id))
        out.extend(group[:top_n])
    return out


@dataclass
class DistillSet:
    hardest: dict[int, list[int]]  # cluster_id -> failure indices (hardest first)
    replay: np.ndarray  # rows of the in-distribution pool

    @property
    def n_failures(self) -> int:
        return sum(len(v) for v in self.hardest.values())

    def __len__(self) -> int:
        return self.n_failures + len(self.replay)


def build_distill_set(selected: Sequence[FailureCluster], failures: Sequence[FailureRecord],
                      pool_size: int, seed: int, hard_fraction: float = 0.3,
                      replay_fraction: float = 0.2) -> DistillSet:
    """Top `hard_fraction` of each selected cluster by quality gap (ceil; ties to
    the smaller query_id) plus `replay_fraction` x that total drawn uniformly
    from the in-distribution pool."""
    hardest = {}
    for c in selected:
        members = sorted(c.member_ids,
                         key=lambda i: (-failures[i].quality_gap, failures[i].query_id))
        n_keep = math.ceil(hard_fraction * len(members) - 1e-9)
        hardest[c.cluster_id] = members[:n_keep]
    n_fail = sum(len(v) for v in hardest.values())
    n_replay = min(pool_size, math.ceil(replay_fraction * n_fail - 1e-9))
    rng = np.random.default_rng([seed, 0xD157])
    replay = np.sort(rng.choice(pool_size, size=n_replay, replace=False)) if n_replay \
        else np.zeros(0, dtype=np.int64)
    return DistillSet(hardest, replay)


def cluster_regions(selected: Sequence[FailureCluster], failures: Sequence[FailureRecord],
                    distill: DistillSet, radius_quantile: float = 0.9
                    ) -> list[tuple[int, np.ndarray, float]]:
    """(task, feature-space centre, radius) per selected cluster. The centre is the
    mean feature vector of the cluster's distilled (hardest) members; the radius is
    the `radius_quantile` distance of all members to that centre."""
    regions = []
    for c in selected:
        hard = distill.hardest.get(c.cluster_id) or list(c.member_ids)
        centre = np.mean([failures[i].features for i in hard], axis=0)
        dist = np.linalg.norm(np.array([failures[i].features for i in c.member_ids]) - centre,
                              axis=1)
        radius = max(float(np.quantile(dist, radius_quantile)), 1e-6)
        regions.append((c.task_id, centre, radius))
    return regions


def apply_distillation(patches: Sequence[CapabilityPatch],
                       regions: Sequence[tuple[int, np.ndarray, float]],
                       portfolio: Sequence[TierSpec], teacher_tier: int, eta: float,
                       cap_margin: float = 0.01) -> list[CapabilityPatch]:
    """Append a patch per (cheaper tier, region): boost = eta * (c_teacher - c_k),
    with the patched capability held below c_teacher - cap_margin."""
    if teacher_tier != len(portfolio):
        raise ValueError("the teacher must be the top tier")
    if not 0 <= eta <= 1:
        raise ValueError("eta must lie in [0, 1]")
    top = portfolio[teacher_tier - 1].capability
    new = list(patches)
    for tier in portfolio[:-1]:
        boost = eta * (top - tier.capability)
        for task, centre, radius in regions:
            new.append(CapabilityPatch(tier.tier_id, int(task),
                                       tuple(float(x) for x in centre), float(radius),
                                       float(boost), ceiling=top - cap_margin))
    return new


def random_regions(regions: Sequence[tuple[int, np.ndarray, float]],
                   failures: Sequence[FailureRecord], seed: int
                   ) -> list[tuple[int, np.ndarray, float]]:
    """Same count and radii as `regions`, centres drawn uniformly from the failure
    pool with no clustering or ranking."""
    rng = np.random.default_rng([seed, 0x4A4D])
    rows = rng.choice(len(failures), size=len(regions), replace=len(regions) > len(failures))
    return [(failures[r].task_id, failures[r].features.copy(), radius)
            for r, (_, _, radius) in zip(rows, regions)]


# -- the loop -------------------------------------------------------------------

@dataclass(frozen=True)
class CooptConfig:
    epsilon: float = 0.005
    max_iterations: int = 10
    eta: float = 0.6
    top_n: int = 5
    candidate_ks: tuple[int, ...] = (5, 10, 20)
    pca_dim: int | None = None
    hard_fraction: float = 0.3
    replay_fraction: float = 0.2
    radius_quantile: float = 0.9
    cap_margin: float = 0.01
    kmeans_restarts: int = 10
    targeting: str = "clustered"  # or "random" (ablation)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.targeting not in ("clustered", "random"):
            raise ValueError("targeting must be 'clustered' or 'random'")


@dataclass
class CooptState:
    iteration: int = 0
    cost_ratio_history: list[float] = field(default_factory=list)
    quality_ratio_history: list[float] = field(default_factory=list)
    cheap_share_history: list[float] = field(default_factory=list)
    top_share_history: list[float] = field(default_factory=list)
    clusters_selected: list[int] = field(default_factory=list)
    patches_total: list[int] = field(default_factory=list)
    patches: list[CapabilityPatch] = field(default_factory=list)
    epsilon: float = 0.005
    converged: bool = False
    router: RouterModel | None = None
    thresholds: ThresholdTable | None = None

    def record(self, m: ExperimentMetrics, n_selected: int) -> None:
        self.cost_ratio_history.append(m.cost_ratio)
        self.quality_ratio_history.append(m.quality_ratio)
        self.cheap_share_history.append(m.cheap_share)
        self.top_share_history.append(m.tier_shares[-1])
        self.clusters_selected.append(n_selected)
        self.patches_total.append(len(self.patches))


@dataclass
class CooptData:
    train: Workload
    calib: Workload
    eval: Workload


def coopt_loop(router: RouterModel, portfolio: Sequence[TierSpec], tasks: Sequence[TaskSpec],
               data: CooptData, train_config: TrainingConfig, config: CooptConfig, *,
               alpha: float = 0.05, seed: int = 0
               ) -> tuple[CooptState, list[ExperimentMetrics]]:
    """Iterate until |cost_ratio(i) - cost_ratio(i-1)| < epsilon or the cap.
    Patches accumulate across iterations."""
    taus = np.array([t.quality_threshold for t in tasks])
    costs = [t.cost_per_1k for t in portfolio]
    K = len(portfolio)
    state = CooptState(epsilon=config.epsilon, router=router)
    state.thresholds = calibrate_thresholds(portfolio, router, data.calib, alpha, seed=seed,
                                            taus=taus)
    m0, _ = run_experiment(Policy.ROUTED, data.eval, portfolio, tasks, seed=seed,
                           router=router, thresholds=state.thresholds)
    history = [m0]
    state.record(m0, 0)

    for i in range(1, config.max_iterations + 1):
        _, run = run_experiment(Policy.ROUTED, data.train, portfolio, tasks, seed=seed,
                                router=state.router, thresholds=state.thresholds,
                                patches=state.patches)
        failures = collect_failures(run, state.router, data.train, taus)
        selected: list[FailureCluster] = []
        if failures:
            clusters = cluster_failures(failures, seed + 1000 * i, config.candidate_ks,
                                        config.pca_dim, config.kmeans_restarts)
            selected = rank_and_select(clusters, config.top_n)
            distill = build_distill_set(selected, failures, len(data.train), seed + i,
                                        config.hard_fraction, config.replay_fraction)
            regions = cluster_regions(selected, failures, distill, config.radius_quantile)
            if config.targeting == "random":
                regions = random_regions(regions, failures, seed + i)
            state.patches = apply_distillation(state.patches, regions, portfolio, K,
                                               config.eta, config.cap_margin)
        examples = label_examples(data.train, portfolio, state.patches, seed, taus)
        state.router = train(examples, train_config, costs, len(tasks))
        state.thresholds = calibrate_thresholds(portfolio, state.router, data.calib, alpha,
                                                seed=seed, taus=taus, patches=state.patches)
        m, _ = run_experiment(Policy.ROUTED, data.eval, portfolio, tasks, seed=seed,
                              router=state.router, thresholds=state.thresholds,
                              patches=state.patches)
        history.append(m)
        state.iteration = i
        state.record(m, len(selected))
        log.info("coopt iteration %d: cost %.4f quality %.4f cheap %.3f", i, m.cost_ratio,
                 m.quality_ratio, m.cheap_share)
        if abs(state.cost_ratio_history[-1] - state.cost_ratio_history[-2]) < config.epsilon:
            state.converged = True
            break
    if not state.converged:
        log.warning("co-optimization did not converge within %d iterations",
                    config.max_iterations)
    return state, history


def write_history_csv(state: CooptState, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "quality_ratio", "cost_ratio", "t1t2_share", "t4_share",
                    "clusters_selected", "patches_total"])
        for i in range(state.iteration + 1):
            w.writerow([i, f"{state.quality_ratio_history[i]:.6f}",
                        f"{state.cost_ratio_history[i]:.6f}",
                        f"{state.cheap_share_history[i]:.6f}",
                        f"{state.top_share_history[i]:.6f}",
                        state.clusters_selected[i], state.patches_total[i]])


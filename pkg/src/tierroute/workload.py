"""Seeded synthetic query populations and distribution-shift transforms."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

TOKEN_MAX = 4096


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    quality_threshold: float
    mix_weight: float
    sla_latency_ms: float = 500.0
    kind: str = "structured"  # or "generation"; used by the rule-based baseline
    beta_a: float = 2.0
    beta_b: float = 5.0
    token_median: float = 64.0

    def __post_init__(self):
        if not 0.0 < self.quality_threshold < 1.0:
            raise ValueError(f"task {self.name}: quality_threshold must lie in (0, 1)")
        if self.mix_weight < 0:
            raise ValueError(f"task {self.name}: mix_weight must be >= 0")
        if self.sla_latency_ms <= 0:
            raise ValueError(f"task {self.name}: sla_latency_ms must be > 0")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError(f"task {self.name}: Beta parameters must be > 0")
        if self.kind not in ("structured", "generation"):
            raise ValueError(f"task {self.name}: unknown kind {self.kind!r}")
        if self.token_median < 1:
            raise ValueError(f"task {self.name}: token_median must be >= 1")


def default_tasks() -> tuple[TaskSpec, ...]:
    """Six enterprise tasks; mix weights follow the benchmark's test-split sizes."""
    sizes = [1800, 1200, 2600, 1500, 1000, 700]
    total = sum(sizes)
    rows = [
        ("fin_ner", 0.90, "structured", 2.0, 5.0, 40),
        ("fin_summ", 0.42, "generation", 3.5, 3.0, 200),
        ("cs_intent", 0.92, "structured", 2.0, 6.0, 8),
        ("cs_response", 0.65, "generation", 3.0, 3.0, 120),
        ("legal_clause", 0.88, "structured", 2.0, 5.0, 60),
        ("legal_risk", 0.82, "generation", 2.5, 3.5, 30),
    ]
    return tuple(
        TaskSpec(i, name, tau, n / total, kind=kind, beta_a=a, beta_b=b, token_median=med)
        for i, ((name, tau, kind, a, b, med), n) in enumerate(zip(rows, sizes))
    )


@dataclass(frozen=True)
class WorkloadConfig:
    tasks: tuple[TaskSpec, ...] = field(default_factory=default_tasks)
    n_queries: int = 6000
    feature_dim: int = 8
    feature_noise: float = 0.15
    token_sigma: float = 0.5
    embedding_seed: int = 0

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("at least one task is required")
        ids = [t.task_id for t in self.tasks]
        if ids != list(range(len(ids))):
            raise ValueError("task ids must be 0..T-1 in order")
        if abs(sum(t.mix_weight for t in self.tasks) - 1.0) > 1e-9:
            raise ValueError("task mix weights must sum to 1")
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.feature_noise < 0 or self.token_sigma < 0:
            raise ValueError("noise levels must be >= 0")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def taus(self) -> np.ndarray:
        return np.array([t.quality_threshold for t in self.tasks])

    def slas(self) -> np.ndarray:
        return np.array([t.sla_latency_ms for t in self.tasks])

    def with_tau_scale(self, scale: float) -> "WorkloadConfig":
        """Multiply every task threshold by `scale`, clipped into (0, 1)."""
        tasks = tuple(
            replace(t, quality_threshold=float(np.clip(t.quality_threshold * scale, 1e-3, 0.995)))
            for t in self.tasks
        )
        return replace(self, tasks=tasks)


def task_embedding(config: WorkloadConfig, task_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-task projection (w_t, b_t). Seeded by the config, not the workload seed,
    so workloads drawn with different seeds share one feature geometry."""
    rng = np.random.default_rng([config.embedding_seed, task_id, 0xE3B])
    w = rng.normal(size=config.feature_dim)
    b = rng.normal(scale=0.5, size=config.feature_dim)
    return w, b


def embed(config: WorkloadConfig, task_ids: np.ndarray, difficulty: np.ndarray) -> np.ndarray:
    """Noiseless features: difficulty * w_t + b_t."""
    out = np.empty((len(task_ids), config.feature_dim))
    for t in range(config.n_tasks):
        w, b = task_embedding(config, t)
        m = task_ids == t
        out[m] = difficulty[m, None] * w + b
    return out


@dataclass(frozen=True)
class Query:
    query_id: int
    task_id: int
    difficulty: float
    features: tuple[float, ...]
    token_len: int
    shifted: bool = False


@dataclass
class Workload:
    """Column-oriented query population. Indexing yields `Query` records."""

    query_id: np.ndarray
    task_id: np.ndarray
    difficulty: np.ndarray
    features: np.ndarray
    token_len: np.ndarray
    shifted: np.ndarray

    def __post_init__(self):
        n = len(self.query_id)
        for name in ("task_id", "difficulty", "token_len", "shifted"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has the wrong length")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be an (N, F) matrix")

    def __len__(self) -> int:
        return len(self.query_id)

    def __getitem__(self, i: int) -> Query:
        return Query(
            int(self.query_id[i]),
            int(self.task_id[i]),
            float(self.difficulty[i]),
            tuple(float(x) for x in self.features[i]),
            int(self.token_len[i]),
            bool(self.shifted[i]),
        )

    def __iter__(self) -> Iterator[Query]:
        for i in range(len(self)):
            yield self[i]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "Workload":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return Workload(
            self.query_id[idx],
            self.task_id[idx],
            self.difficulty[idx],
            self.features[idx],
            self.token_len[idx],
            self.shifted[idx],
        )

    def equals(self, other: "Workload") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("query_id", "task_id", "difficulty", "features", "token_len", "shifted")
        )

    @classmethod
    def from_queries(cls, queries: Sequence[Query]) -> "Workload":
        if not queries:
            raise ValueError("empty query list")
        return cls(
            np.array([q.query_id for q in queries], dtype=np.int64),
            np.array([q.task_id for q in queries], dtype=np.int64),
            np.array([q.difficulty for q in queries], dtype=float),
            np.array([q.features for q in queries], dtype=float),
            np.array([q.token_len for q in queries], dtype=np.int64),
            np.array([q.shifted for q in queries], dtype=bool),
        )

    @classmethod
    def concat(cls, parts: Sequence["Workload"]) -> "Workload":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("query_id", "task_id", "difficulty", "features", "token_len", "shifted")))


def generate_workload(config: WorkloadConfig, seed: int, n: int | None = None,
                      id_offset: int = 0) -> Workload:
    """Draw `n` (default config.n_queries) queries; a pure function of (config, seed)."""
    n = config.n_queries if n is None else n
    if n < 1:
        raise ValueError("workload size must be >= 1")
    rng = np.random.default_rng([seed, 0x57A7])
    weights = np.array([t.mix_weight for t in config.tasks])
    task_ids = rng.choice(config.n_tasks, size=n, p=weights / weights.sum())
    a = np.array([t.beta_a for t in config.tasks])[task_ids]
    b = np.array([t.beta_b for t in config.tasks])[task_ids]
    difficulty = rng.beta(a, b)
    med = np.array([t.token_median for t in config.tasks])[task_ids]
    tokens = np.rint(med * np.exp(config.token_sigma * rng.standard_normal(n)))
    tokens = np.clip(tokens, 1, TOKEN_MAX).astype(np.int64)
    noise = rng.standard_normal((n, config.feature_dim)) * config.feature_noise
    features = embed(config, task_ids, difficulty) + noise
    return Workload(
        np.arange(id_offset, id_offset + n, dtype=np.int64),
        task_ids.astype(np.int64),
        difficulty,
        features,
        tokens,
        np.zeros(n, dtype=bool),
    )


def generate_task_workload(config: WorkloadConfig, task_id: int, n: int, seed: int,
                           id_offset: int = 0) -> Workload:
    """All `n` queries from a single task (used to fill per-cell populations)."""
    tasks = tuple(replace(t, mix_weight=1.0 if t.task_id == task_id else 0.0)
                  for t in config.tasks)
    return generate_workload(replace(config, tasks=tasks), seed, n=n, id_offset=id_offset)


class ShiftKind(str, enum.Enum):
    NONE = "none"
    DIFFICULTY = "difficulty_shift"
    DOMAIN = "domain_shift"
    TASK_MIX = "task_mix_shift"


@dataclass(frozen=True)
class ShiftScenario:
    kind: ShiftKind = ShiftKind.NONE
    magnitude: float = 0.0
    # domain shift only: norm of the unseen embedding offset, and the extra
    # difficulty an out-of-domain query carries
    offset_norm: float = 1.5
    difficulty_boost: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "kind", ShiftKind(self.kind))
        if self.magnitude < 0:
            raise ValueError("shift magnitude must be >= 0")
        if self.kind is ShiftKind.NONE and self.magnitude != 0:
            raise ValueError("kind=none requires magnitude 0")
        if self.kind in (ShiftKind.DOMAIN, ShiftKind.TASK_MIX) and self.magnitude > 1:
            raise ValueError(f"{self.kind.value} magnitude must lie in [0, 1]")


def apply_shift(queries: Workload, scenario: ShiftScenario, seed: int) -> Workload:
    if len(queries) == 0:
        raise ValueError("cannot shift an empty workload")
    kind, m = scenario.kind, scenario.magnitude
    if kind is ShiftKind.NONE:
        return queries
    if kind is ShiftKind.DIFFICULTY:
        return replace(queries, difficulty=np.clip(queries.difficulty + m, 0.0, 1.0))
    rng = np.random.default_rng([seed, 0x5817, list(ShiftKind).index(kind)])
    if kind is ShiftKind.DOMAIN:
        n_shift = math.floor(m * len(queries))
        idx = np.sort(rng.choice(len(queries), size=n_shift, replace=False))
        offsets = rng.standard_normal((int(queries.task_id.max()) + 1, queries.feature_dim))
        offsets *= scenario.offset_norm / np.linalg.norm(offsets, axis=1, keepdims=True)
        features = queries.features.copy()
        features[idx] += offsets[queries.task_id[idx]]
        difficulty = queries.difficulty.copy()
        difficulty[idx] = np.clip(difficulty[idx] + scenario.difficulty_boost, 0.0, 1.0)
        shifted = queries.shifted.copy()
        shifted[idx] = True
        return replace(queries, features=features, difficulty=difficulty, shifted=shifted)
    # task mix: move the mix toward uniform by `m`, then subsample without
    # replacement (ids stay unique) so task proportions match the target
    n_tasks = int(queries.task_id.max()) + 1
    counts = np.bincount(queries.task_id, minlength=n_tasks)
    present = counts > 0
    current = counts / counts.sum()
    target = (1 - m) * current + m * present / present.sum()
    size = int(np.floor(np.min(counts[present] / target[present])))
    keep = []
    for t in np.flatnonzero(present):
        members = np.flatnonzero(queries.task_id == t)
        k = min(len(members), int(round(target[t] * size)))
        keep.append(rng.choice(members, size=k, replace=False))
    return queries.take(np.sort(np.concatenate(keep)))


def write_workload_csv(queries: Workload, path: str | Path) -> None:
    header = ["query_id", "task_id", "difficulty", "token_len"] + [
        f"f{i}" for i in range(queries.feature_dim)
    ]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(queries)):
            w.writerow(
                [int(queries.query_id[i]), int(queries.task_id[i]),
                 repr(float(queries.difficulty[i])), int(queries.token_len[i])]
                + [repr(float(x)) for x in queries.features[i]]
            )


def read_workload_csv(path: str | Path) -> Workload:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no queries")
    fcols = sorted((k for k in rows[0] if k.startswith("f") and k[1:].isdigit()),
                   key=lambda k: int(k[1:]))
    return Workload(
        np.array([int(r["query_id"]) for r in rows], dtype=np.int64),
        np.array([int(r["task_id"]) for r in rows], dtype=np.int64),
        np.array([float(r["difficulty"]) for r in rows]),
        np.array([[float(r[c]) for c in fcols] for r in rows]),
        np.array([int(r["token_len"]) for r in rows], dtype=np.int64),
        np.zeros(len(rows), dtype=bool),
    )

"""Task-conditioned MLP router trained with the composite routing loss.

Input is the query feature vector (standardized with fixed statistics)
concatenated with a learned per-task embedding; one ReLU hidden layer feeds
K tier logits. The hidden activations double as the representation used for
failure clustering.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .portfolio import CapabilityPatch, TierSpec, pass_matrix
from .workload import Query, Workload

log = logging.getLogger(__name__)

PARAMS = ("task_embeddings", "w_hidden", "b_hidden", "w_out", "b_out")
CHECKPOINT_MAGIC = "tierroute-router v1"


@dataclass(frozen=True)
class TrainingConfig:
    lambda_cost: float = 0.3
    lambda_quality: float = 0.5
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 60
    patience: int = 3
    val_fraction: float = 0.2
    embed_dim: int = 8
    hidden_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lambda_cost < 0 or self.lambda_quality < 0:
            raise ValueError("loss weights must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("invalid optimizer settings")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class RouterModel:
    task_embeddings: np.ndarray  # (T, E)
    w_hidden: np.ndarray  # (F + E, H)
    b_hidden: np.ndarray  # (H,)
    w_out: np.ndarray  # (H, K)
    b_out: np.ndarray  # (K,)
    feature_mean: np.ndarray = field(default=None)  # fixed input standardization
    feature_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        f = self.w_hidden.shape[0] - self.task_embeddings.shape[1]
        if self.feature_mean is None:
            self.feature_mean = np.zeros(f)
        if self.feature_scale is None:
            self.feature_scale = np.ones(f)

    @property
    def n_tasks(self) -> int:
        return self.task_embeddings.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w_hidden.shape[0] - self.task_embeddings.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def n_tiers(self) -> int:
        return self.w_out.shape[1]

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, p).ravel() for p in PARAMS])

    def with_flat(self, vec: np.ndarray) -> "RouterModel":
        parts, i = {}, 0
        for p in PARAMS:
            arr = getattr(self, p)
            parts[p] = np.asarray(vec[i:i + arr.size], dtype=float).reshape(arr.shape).copy()
            i += arr.size
        if i != len(vec):
            raise ValueError("parameter vector has the wrong length")
        return replace(self, **parts)

    def equals(self, other: "RouterModel") -> bool:
        names = PARAMS + ("feature_mean", "feature_scale")
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)


def init_model(n_tasks: int, feature_dim: int, n_tiers: int, config: TrainingConfig,
               feature_mean=None, feature_scale=None) -> RouterModel:
    rng = np.random.default_rng([config.seed, 0x1217])
    d_in = feature_dim + config.embed_dim
    return RouterModel(
        task_embeddings=rng.normal(scale=0.5, size=(n_tasks, config.embed_dim)),
        w_hidden=rng.normal(scale=np.sqrt(2.0 / d_in), size=(d_in, config.hidden_dim)),
        b_hidden=np.zeros(config.hidden_dim),
        w_out=rng.normal(scale=np.sqrt(1.0 / config.hidden_dim),
                         size=(config.hidden_dim, n_tiers)),
        b_out=np.zeros(n_tiers),
        feature_mean=feature_mean,
        feature_scale=feature_scale,
    )


def _inputs(model: RouterModel, task_ids: np.ndarray, features: np.ndarray) -> np.ndarray:
    task_ids = np.asarray(task_ids)
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if features.shape[1] != model.feature_dim:
        raise ValueError(f"expected {model.feature_dim} features, got {features.shape[1]}")
    if task_ids.size and (task_ids.min() < 0 or task_ids.max() >= model.n_tasks):
        raise ValueError("task id outside the router's task range")
    x = (features - model.feature_mean) / model.feature_scale
    return np.hstack([x, model.task_embeddings[task_ids]])


def forward_batch(model: RouterModel, task_ids, features):
    """Returns (probabilities (N, K), hidden (N, H), logits (N, K))."""
    x = _inputs(model, task_ids, features)
    hidden = np.maximum(x @ model.w_hidden + model.b_hidden, 0.0)
    logits = hidden @ model.w_out + model.b_out
    return softmax(logits, axis=1), hidden, logits


def forward(model: RouterModel, query: Query) -> tuple[np.ndarray, np.ndarray]:
    probs, hidden, _ = forward_batch(model, [query.task_id], [query.features])
    return probs[0], hidden[0]


def predict_tiers(model: RouterModel, queries: Workload) -> np.ndarray:
    """Tier ids 1..K; argmax over logits, first (cheapest) tier wins ties."""
    _, _, logits = forward_batch(model, queries.task_id, queries.features)
    return logits.argmax(axis=1) + 1


def predict_tier(model: RouterModel, query: Query) -> int:
    _, _, logits = forward_batch(model, [query.task_id], [query.features])
    return int(logits[0].argmax()) + 1


def tier_from_probabilities(probs: Sequence[float]) -> int:
    return int(np.argmax(probs)) + 1


@dataclass
class LabeledSet:
    """Training examples: tier_label is the cheapest passing tier (1..K), with
    queries no tier can satisfy assigned K; pass_matrix holds all-pairs outcomes."""

    task_id: np.ndarray
    features: np.ndarray
    tier_label: np.ndarray
    pass_matrix: np.ndarray
    none_label: np.ndarray  # True where no tier passed

    def __len__(self) -> int:
        return len(self.task_id)

    def take(self, idx) -> "LabeledSet":
        return LabeledSet(self.task_id[idx], self.features[idx], self.tier_label[idx],
                          self.pass_matrix[idx], self.none_label[idx])


def label_examples(queries: Workload, portfolio: Sequence[TierSpec],
                   patches: Sequence[CapabilityPatch], seed: int,
                   taus: np.ndarray) -> LabeledSet:
    pm = pass_matrix(queries, portfolio, patches, seed, taus)
    none = ~pm.any(axis=1)
    label = np.where(none, len(portfolio), pm.argmax(axis=1) + 1)
    return LabeledSet(queries.task_id.copy(), queries.features.copy(), label, pm, none)


def composite_loss(model: RouterModel, batch: LabeledSet, config: TrainingConfig,
                   tier_costs: Sequence[float]) -> tuple[float, np.ndarray]:
    """Mean of CE + lambda_c * E_p[c_k / c_K] + lambda_q * E_p[fail_k], with the
    exact gradient as a flat vector in `RouterModel.flat()` order."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    n = len(batch)
    x = _inputs(model, batch.task_id, batch.features)
    pre = x @ model.w_hidden + model.b_hidden
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ model.w_out + model.b_out
    logp = log_softmax(logits, axis=1)
    p = np.exp(logp)

    costs = np.asarray(tier_costs, dtype=float)
    penalty = (config.lambda_cost * (costs / costs[-1]))[None, :] \
        + config.lambda_quality * (1.0 - batch.pass_matrix)
    rows = np.arange(n)
    ce = -logp[rows, batch.tier_label - 1]
    expected_pen = (p * penalty).sum(axis=1)
    loss = float(np.mean(ce + expected_pen))

    d_logits = p * (penalty - expected_pen[:, None])
    d_logits[rows, batch.tier_label - 1] -= 1.0
    d_logits += p
    d_logits /= n

    g_w_out = hidden.T @ d_logits
    g_b_out = d_logits.sum(axis=0)
    d_pre = (d_logits @ model.w_out.T) * (pre > 0)
    g_w_hidden = x.T @ d_pre
    g_b_hidden = d_pre.sum(axis=0)
    d_x = d_pre @ model.w_hidden.T
    g_emb = np.zeros_like(model.task_embeddings)
    np.add.at(g_emb, batch.task_id, d_x[:, model.feature_dim:])
    grad = np.concatenate([g_emb.ravel(), g_w_hidden.ravel(), g_b_hidden,
                           g_w_out.ravel(), g_b_out])
    return loss, grad


def train(examples: LabeledSet, config: TrainingConfig, tier_costs: Sequence[float],
          n_tasks: int | None = None) -> RouterModel:
    """Mini-batch gradient descent with early stopping on a held-out split."""
    if len(examples) == 0:
        raise ValueError("empty training set")
    n_tasks = int(examples.task_id.max()) + 1 if n_tasks is None else n_tasks
    missing = set(range(n_tasks)) - set(np.unique(examples.task_id).tolist())
    if missing:
        raise ValueError(f"training set has no examples for tasks {sorted(missing)}")
    rng = np.random.default_rng([config.seed, 0x7EA1])
    order = rng.permutation(len(examples))
    n_val = max(1, int(round(config.val_fraction * len(examples))))
    if n_val >= len(examples):
        n_val = 0
    val = examples.take(order[:n_val]) if n_val else examples
    tr = examples.take(order[n_val:]) if n_val else examples

    mean = tr.features.mean(axis=0)
    scale = tr.features.std(axis=0)
    scale[scale == 0] = 1.0
    model = init_model(n_tasks, examples.features.shape[1], len(tier_costs), config, mean, scale)
    theta = model.flat()

    best_theta, best_val = theta.copy(), composite_loss(model, val, config, tier_costs)[0]
    stale = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(len(tr))
        for start in range(0, len(tr), config.batch_size):
            batch = tr.take(perm[start:start + config.batch_size])
            _, g = composite_loss(model.with_flat(theta), batch, config, tier_costs)
            theta -= config.learning_rate * g
        v = composite_loss(model.with_flat(theta), val, config, tier_costs)[0]
        if v < best_val - 1e-12:
            best_val, best_theta, stale = v, theta.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                log.debug("early stop at epoch %d (val %.6f)", epoch, best_val)
                break
    return model.with_flat(best_theta)


def accuracy(model: RouterModel, examples: LabeledSet) -> float:
    _, _, logits = forward_batch(model, examples.task_id, examples.features)
    return float(np.mean(logits.argmax(axis=1) + 1 == examples.tier_label))


def save_checkpoint(model: RouterModel, path: str | Path) -> None:
    """Flat text: one header line per tensor (name + shape) then repr'd values,
    which round-trip float64 exactly."""
    lines = [CHECKPOINT_MAGIC]
    for name in PARAMS + ("feature_mean", "feature_scale"):
        arr = np.atleast_1d(getattr(model, name))
        lines.append(f"{name} {' '.join(str(s) for s in arr.shape)}")
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> RouterModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a router checkpoint")
    arrays = {}
    for head, body in zip(lines[1::2], lines[2::2]):
        name, *shape = head.split()
        vals = np.array([float(v) for v in body.split()])
        arrays[name] = vals.reshape([int(s) for s in shape])
    return RouterModel(**arrays)

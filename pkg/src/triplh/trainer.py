"""AdamW training loop with uniform negative sampling and early stopping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import InteractionDataset
from .evaluation import hit_rate, ndcg, rank_all
from .model import EmbeddingTable, Gradients, ModelConfig, TripletBatch, init_table, loss_and_grads

log = logging.getLogger(__name__)

MAX_REJECTIONS = 100


class TrainingDiverged(RuntimeError):
    """Non-finite loss, gradient or parameter; carries the last good table."""

    def __init__(self, message: str, table: EmbeddingTable, history: list):
        super().__init__(message)
        self.table = table
        self.history = history


@dataclass
class TrainSchedule:
    max_epochs: int = 100
    batch_size: int = 1024
    negatives_per_positive: int = 1
    patience: int = 10
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be at least 1")
        if self.patience < 0:
            raise ValueError("patience must be nonnegative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        self.patience = min(self.patience, self.max_epochs)


# ---------------------------------------------------------------------------
# optimizer


def adamw_update(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update; returns ``(param, m, v)``.

    ``step`` is the 1-based count used for bias correction.
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param = param - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)
    return param, m, v


@dataclass
class OptimizerState:
    m_users: np.ndarray
    v_users: np.ndarray
    m_items: np.ndarray
    v_items: np.ndarray
    m_margin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    v_margin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    step_count: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_table(cls, table: EmbeddingTable, **hyper) -> "OptimizerState":
        return cls(
            np.zeros_like(table.users),
            np.zeros_like(table.users),
            np.zeros_like(table.items),
            np.zeros_like(table.items),
            **hyper,
        )


class NonFiniteGradient(FloatingPointError):
    pass


def adamw_step(state: OptimizerState, table: EmbeddingTable, grads: Gradients) -> None:
    """Apply one AdamW step in place to the rows present in ``grads``.

    Moments of rows absent from the batch are left untouched (lazy update).
    The margin scalars never receive weight decay.
    """
    if not grads.is_finite():
        bad_users = np.flatnonzero(~np.all(np.isfinite(grads.user_grads), axis=1))
        bad_items = np.flatnonzero(~np.all(np.isfinite(grads.item_grads), axis=1))
        raise NonFiniteGradient(
            f"non-finite gradient at step {state.step_count + 1}: "
            f"user rows {grads.user_rows[bad_users][:10].tolist()}, "
            f"item rows {grads.item_rows[bad_items][:10].tolist()}, "
            f"margin grads ({grads.margin_a}, {grads.margin_b})"
        )
    state.step_count += 1
    hyper = dict(
        step=state.step_count, lr=state.learning_rate,
        beta1=state.beta1, beta2=state.beta2, eps=state.epsilon,
    )
    for params, m, v, rows, g in (
        (table.users, state.m_users, state.v_users, grads.user_rows, grads.user_grads),
        (table.items, state.m_items, state.v_items, grads.item_rows, grads.item_grads),
    ):
        params[rows], m[rows], v[rows] = adamw_update(
            params[rows], g, m[rows], v[rows], weight_decay=state.weight_decay, **hyper
        )
    margins = np.array([table.margin_a, table.margin_b])
    margins, state.m_margin, state.v_margin = adamw_update(
        margins, np.array([grads.margin_a, grads.margin_b]),
        state.m_margin, state.v_margin, weight_decay=0.0, **hyper,
    )
    table.margin_a, table.margin_b = float(margins[0]), float(margins[1])


# ---------------------------------------------------------------------------
# negative sampling


class NegativeSampler:
    """Uniform sampling of items outside each user's training set."""

    def __init__(self, dataset: InteractionDataset):
        self.n_items = dataset.n_items
        users, items = dataset.train_pairs
        self._keys = np.unique(users * self.n_items + items)
        self._counts = np.bincount(users, minlength=dataset.n_users)
        self._dataset = dataset

    def _seen(self, users, items) -> np.ndarray:
        keys = users * self.n_items + items
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys if len(self._keys) else np.zeros(len(keys), bool)

    def sample(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        full = self._counts[users] >= self.n_items
        if np.any(full):
            raise ValueError(
                f"user {int(users[full][0])} has interacted with every item; no negatives exist"
            )
        out = rng.integers(self.n_items, size=len(users))
        pending = np.flatnonzero(self._seen(users, out))
        for _ in range(MAX_REJECTIONS - 1):
            if len(pending) == 0:
                break
            out[pending] = rng.integers(self.n_items, size=len(pending))
            pending = pending[self._seen(users[pending], out[pending])]
        for i in pending:
            complement = np.setdiff1d(
                np.arange(self.n_items), self._dataset.train_items(int(users[i])), assume_unique=True
            )
            out[i] = complement[rng.integers(len(complement))]
        return out


def sample_negatives(dataset: InteractionDataset, user: int, count: int, rng) -> np.ndarray:
    """``count`` uniform draws from items not in ``user``'s training set."""
    return NegativeSampler(dataset).sample(np.full(count, user, dtype=np.int64), rng)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    table: EmbeddingTable
    history: list[dict]
    best_epoch: int


def validation_metrics(table, cfg, dataset) -> tuple[float, float]:
    results = rank_all(table, cfg, dataset, target="validation", k=10, threads=0)
    if len(results) == 0:
        return 0.0, 0.0
    return ndcg(results, 10), hit_rate(results, 10)


def train(
    dataset: InteractionDataset,
    cfg: ModelConfig,
    schedule: TrainSchedule,
    log_path: Optional[str] = None,
    eval_fn=validation_metrics,
) -> TrainResult:
    """Train ``cfg.model_kind`` on the training split and keep the best epoch.

    Each epoch shuffles all training interactions, pairs every positive with
    ``negatives_per_positive`` sampled negatives and takes one AdamW step per
    batch. The table with the highest validation NDCG@10 is returned.
    """
    table = init_table(cfg, dataset.n_users, dataset.n_items, schedule.seed)
    history: list[dict] = []
    if schedule.max_epochs == 0:
        return TrainResult(table, history, 0)

    rng = np.random.default_rng(schedule.seed)
    sampler = NegativeSampler(dataset)
    state = OptimizerState.for_table(
        table,
        learning_rate=schedule.lr,
        weight_decay=schedule.weight_decay,
        beta1=schedule.beta1,
        beta2=schedule.beta2,
        epsilon=schedule.eps,
    )
    train_users, train_items = dataset.train_pairs
    n = len(train_users)
    k = schedule.negatives_per_positive
    best, best_score, best_epoch, stale = table.copy(), -np.inf, 0, 0
    sink = open(log_path, "w") if log_path else None

    try:
        for epoch in range(1, schedule.max_epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(n)
            total, count = 0.0, 0
            for lo in range(0, n, schedule.batch_size):
                idx = order[lo : lo + schedule.batch_size]
                users = np.repeat(train_users[idx], k)
                batch = TripletBatch(users, np.repeat(train_items[idx], k), sampler.sample(users, rng))
                loss, grads = loss_and_grads(table, cfg, batch)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss in epoch {epoch}", best, history)
                try:
                    adamw_step(state, table, grads)
                except NonFiniteGradient as exc:
                    raise TrainingDiverged(str(exc), best, history) from exc
                if not table.is_finite():
                    raise TrainingDiverged(f"non-finite parameters in epoch {epoch}", best, history)
                total += loss * len(idx)
                count += len(idx)

            val_ndcg, val_hr = eval_fn(table, cfg, dataset)
            record = {
                "epoch": epoch,
                "train_loss": total / max(count, 1),
                "val_ndcg10": val_ndcg,
                "val_hr10": val_hr,
                "wall_seconds": time.perf_counter() - start,
            }
            history.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            log.info("epoch %d loss %.5f val ndcg@10 %.4f", epoch, record["train_loss"], val_ndcg)

            if val_ndcg > best_score:
                best, best_score, best_epoch, stale = table.copy(), val_ndcg, epoch, 0
            else:
                stale += 1
                if stale >= schedule.patience:
                    break
    finally:
        if sink:
            sink.close()
    return TrainResult(best, history, best_epoch)

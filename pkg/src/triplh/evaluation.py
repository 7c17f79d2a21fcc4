"""Full-catalog ranking metrics, diversity measures and score diagnostics."""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .data import InteractionDataset
from .model import EmbeddingTable, ModelConfig, pair_scores, score_matrix


class RankResult(NamedTuple):
    user: int
    target_rank: int
    topk_items: np.ndarray


@dataclass
class RankResults:
    """Per-user ranking outcome, stored column-wise.

    ``topk`` rows are sorted by descending score; slots past the number of
    unmasked candidates hold ``-1``.
    """

    users: np.ndarray
    ranks: np.ndarray
    topk: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def __getitem__(self, i: int) -> RankResult:
        return RankResult(int(self.users[i]), int(self.ranks[i]), self.topk[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def worker_threads() -> int:
    """Worker count from ``TRIPLH_THREADS``; 0 or unset means single-threaded."""
    try:
        return max(0, int(os.environ.get("TRIPLH_THREADS", "0")))
    except ValueError:
        return 0


def _rank_chunk(scores: np.ndarray, targets: np.ndarray, k: int):
    rows = np.arange(len(targets))
    target_scores = scores[rows, targets]
    # pessimistic ties: every other item scoring >= the target ranks ahead
    ahead = np.sum(scores >= target_scores[:, None], axis=1) - 1
    ranks = ahead + 1
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    top = np.where(np.isfinite(np.take_along_axis(scores, order, axis=1)), order, -1)
    return ranks, top


def rank_all(
    table: EmbeddingTable,
    cfg: ModelConfig,
    dataset: InteractionDataset,
    target: str = "test",
    k: int = 10,
    users: Optional[np.ndarray] = None,
    chunk_size: int = 512,
    threads: Optional[int] = None,
) -> RankResults:
    """Rank each user's held-out item against the whole catalog.

    Training items are always masked out; for ``target="test"`` the
    validation item is masked too. Users without a held-out item are skipped.
    """
    if target == "test":
        targets_all = dataset.test_items
    elif target == "validation":
        targets_all = dataset.validation_items
    else:
        raise ValueError(f"target must be 'test' or 'validation', got {target!r}")
    if users is None:
        users = np.flatnonzero(targets_all >= 0)
    users = np.asarray(users, dtype=np.int64)
    users = users[targets_all[users] >= 0]
    indptr, train_items = dataset.train_csr
    k = min(k, dataset.n_items)

    def work(chunk: np.ndarray):
        scores = score_matrix(table, cfg, chunk)
        counts = indptr[chunk + 1] - indptr[chunk]
        rows = np.repeat(np.arange(len(chunk)), counts)
        cols = np.concatenate([train_items[indptr[u] : indptr[u + 1]] for u in chunk]) if len(chunk) else []
        scores[rows, np.asarray(cols, dtype=np.int64)] = -np.inf
        if target == "test":
            val = dataset.validation_items[chunk]
            has = val >= 0
            scores[np.flatnonzero(has), val[has]] = -np.inf
        return _rank_chunk(scores, targets_all[chunk], k)

    chunks = [users[i : i + chunk_size] for i in range(0, len(users), chunk_size)]
    n_threads = worker_threads() if threads is None else threads
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    if not parts:
        return RankResults(users, np.zeros(0, dtype=np.int64), np.zeros((0, k), dtype=np.int64))
    ranks = np.concatenate([p[0] for p in parts])
    topk = np.concatenate([p[1] for p in parts])
    return RankResults(users, ranks.astype(np.int64), topk.astype(np.int64))


def _ranks(results) -> np.ndarray:
    ranks = results.ranks if isinstance(results, RankResults) else np.array([r.target_rank for r in results])
    if len(ranks) == 0:
        raise ValueError("cannot compute a metric over zero users")
    return ranks


def hit_rate(results, k: int) -> float:
    return float(np.mean(_ranks(results) <= k))


def ndcg(results, k: int) -> float:
    """Single-target NDCG: ``1/log2(rank + 1)`` inside the top ``k``, else 0."""
    ranks = _ranks(results)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gains))


def _topk(results, k: int) -> np.ndarray:
    top = results.topk if isinstance(results, RankResults) else np.array([r.topk_items for r in results])
    return np.asarray(top)[:, :k]


def coverage(results, n_items: int, k: int = 10) -> float:
    """Share of the catalog that appears in at least one top-``k`` list."""
    top = _topk(results, k)
    return len(np.unique(top[top >= 0])) / n_items


def popularity_bins(popularity: np.ndarray, head: float = 0.2, tail: float = 0.2) -> np.ndarray:
    """Label items 0 (head), 1 (medium) or 2 (tail) by cumulative popularity mass.

    Items are ordered by descending popularity; an item is head while the
    mass accumulated before it is below ``head`` and tail once that mass
    reaches ``1 - tail``. Unpopular items therefore always land in the tail.
    """
    popularity = np.asarray(popularity, dtype=np.float64)
    total = popularity.sum()
    order = np.argsort(-popularity, kind="stable")
    if total <= 0:
        return np.full(len(popularity), 2, dtype=np.int8)
    before = np.concatenate([[0.0], np.cumsum(popularity[order])[:-1]]) / total
    labels = np.ones(len(popularity), dtype=np.int8)
    labels[order[before < head]] = 0
    labels[order[before >= 1.0 - tail]] = 2
    return labels


def popularity_shares(
    results, dataset: InteractionDataset, k: int = 10, head: float = 0.2, tail: float = 0.2
) -> dict:
    """Fraction of recommended slots falling in the head/medium/tail bins."""
    top = _topk(results, k)
    recommended = top[top >= 0]
    if recommended.size == 0:
        raise ValueError("no recommendations to bin")
    labels = popularity_bins(dataset.item_popularity, head, tail)[recommended]
    counts = np.bincount(labels, minlength=3) / recommended.size
    return {"head": float(counts[0]), "medium": float(counts[1]), "tail": float(counts[2])}


@dataclass
class ScoreHistogram:
    edges: np.ndarray
    pos_counts: np.ndarray
    neg_counts: np.ndarray
    separation: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "pos_count", "neg_count"])
            for i in range(len(self.pos_counts)):
                writer.writerow(
                    [repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                     int(self.pos_counts[i]), int(self.neg_counts[i])]
                )


def separation_statistic(pos: np.ndarray, neg: np.ndarray) -> float:
    """Difference of means over the pooled standard deviation."""
    diff = float(np.mean(pos) - np.mean(neg))
    pooled = float(np.sqrt(0.5 * (np.var(pos) + np.var(neg))))
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else float(np.sign(diff) * np.inf)
    return diff / pooled


def histogram_from_scores(pos: np.ndarray, neg: np.ndarray, bins: int = 50) -> ScoreHistogram:
    pooled = np.concatenate([pos, neg])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    pos_counts, _ = np.histogram(pos, edges)
    neg_counts, _ = np.histogram(neg, edges)
    return ScoreHistogram(edges, pos_counts, neg_counts, separation_statistic(pos, neg))


def score_histogram(
    table: EmbeddingTable,
    cfg: ModelConfig,
    dataset: InteractionDataset,
    bins: int = 50,
    seed: int = 0,
) -> ScoreHistogram:
    """Histograms of held-out positive scores and one random negative per user.

    Negatives are drawn uniformly from items the user never interacted with.
    """
    users = np.flatnonzero(dataset.test_items >= 0)
    if len(users) == 0:
        raise ValueError("dataset has no test interactions")
    seen = set(zip(dataset.users.tolist(), dataset.items.tolist()))
    rng = np.random.default_rng(seed)
    negatives = np.empty(len(users), dtype=np.int64)
    for i, u in enumerate(users):
        while True:
            cand = int(rng.integers(dataset.n_items))
            if (int(u), cand) not in seen:
                break
        negatives[i] = cand
    pos, _, _ = pair_scores(cfg, table.users[users], table.items[dataset.test_items[users]])
    neg, _, _ = pair_scores(cfg, table.users[users], table.items[negatives])
    return histogram_from_scores(pos, neg, bins)


@dataclass
class EvalReport:
    hr5: float
    hr10: float
    ndcg5: float
    ndcg10: float
    n_users: int
    coverage10: Optional[float] = None
    popularity_shares: Optional[dict] = None
    latency: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def scoring_latency(table: EmbeddingTable, cfg: ModelConfig, users: np.ndarray, chunk_size: int = 256) -> dict:
    """Mean and p95 nanoseconds per user-item score over full-catalog chunks."""
    samples = []
    for lo in range(0, len(users), chunk_size):
        chunk = users[lo : lo + chunk_size]
        start = time.perf_counter_ns()
        score_matrix(table, cfg, chunk)
        samples.append((time.perf_counter_ns() - start) / (len(chunk) * table.n_items))
    if not samples:
        return {}
    return {"mean_ns": float(np.mean(samples)), "p95_ns": float(np.percentile(samples, 95))}


def evaluate(
    table: EmbeddingTable,
    cfg: ModelConfig,
    dataset: InteractionDataset,
    target: str = "test",
    with_coverage: bool = False,
) -> tuple[EvalReport, RankResults]:
    results = rank_all(table, cfg, dataset, target=target, k=10)
    report = EvalReport(
        hr5=hit_rate(results, 5),
        hr10=hit_rate(results, 10),
        ndcg5=ndcg(results, 5),
        ndcg10=ndcg(results, 10),
        n_users=len(results),
    )
    report.latency = {cfg.model_kind.geometry: scoring_latency(table, cfg, results.users)}
    if with_coverage:
        report.coverage10 = coverage(results, dataset.n_items, 10)
        report.popularity_shares = popularity_shares(results, dataset, 10)
    return report, results

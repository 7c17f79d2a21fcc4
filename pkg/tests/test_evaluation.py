import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_ranks, random_table
from triplh.data import RawInteraction, build_dataset
from triplh.evaluation import (
    RankResults,
    _rank_chunk,
    coverage,
    evaluate,
    histogram_from_scores,
    hit_rate,
    ndcg,
    popularity_bins,
    popularity_shares,
    rank_all,
    score_histogram,
    separation_statistic,
)
from triplh.model import EmbeddingTable, ModelConfig, ModelKind, score_matrix
from triplh.trainer import TrainSchedule, train


def results_from_ranks(ranks, k=10):
    ranks = np.asarray(ranks)
    return RankResults(np.arange(len(ranks)), ranks, np.full((len(ranks), k), -1))


def random_dataset(rng, n_users, n_items, per_user=(3, 9)):
    records = []
    t = 0
    for u in range(n_users):
        for i in rng.choice(n_items, size=int(rng.integers(*per_user)), replace=False):
            records.append(RawInteraction(f"u{u}", f"i{i}", 1.0, t))
            t += 1
    # make sure every item token exists
    for i in range(n_items):
        records.append(RawInteraction("filler", f"i{i}", 1.0, t + i))
    return build_dataset(records)


class TestRanking:
    def test_target_on_top(self):
        ranks, _ = _rank_chunk(np.array([[0.9, 0.5, 0.1]]), np.array([0]), 3)
        assert ranks.tolist() == [1]

    def test_pessimistic_tie(self):
        ranks, _ = _rank_chunk(np.array([[0.9, 0.9, 0.1]]), np.array([0]), 3)
        assert ranks.tolist() == [2]

    def test_topk_padding(self):
        scores = np.array([[0.3, -np.inf, 0.2]])
        _, top = _rank_chunk(scores, np.array([0]), 3)
        assert top.tolist() == [[0, 2, -1]]

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_full_sort(self, seed):
        rng = np.random.default_rng(seed)
        ds = random_dataset(rng, 12, 30)
        # integer-valued embeddings force plenty of exact ties
        table = EmbeddingTable(rng.integers(-2, 3, (ds.n_users, 3)).astype(float),
                               rng.integers(-2, 3, (ds.n_items, 3)).astype(float))
        cfg = ModelConfig("MF", dim=3)
        scores = score_matrix(table, cfg).tolist()
        for target in ("test", "validation"):
            results = rank_all(table, cfg, ds, target=target, chunk_size=5)
            oracle = brute_force_ranks(scores, ds, target)
            assert sorted(oracle) == results.users.tolist()
            for r in results:
                rank, top = oracle[r.user]
                assert r.target_rank == rank
                assert [j for j in r.topk_items.tolist() if j >= 0] == top

    def test_masking(self, rng):
        ds = random_dataset(rng, 10, 25)
        table = random_table(rng, ds.n_users, ds.n_items, 4)
        results = rank_all(table, ModelConfig("TriplH", dim=4), ds)
        for r in results:
            shown = set(r.topk_items.tolist())
            assert not shown & set(ds.train_items(r.user).tolist())
            assert ds.validation_items[r.user] not in shown

    def test_threads_agree(self, rng, monkeypatch):
        ds = random_dataset(rng, 40, 30)
        table = random_table(rng, ds.n_users, ds.n_items, 4)
        cfg = ModelConfig("HyperBPR", dim=4)
        serial = rank_all(table, cfg, ds, chunk_size=4, threads=0)
        monkeypatch.setenv("TRIPLH_THREADS", "4")
        parallel = rank_all(table, cfg, ds, chunk_size=4)
        np.testing.assert_array_equal(serial.ranks, parallel.ranks)
        np.testing.assert_array_equal(serial.topk, parallel.topk)

    def test_bad_target(self, planted):
        table = random_table(np.random.default_rng(0), planted[0].n_users, planted[0].n_items, 2)
        with pytest.raises(ValueError):
            rank_all(table, ModelConfig("MF", dim=2), planted[0], target="train")


class TestMetrics:
    def test_perfect(self):
        res = results_from_ranks([1, 1, 1])
        assert hit_rate(res, 5) == 1.0 and ndcg(res, 5) == 1.0

    def test_rank_ten(self):
        res = results_from_ranks([10])
        assert hit_rate(res, 10) == 1.0
        assert ndcg(res, 10) == pytest.approx(0.289065, abs=1e-6)

    def test_rank_eleven(self):
        res = results_from_ranks([11])
        assert hit_rate(res, 10) == 0.0 and ndcg(res, 10) == 0.0

    def test_empty_is_error(self):
        with pytest.raises(ValueError):
            hit_rate(results_from_ranks([]), 10)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(1, 60), min_size=1, max_size=40))
    def test_monotone_and_bounded(self, ranks):
        res = results_from_ranks(ranks)
        assert hit_rate(res, 5) <= hit_rate(res, 10)
        assert ndcg(res, 5) <= ndcg(res, 10)
        for k in (5, 10):
            assert ndcg(res, k) <= hit_rate(res, k)
        oracle = sum(1 / math.log2(r + 1) for r in ranks if r <= 10) / len(ranks)
        assert ndcg(res, 10) == pytest.approx(oracle, rel=1e-12)


class TestCoverage:
    def test_shared_top10(self):
        top = np.tile(np.arange(10), (7, 1))
        res = RankResults(np.arange(7), np.ones(7, int), top)
        assert coverage(res, 100) == 0.10

    def test_full(self):
        top = np.arange(20).reshape(2, 10)
        assert coverage(RankResults(np.arange(2), np.ones(2, int), top), 20) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_set_union_and_bounds(self, seed):
        rng = np.random.default_rng(seed)
        n_items, n_users = int(rng.integers(10, 50)), int(rng.integers(1, 8))
        top = np.array([rng.choice(n_items, 10, replace=False) for _ in range(n_users)])
        res = RankResults(np.arange(n_users), np.ones(n_users, int), top)
        union = set()
        for row in top.tolist():
            union.update(row)
        value = coverage(res, n_items)
        assert value == len(union) / n_items
        assert 10 / n_items <= value <= min(1.0, 10 * n_users / n_items)


class TestPopularity:
    def test_bins_by_mass(self):
        pop = np.array([50, 20, 10, 10, 5, 3, 1, 1, 0, 0])
        labels = popularity_bins(pop)
        # mass before each item: 0, .5, .7, .8, .9, ...
        assert labels.tolist() == [0, 1, 1, 2, 2, 2, 2, 2, 2, 2]

    def test_single_most_popular(self, planted):
        ds = planted[0]
        best = int(np.argmax(ds.item_popularity))
        top = np.full((5, 10), best)
        shares = popularity_shares(RankResults(np.arange(5), np.ones(5, int), top), ds)
        assert shares["head"] == 1.0

    def test_uniform_catalog_matches_bin_sizes(self):
        n_items = 1000
        records = [RawInteraction(f"u{i % 7}", f"i{i}", 1.0, i) for i in range(n_items)]
        ds = build_dataset(records)
        ds.__dict__["item_popularity"] = np.ones(n_items, dtype=np.int64)
        rng = np.random.default_rng(0)
        top = rng.integers(n_items, size=(5000, 10))
        shares = popularity_shares(RankResults(np.arange(5000), np.ones(5000, int), top), ds)
        assert shares["head"] == pytest.approx(0.2, abs=0.01)
        assert shares["medium"] == pytest.approx(0.6, abs=0.01)
        assert shares["tail"] == pytest.approx(0.2, abs=0.01)
        assert sum(shares.values()) == pytest.approx(1.0, abs=1e-9)

    def test_empty_is_error(self, planted):
        res = RankResults(np.arange(2), np.ones(2, int), np.full((2, 10), -1))
        with pytest.raises(ValueError):
            popularity_shares(res, planted[0])


class TestHistogram:
    def test_identical_distributions(self):
        x = np.linspace(-1, 1, 101)
        assert separation_statistic(x, x.copy()) == 0.0

    def test_disjoint_supports(self):
        hist = histogram_from_scores(np.linspace(2, 3, 50), np.linspace(-1, 0, 50), bins=10)
        pos_bins = np.flatnonzero(hist.pos_counts)
        neg_bins = np.flatnonzero(hist.neg_counts)
        assert neg_bins.max() < pos_bins.min()
        assert hist.separation > 0

    def test_csv(self, tmp_path):
        hist = histogram_from_scores(np.array([0.0, 1.0]), np.array([0.5]), bins=4)
        path = tmp_path / "h.csv"
        hist.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "bin_left,bin_right,pos_count,neg_count"
        assert len(lines) == 5
        assert sum(int(line.split(",")[2]) for line in lines[1:]) == 2

    def test_trained_planted_model_separates(self, planted):
        ds = planted[0]
        cfg = ModelConfig("TriplH", dim=8, init_scale=0.1)
        result = train(ds, cfg, TrainSchedule(max_epochs=30, batch_size=64, lr=1e-2, seed=0))
        hist = score_histogram(result.table, cfg, ds)
        assert hist.pos_counts.sum() == hist.neg_counts.sum() == ds.n_users
        assert hist.separation > 0


class TestEvaluate:
    def test_report_fields(self, planted, rng):
        ds = planted[0]
        table = random_table(rng, ds.n_users, ds.n_items, 4, scale=0.1)
        report, results = evaluate(table, ModelConfig("TriplH", dim=4), ds, with_coverage=True)
        d = report.to_dict()
        assert {"hr5", "hr10", "ndcg5", "ndcg10", "coverage10", "popularity_shares", "latency"} <= set(d)
        assert report.hr5 <= report.hr10 and report.ndcg10 <= report.hr10
        assert set(report.latency["lorentz"]) == {"mean_ns", "p95_ns"}
        assert report.n_users == len(results) == ds.n_users

    def test_without_coverage(self, planted, rng):
        ds = planted[0]
        table = random_table(rng, ds.n_users, ds.n_items, 4)
        report, _ = evaluate(table, ModelConfig(ModelKind.MF, dim=4), ds)
        assert "coverage10" not in report.to_dict()

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from manifoldmind import metrics as M


class TestRanking:
    def test_rank_one(self):
        assert M.ndcg_recall_at_k([5, 1, 2], 5) == (1.0, 1.0)

    def test_rank_three(self):
        ndcg, recall = M.ndcg_recall_at_k([7, 8, 5, 9], 5)
        assert ndcg == 0.5
        assert recall == 1.0

    def test_rank_eleven(self):
        ranked = list(range(20))
        assert M.ndcg_recall_at_k(ranked, 10, k=10) == (0.0, 0.0)

    def test_missing_positive(self):
        with pytest.raises(M.ProtocolError):
            M.ndcg_recall_at_k([1, 2, 3], 4)

    def test_monotone(self):
        items = list(range(101))
        prev = -1.0
        for rank in range(100, -1, -1):
            ranked = [i for i in items if i != 0]
            ranked.insert(rank, 0)
            ndcg, _ = M.ndcg_recall_at_k(ranked, 0)
            assert ndcg >= prev
            prev = ndcg


class TestECE:
    def test_perfect(self):
        assert M.ece([1.0] * 5, [1] * 5) == 0.0

    def test_worst(self):
        assert M.ece([1.0] * 5, [0] * 5) == 1.0

    def test_two_bins(self):
        assert M.ece([0.95, 0.05], [1, 1]) == pytest.approx(0.5, abs=1e-15)

    def test_errors(self):
        with pytest.raises(M.ProtocolError):
            M.ece([], [])
        with pytest.raises(M.ProtocolError):
            M.ece([0.1, 0.2], [1])

    def test_calibrated_stream(self):
        rng = np.random.default_rng(0)
        conf = rng.uniform(size=100_000)
        hits = (rng.uniform(size=100_000) < conf).astype(int)
        assert M.ece(conf, hits) <= 0.02

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        conf = rng.uniform(size=500)
        hits = rng.integers(0, 2, size=500)
        perm = rng.permutation(500)
        assert M.ece(conf, hits) == pytest.approx(M.ece(conf[perm], hits[perm]), abs=1e-12)


TAGS = {0: {"a"}, 1: {"a"}, 2: {"b"}, 3: {"c"}, 4: {"d"}, 5: set()}


class TestDiversity:
    def test_full_coverage(self):
        assert M.diversity_at_k([0, 2, 3, 4], [0, 2, 3, 4], TAGS) == 1.0

    def test_quarter(self):
        assert M.diversity_at_k([0, 1], [0, 1, 2, 3, 4], TAGS) == 0.25

    def test_untagged(self):
        assert M.diversity_at_k([5], [0, 5], TAGS) == 0.0

    def test_absolute_mode(self):
        assert M.diversity_at_k([0, 2, 3], [0, 2, 3, 4], TAGS, normalize=False) == 3.0


class TestTILS:
    def test_identical(self):
        assert M.tils_at_k([0, 1], TAGS) == 1.0

    def test_disjoint(self):
        assert M.tils_at_k([0, 2, 3, 4], TAGS) == 0.0

    def test_jaccard_example(self):
        tags = {0: {"a", "b"}, 1: {"b", "c"}}
        assert M.tils_at_k([0, 1], tags) == pytest.approx(1 / 3, abs=1e-15)

    def test_empty_pairs_are_redundant(self):
        assert M.tils_at_k([5, 5], TAGS) == 1.0

    def test_too_short(self):
        with pytest.raises(M.ProtocolError):
            M.tils_at_k([0], TAGS)

    @given(st.permutations([0, 1, 2, 3, 4]))
    def test_order_invariant(self, order):
        assert M.tils_at_k(order, TAGS) == pytest.approx(M.tils_at_k([0, 1, 2, 3, 4], TAGS), abs=1e-15)


class TestTraceStats:
    def test_all_reachable(self):
        traces = [(0, 0.9, [0]), (1, 0.5, [2, 1])]
        item_tags = {0: {0}, 1: {1}}
        s = M.trace_stats(traces, item_tags)
        assert s["coverage_pct"] == 100.0
        assert s["alignment_pct"] == 100.0
        assert s["mean_confidence"] == pytest.approx(0.7)

    def test_no_path_only_in_coverage(self):
        traces = [(0, 0.8, [0]), (1, 0.0, None)]
        s = M.trace_stats(traces, {0: {0}, 1: {1}})
        assert s["coverage_pct"] == 50.0
        assert s["alignment_pct"] == 100.0
        assert s["mean_confidence"] == 0.8

    def test_misaligned(self):
        s = M.trace_stats([(0, 0.8, [3])], {0: {0}})
        assert s["alignment_pct"] == 0.0

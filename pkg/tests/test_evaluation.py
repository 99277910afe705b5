"""Recall@k, popularity correlation and retrievers."""

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebrkit.evaluation import (
    EmbeddingRetriever,
    RandomRetriever,
    pearson,
    popularity_correlation,
    recall_at_k,
    recall_from_sets,
    summary_row,
    top_by_score,
    write_per_member_csv,
    write_summary_csv,
    SUMMARY_COLUMNS,
)

from oracles import two_pass_pearson


class TableScorer:
    def __init__(self, table):
        self.table = table

    def score(self, member_id, item_ids):
        return np.array([self.table[member_id][i] for i in item_ids])


def hypergeom_recall_moments(pool, n, k):
    """Mean and variance of |top-n ∩ random top-k| / n under a uniformly random ranking."""
    mean = k * n / pool
    var = k * (n / pool) * (1 - n / pool) * (pool - k) / (pool - 1)
    return mean / n, var / n**2


class TestRecallFormula:
    def test_superset(self):
        assert recall_from_sets(["a", "b"], ["b", "a"]) == 1.0

    def test_disjoint(self):
        assert recall_from_sets(["a", "b"], ["c", "d"]) == 0.0

    def test_four_of_ten(self):
        s1 = [f"i{j}" for j in range(10)]
        s2 = s1[:4] + [f"x{j}" for j in range(6)]
        assert recall_from_sets(s1, s2) == 0.4

    def test_empty(self):
        with pytest.raises(ValueError):
            recall_from_sets([], ["a"])


class TestRecallAtK:
    def _pools(self, rng, members=5, size=30):
        pools = {f"m{a}": [f"i{j}" for j in rng.choice(200, size, replace=False)] for a in range(members)}
        oracle = TableScorer({m: {i: rng.random() for i in p} for m, p in pools.items()})
        return pools, oracle

    def test_oracle_vs_itself(self):
        pools, oracle = self._pools(np.random.default_rng(0))
        assert recall_at_k(pools, oracle, oracle, 10, 10).mean == 1.0

    def test_inverted_oracle(self):
        pools, oracle = self._pools(np.random.default_rng(1))
        inv = TableScorer({m: {i: -s for i, s in t.items()} for m, t in oracle.table.items()})
        assert recall_at_k(pools, oracle, inv, 10, 10).mean == 0.0

    def test_k_less_than_n(self):
        pools, oracle = self._pools(np.random.default_rng(2))
        assert recall_at_k(pools, oracle, oracle, 10, 4).mean == pytest.approx(0.4)

    def test_rerank_top_n_reading(self):
        pools, oracle = self._pools(np.random.default_rng(3))
        anything = RandomRetriever(8, seed=1)
        assert recall_at_k(pools, oracle, anything, 10, 5, rerank_top_n=True).mean == pytest.approx(0.5)

    def test_empty_pool_skipped(self):
        pools, oracle = self._pools(np.random.default_rng(4))
        pools["zz"] = []
        rep = recall_at_k(pools, oracle, oracle, 10, 10)
        assert rep.skipped == ["zz"] and rep.num_members == 5

    def test_bad_k(self):
        with pytest.raises(ValueError):
            recall_at_k({}, None, None, 5, 6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_pool_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        pools, oracle = self._pools(rng, members=3)
        retr = RandomRetriever(8, seed=seed % 97)
        shuffled = {m: list(rng.permutation(p)) for m, p in pools.items()}
        assert recall_at_k(pools, oracle, retr, 10, 10).per_member == recall_at_k(shuffled, oracle, retr, 10, 10).per_member

    def test_random_retriever_expectation(self):
        # 20 seeds of 200 members with 100-item pools; compare with the hypergeometric mean
        pool_size, n, k, members = 100, 10, 10, 200
        mu, var = hypergeom_recall_moments(pool_size, n, k)
        rng = np.random.default_rng(0)
        pools, oracle = self._pools(rng, members=members, size=pool_size)
        means = [recall_at_k(pools, oracle, RandomRetriever(16, seed=s), n, k).mean for s in range(20)]
        assert mu == pytest.approx(k / pool_size)
        sigma = np.sqrt(var / (members * len(means)))
        assert abs(np.mean(means) - mu) < 3 * sigma


class TestTopByScore:
    def test_ties_by_id(self):
        assert top_by_score(["c", "a", "b"], np.array([1.0, 1.0, 2.0]), 3) == ["b", "a", "c"]


class TestPearson:
    def test_identity_and_negation(self):
        pop = [0.1, 0.5, 0.2, 0.9]
        assert pearson(pop, pop) == pytest.approx(1.0)
        assert pearson(pop, [-p for p in pop]) == pytest.approx(-1.0)

    def test_oracle(self):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal(50), rng.standard_normal(50)
        assert abs(pearson(x, y) - two_pass_pearson(list(x), list(y))) < 1e-10

    def test_degenerate(self):
        with pytest.raises(ValueError):
            pearson([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2])

    def test_popularity_correlation(self):
        pairs = [("m", f"i{j}") for j in range(6)]
        pop = {f"i{j}": float(j) ** 2 for j in range(6)}
        scorer = TableScorer({"m": pop})
        assert popularity_correlation(pairs, scorer, pop) == pytest.approx(1.0)


class TestRetrievers:
    def test_embedding_prefix(self):
        m = {"m": np.array([1.0, 0.0, 5.0])}
        items = {"a": np.array([1.0, 0.0, -5.0]), "b": np.array([0.0, 1.0, 5.0])}
        full = EmbeddingRetriever(m, items).score("m", ["a", "b"])
        pre = EmbeddingRetriever(m, items, dim=2).score("m", ["a", "b"])
        assert full[1] > full[0]
        np.testing.assert_allclose(pre, [1.0, 0.0])

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            EmbeddingRetriever({"m": np.zeros(2)}, {"a": np.ones(2)}).score("m", ["a"])

    def test_random_deterministic(self):
        a = RandomRetriever(8, seed=3).score("m1", ["x", "y"])
        b = RandomRetriever(8, seed=3).score("m1", ["x", "y"])
        c = RandomRetriever(8, seed=4).score("m1", ["x", "y"])
        assert np.array_equal(a, b) and not np.array_equal(a, c)


class TestExport:
    def test_schema(self, tmp_path):
        pools = {"m1": ["a", "b", "c"], "m2": ["a", "b", "c"]}
        oracle = TableScorer({m: {"a": 3, "b": 2, "c": 1} for m in pools})
        rep = recall_at_k(pools, oracle, oracle, 2, 2)
        write_summary_csv([summary_row(rep, 64, 0.5)], tmp_path / "s.csv")
        write_per_member_csv({64: rep}, tmp_path / "p.csv")
        with open(tmp_path / "s.csv") as f:
            rows = list(csv.DictReader(f))
        assert tuple(rows[0]) == SUMMARY_COLUMNS
        assert rows[0]["recall_mean"] == "1.000000" and rows[0]["members"] == "2"
        assert (tmp_path / "p.csv").read_text().splitlines() == ["dim,member_id,recall", "64,m1,1.000000", "64,m2,1.000000"]

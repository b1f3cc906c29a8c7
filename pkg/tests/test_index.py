import numpy as np
import pytest

import oracles
from adapted_retrieval import adapter
from adapted_retrieval import index as ix
from adapted_retrieval.adapter import AdapterConfig, AdapterParams
from adapted_retrieval.errors import (
    CorpusIndexError,
    DegenerateVectorError,
    NoNegativeError,
    StaleIndexError,
)


def make_index(rng, n, d, dup=0):
    C = rng.normal(size=(n, d))
    for _ in range(dup):
        i, j = rng.choice(n, size=2, replace=False)
        C[j] = C[i]
    ids = [f"doc{i:04d}" for i in rng.permutation(n)]
    return ix.CorpusIndex(ids, C)


def rand_params(rng, h, d):
    return AdapterParams(K=rng.normal(size=(h, d)), V=rng.normal(scale=0.5, size=(h, d)))


class TestBaseline:
    def test_self_ranked_first(self, rng):
        index = make_index(rng, 20, 8)
        r = ix.retrieve_baseline(index.raw[7], index, 3)
        assert r.ids[0] == index.ids[7] and r.scores[0] == pytest.approx(1.0, abs=1e-15)

    def test_k_larger_than_corpus(self, rng):
        index = make_index(rng, 6, 4)
        r = ix.retrieve_baseline(rng.normal(size=4), index, 50)
        assert sorted(r.ids) == sorted(index.ids)
        assert list(r.scores) == sorted(r.scores, reverse=True)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        index = make_index(rng, 50, 12, dup=3)
        q = rng.normal(size=12)
        r = ix.retrieve_baseline(q, index, 5)
        expected = oracles.rank(q, index.raw, index.ids, 5)
        assert list(r.ids) == [cid for cid, _ in expected]
        np.testing.assert_allclose(r.scores, [s for _, s in expected], rtol=0, atol=1e-14)

    def test_ties_break_by_id_under_permutation(self, rng):
        v = rng.normal(size=5)
        C = np.vstack([v, v, v, rng.normal(size=5)])
        ids = ["b", "c", "a", "z"]
        for perm in ([0, 1, 2, 3], [3, 2, 1, 0], [1, 3, 0, 2]):
            index = ix.CorpusIndex([ids[p] for p in perm], C[perm])
            assert list(ix.retrieve_baseline(v, index, 3).ids) == ["a", "b", "c"]

    def test_errors(self, rng):
        with pytest.raises(CorpusIndexError):
            ix.retrieve_baseline(np.ones(3), ix.CorpusIndex([], np.empty((0, 3))), 1)
        with pytest.raises(CorpusIndexError):
            ix.CorpusIndex(["a", "a"], rng.normal(size=(2, 3)))
        with pytest.raises(DegenerateVectorError):
            ix.CorpusIndex(["a", "b"], [[1.0, 0.0], [0.0, 0.0]])
        index = make_index(rng, 4, 3)
        with pytest.raises(DegenerateVectorError):
            ix.retrieve_baseline(np.zeros(3), index, 1)

    def test_ranked_list(self, rng):
        index = make_index(rng, 10, 4)
        r = ix.retrieve_baseline(rng.normal(size=4), index, 5, query_id="q1")
        assert r.query_id == "q1" and len(r) == 5
        assert r.truncate(2).ids == r.ids[:2]


class TestAdapted:
    def test_identity_at_init(self, rng):
        index = make_index(rng, 40, 16)
        qp = adapter.init(AdapterConfig(h=4, seed=1), 16)
        cp = adapter.init(AdapterConfig(h=4, seed=2), 16)
        for _ in range(10):
            q = rng.normal(size=16)
            base = ix.retrieve_baseline(q, index, 10)
            assert ix.retrieve_adr(q, qp, index, 10) == base
            assert ix.retrieve_adr_full(q, qp, cp, index, 10) == base

    def test_adr_full_with_identity_corpus_is_adr(self, rng):
        index = make_index(rng, 30, 8)
        qp = rand_params(rng, 3, 8)
        cp = adapter.init(AdapterConfig(h=3, seed=5), 8)
        q = rng.normal(size=8)
        assert ix.retrieve_adr_full(q, qp, cp, index, 7) == ix.retrieve_adr(q, qp, index, 7)

    def test_adr_is_baseline_of_transformed_query(self, rng):
        index = make_index(rng, 30, 8)
        qp = rand_params(rng, 3, 8)
        q = rng.normal(size=8)
        assert ix.retrieve_adr(q, qp, index, 30) == ix.retrieve_baseline(adapter.transform(q, qp), index, 30)
        assert sorted(ix.retrieve_adr(q, qp, index, 30).ids) == sorted(index.ids)

    @pytest.mark.parametrize("seed", range(8))
    def test_adr_full_matches_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        h, d = 3, 10
        index = make_index(rng, 60, d)
        qp, cp = rand_params(rng, h, d), rand_params(rng, h, d)
        q = rng.normal(size=d)
        tq = oracles.transform(q, qp.K, qp.V)
        tc = [oracles.transform(c, cp.K, cp.V) for c in index.raw]
        expected = oracles.rank(tq, tc, index.ids, 8)
        r = ix.retrieve_adr_full(q, qp, cp, index, 8)
        assert list(r.ids) == [cid for cid, _ in expected]
        np.testing.assert_allclose(r.scores, [s for _, s in expected], rtol=0, atol=1e-12)

    def test_stale_index(self, rng):
        index = make_index(rng, 10, 6)
        cp_old, cp_new = rand_params(rng, 2, 6), rand_params(rng, 2, 6)
        qp = rand_params(rng, 2, 6)
        fresh = ix.refresh_adapted(index, cp_old)
        q = rng.normal(size=6)
        ix.retrieve_adr_full(q, qp, cp_old, fresh, 3, allow_recompute=False)
        with pytest.raises(StaleIndexError):
            ix.retrieve_adr_full(q, qp, cp_new, fresh, 3, allow_recompute=False)
        on_demand = ix.retrieve_adr_full(q, qp, cp_new, fresh, 3)
        assert on_demand == ix.retrieve_adr_full(q, qp, cp_new, ix.refresh_adapted(index, cp_new), 3)

    def test_refresh_does_not_mutate(self, rng):
        index = make_index(rng, 5, 6)
        before = index.raw.tobytes()
        fresh = index.refreshed(rand_params(rng, 2, 6))
        assert index.adapted is None and index.raw.tobytes() == before
        assert fresh.adapted.shape == (5, 6)


class TestHardNegative:
    def test_two_elements(self, rng):
        index = ix.CorpusIndex(["a", "b"], rng.normal(size=(2, 4)))
        assert ix.hard_negative(rng.normal(size=4), {"a"}, None, None, index) == "b"

    def test_at_init_is_top_non_positive(self, rng):
        index = make_index(rng, 30, 8)
        qp = adapter.init(AdapterConfig(h=2), 8)
        q = rng.normal(size=8)
        ranking = ix.retrieve_baseline(q, index, 30).ids
        positives = set(ranking[:2])
        assert ix.hard_negative(q, positives, qp, qp, index) == ranking[2]

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(200 + seed)
        index = make_index(rng, 30, 8)
        qp, cp = rand_params(rng, 2, 8), rand_params(rng, 2, 8)
        q = rng.normal(size=8)
        positives = set(rng.choice(index.ids, size=3, replace=False))
        tq = oracles.transform(q, qp.K, qp.V)
        tc = [oracles.transform(c, cp.K, cp.V) for c in index.raw]
        assert ix.hard_negative(q, positives, qp, cp, index) == oracles.hard_negative(tq, tc, index.ids, positives)

    def test_all_positive(self, rng):
        index = ix.CorpusIndex(["a", "b"], rng.normal(size=(2, 4)))
        with pytest.raises(NoNegativeError):
            ix.hard_negative(rng.normal(size=4), {"a", "b"}, None, None, index)

    def test_batch_agrees_with_single(self, rng):
        ids = [f"d{i:03d}" for i in range(40)]
        index = ix.CorpusIndex(ids, rng.normal(size=(40, 8)))
        qp, cp = rand_params(rng, 2, 8), rand_params(rng, 2, 8)
        Q = rng.normal(size=(12, 8))
        pos = [set(rng.choice(40, size=2, replace=False).tolist()) for _ in range(12)]
        rows = ix.hard_negatives_batch(adapter.transform(Q, qp), pos, adapter.transform(index.raw, cp))
        for q, p, r in zip(Q, pos, rows):
            assert ids[r] == ix.hard_negative(q, {ids[i] for i in p}, qp, cp, index)


class TestSnapshot:
    def test_roundtrip(self, rng, tmp_path):
        index = make_index(rng, 12, 5)
        loaded = ix.CorpusIndex.load(index.save(tmp_path / "idx.bin"))
        assert loaded.ids == index.ids and loaded.raw.tobytes() == index.raw.tobytes()

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope" * 10)
        with pytest.raises(CorpusIndexError):
            ix.CorpusIndex.load(tmp_path / "x")

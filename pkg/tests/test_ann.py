"""Augmented retrieval: centroids, exact and graph search, serialization."""

import io

import numpy as np
import pytest

from mmxc.ann import (
    AugmentedIndex,
    IndexParams,
    MODE_EXACT,
    MODE_HNSW,
    Shortlist,
    build_index,
    build_vec_only_index,
    centroid,
    load_shortlists,
    normalize_rows,
    save_shortlists,
)
from mmxc.objectives import CostCounters

import oracles


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestCentroid:
    def test_single_positive(self):
        v = np.array([[0.6, 0.8]])
        np.testing.assert_allclose(centroid(v), [0.6, 0.8])

    def test_opposite_vectors_omitted(self):
        v = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert centroid(v) is None

    def test_no_positives(self):
        assert centroid(None) is None
        assert centroid(np.empty((0, 3))) is None

    def test_three_known_vectors(self):
        v = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
        mean = [(1.0 + 0.0 + 0.6) / 3, (0.0 + 1.0 + 0.8) / 3]
        np.testing.assert_allclose(centroid(v), oracles.normalize(mean), atol=1e-15)


class TestBuildIndex:
    def test_entry_count(self):
        rng = np.random.default_rng(0)
        bags = [_unit_rows(rng, 2, 8) for _ in range(4)]
        cents = [_unit_rows(rng, 1, 8)[0] for _ in range(4)]
        index = build_index(bags, cents)
        assert index.n_entries == 12  # (m_l + 1) * L

    def test_missing_centroids_reduce_count(self):
        rng = np.random.default_rng(1)
        bags = [_unit_rows(rng, 3, 8) for _ in range(3)]
        cents = [None, _unit_rows(rng, 1, 8)[0], None]
        index = build_index(bags, cents)
        assert index.n_entries == 10

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            build_index([np.ones((1, 4))], [None])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            build_index([], [])

    def test_normalize_rows_helper(self):
        rng = np.random.default_rng(2)
        bag = rng.standard_normal((3, 5))
        rows = normalize_rows(bag)
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-12)
        with pytest.raises(ValueError):
            normalize_rows(np.zeros((1, 5)))


class TestExactQuery:
    def test_three_labels_nearest_tag(self):
        vecs = np.eye(3)
        index = build_vec_only_index(vecs)
        out = index.query(np.array([0.9, 0.1, 0.0]) / np.linalg.norm([0.9, 0.1, 0.0]), 1)
        assert out.labels.tolist() == [0]

    def test_matches_brute_force_max_over_representatives(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            bags = [_unit_rows(rng, int(rng.integers(1, 4)), 16) for _ in range(12)]
            cents = [
                _unit_rows(rng, 1, 16)[0] if rng.uniform() < 0.7 else None
                for _ in range(12)
            ]
            index = build_index(bags, cents)
            x = _unit_rows(rng, 1, 16)[0]
            got = index.query(x, 5)
            expected = oracles.shortlist_by_max_representative(
                [list(v) for v in index.vectors], index.labels.tolist(), list(x), 5
            )
            assert got.labels.tolist() == [l for l, _ in expected]
            np.testing.assert_allclose(got.sims, [s for _, s in expected], atol=1e-12)

    def test_label_best_entry_can_be_centroid(self):
        bag = np.array([[1.0, 0.0]])
        cent = np.array([0.0, 1.0])
        index = build_index([bag], [cent])
        out = index.query(np.array([0.0, 1.0]), 1)
        assert out.sims[0] == pytest.approx(1.0)

    def test_cap_exceeding_label_count_returns_all(self):
        rng = np.random.default_rng(4)
        index = build_vec_only_index(_unit_rows(rng, 7, 8))
        out = index.query(_unit_rows(rng, 1, 8)[0], 50)
        assert sorted(out.labels.tolist()) == list(range(7))

    def test_labels_unique_and_sorted(self):
        rng = np.random.default_rng(5)
        bags = [_unit_rows(rng, 3, 8) for _ in range(6)]
        index = build_index(bags, [None] * 6)
        out = index.query(_unit_rows(rng, 1, 8)[0], 4)
        assert len(set(out.labels.tolist())) == len(out.labels)
        assert all(a >= b for a, b in zip(out.sims, out.sims[1:]))

    def test_counters(self):
        rng = np.random.default_rng(6)
        index = build_vec_only_index(_unit_rows(rng, 5, 8))
        counters = CostCounters()
        index.query(_unit_rows(rng, 1, 8)[0], 3, counters)
        index.query(_unit_rows(rng, 1, 8)[0], 3, counters)
        assert counters.index_queries == 2


class TestVecOnlyIndex:
    def test_one_entry_per_label(self):
        rng = np.random.default_rng(7)
        vecs = _unit_rows(rng, 9, 8)
        index = build_vec_only_index(vecs)
        assert index.n_entries == 9

    def test_similarity_is_plain_dot(self):
        rng = np.random.default_rng(8)
        vecs = _unit_rows(rng, 9, 8)
        index = build_vec_only_index(vecs)
        x = _unit_rows(rng, 1, 8)[0]
        out = index.query(x, 9)
        for label, sim in zip(out.labels, out.sims):
            assert sim == pytest.approx(float(vecs[label] @ x), abs=1e-15)


class TestHnsw:
    def test_recall_against_exact_small(self):
        rng = np.random.default_rng(9)
        vecs = _unit_rows(rng, 800, 16)
        params = IndexParams(m_graph=12, ef_construction=100, ef_query=120, seed=0)
        approx = build_vec_only_index(vecs, MODE_HNSW, params)
        exact = build_vec_only_index(vecs, MODE_EXACT, params)
        hits = 0
        trials = 30
        cap = 20
        for _ in range(trials):
            q = _unit_rows(rng, 1, 16)[0]
            got = set(approx.query(q, cap).labels.tolist())
            want = set(exact.query(q, cap).labels.tolist())
            hits += len(got & want)
        recall = hits / (trials * cap)
        assert recall >= 0.9

    def test_beam_expansion_finds_all_labels_when_cap_is_total(self):
        rng = np.random.default_rng(10)
        vecs = _unit_rows(rng, 60, 8)
        index = build_vec_only_index(vecs, MODE_HNSW, IndexParams(seed=1))
        out = index.query(_unit_rows(rng, 1, 8)[0], 60)
        assert sorted(out.labels.tolist()) == list(range(60))

    def test_serialization_round_trip(self):
        rng = np.random.default_rng(11)
        bags = [_unit_rows(rng, 2, 8) for _ in range(30)]
        cents = [_unit_rows(rng, 1, 8)[0] for _ in range(30)]
        index = build_index(bags, cents, MODE_HNSW, IndexParams(seed=2))
        buf = io.BytesIO()
        index.save(buf)
        payload = buf.getvalue()
        loaded = AugmentedIndex.load(io.BytesIO(payload))
        buf2 = io.BytesIO()
        loaded.save(buf2)
        assert buf2.getvalue() == payload
        q = _unit_rows(rng, 1, 8)[0]
        a = index.query(q, 10)
        b = loaded.query(q, 10)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.sims, b.sims)

    def test_exact_serialization_round_trip(self):
        rng = np.random.default_rng(12)
        index = build_vec_only_index(_unit_rows(rng, 10, 4))
        buf = io.BytesIO()
        index.save(buf)
        loaded = AugmentedIndex.load(io.BytesIO(buf.getvalue()))
        assert loaded.mode == MODE_EXACT
        q = _unit_rows(rng, 1, 4)[0]
        np.testing.assert_array_equal(
            index.query(q, 5).labels, loaded.query(q, 5).labels
        )

    def test_concurrent_identical_results(self):
        # The index is immutable after build; repeated queries must agree.
        rng = np.random.default_rng(13)
        index = build_vec_only_index(
            _unit_rows(rng, 100, 8), MODE_HNSW, IndexParams(seed=3)
        )
        q = _unit_rows(rng, 1, 8)[0]
        first = index.query(q, 10)
        for _ in range(5):
            again = index.query(q, 10)
            np.testing.assert_array_equal(first.labels, again.labels)


class TestShortlistFile:
    def test_round_trip(self):
        rng = np.random.default_rng(14)
        shortlists = [
            Shortlist(
                datapoint=i,
                labels=np.sort(rng.choice(50, size=5, replace=False)),
                sims=np.sort(rng.uniform(size=5))[::-1].copy(),
            )
            for i in range(4)
        ]
        buf = io.BytesIO()
        save_shortlists(buf, shortlists)
        loaded = load_shortlists(io.BytesIO(buf.getvalue()))
        assert len(loaded) == 4
        for a, b in zip(shortlists, loaded):
            assert a.datapoint == b.datapoint
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(a.sims, b.sims)

    def test_negatives_helper(self):
        s = Shortlist(0, np.array([2, 5, 9]), np.array([0.9, 0.8, 0.7]))
        np.testing.assert_array_equal(s.negatives(np.array([5])), [2, 9])

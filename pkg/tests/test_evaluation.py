import numpy as np
import pytest

from placerec import (
    DuplicateId,
    EmptyIndex,
    GeoTag,
    build_index,
    load_index,
    query_topn,
    recall_at,
    save_index,
    write_recall_csv,
)

from oracles import recall_reference, topn_reference


def grid_tags(n, spacing=60.0):
    return [GeoTag(spacing * (i % 8), spacing * (i // 8)) for i in range(n)]


class TestIndex:
    def test_empty_query_raises(self):
        index = build_index([], np.empty((0, 4)), [])
        with pytest.raises(EmptyIndex):
            query_topn(index, np.zeros(4), 1)

    def test_duplicate_ids(self, rng):
        with pytest.raises(DuplicateId):
            build_index(["a", "a"], rng.normal(size=(2, 3)), grid_tags(2))

    def test_round_trip_preserves_queries(self, rng, tmp_path):
        ids = [f"i{k}" for k in range(10)]
        vectors = rng.normal(size=(10, 5))
        index = build_index(ids, vectors, grid_tags(10))
        save_index(index, tmp_path / "x.srli")
        back = load_index(tmp_path / "x.srli")
        query = rng.normal(size=5)
        assert query_topn(index, query, 4) == query_topn(back, query, 4)
        assert back.geotags == index.geotags


class TestQueryTopN:
    def test_exact_match_ranked_first(self, rng):
        vectors = rng.normal(size=(20, 6))
        ids = [f"i{k:02d}" for k in range(20)]
        index = build_index(ids, vectors, grid_tags(20))
        ranked = query_topn(index, vectors[7], 3)
        assert ranked[0] == ("i07", 0.0)

    def test_n_larger_than_database(self, rng):
        vectors = rng.normal(size=(5, 3))
        ids = list("abcde")
        index = build_index(ids, vectors, grid_tags(5))
        ranked = query_topn(index, rng.normal(size=3), 50)
        assert len(ranked) == 5
        dists = [d for _, d in ranked]
        assert dists == sorted(dists)

    def test_matches_full_sort_oracle(self, rng):
        vectors = rng.normal(size=(50, 8))
        ids = [f"im{k:03d}" for k in range(50)]
        index = build_index(ids, vectors, grid_tags(50))
        for _ in range(10):
            query = rng.normal(size=8)
            got = query_topn(index, query, 10)
            expected = topn_reference(ids, vectors, query, 10)
            assert [i for i, _ in got] == [i for i, _ in expected]
            np.testing.assert_allclose([d for _, d in got], [d for _, d in expected])

    def test_ties_break_by_id(self):
        vectors = np.zeros((4, 2))
        ids = ["d", "b", "c", "a"]
        index = build_index(ids, vectors, grid_tags(4))
        ranked = query_topn(index, np.zeros(2), 4)
        assert [i for i, _ in ranked] == ["a", "b", "c", "d"]

    def test_permutation_invariant(self, rng):
        vectors = rng.normal(size=(15, 4))
        ids = [f"i{k}" for k in range(15)]
        tags = grid_tags(15)
        index = build_index(ids, vectors, tags)
        perm = rng.permutation(15)
        shuffled = build_index(
            [ids[i] for i in perm], vectors[perm], [tags[i] for i in perm]
        )
        query = rng.normal(size=4)
        assert query_topn(index, query, 6) == query_topn(shuffled, query, 6)


class TestRecall:
    def test_full_database_recall_one(self, rng):
        vectors = rng.normal(size=(12, 4))
        ids = [f"i{k}" for k in range(12)]
        tags = [GeoTag(0, 0)] * 12  # everything within range of everything
        index = build_index(ids, vectors, tags)
        result = recall_at(index, rng.normal(size=(5, 4)), [GeoTag(0, 0)] * 5, [12])
        assert result.recalls[12] == 1.0
        assert result.num_unreachable == 0

    def test_monotone_in_n(self, rng):
        vectors = rng.normal(size=(30, 6))
        ids = [f"i{k:02d}" for k in range(30)]
        tags = grid_tags(30)
        index = build_index(ids, vectors, tags)
        queries = rng.normal(size=(10, 6))
        query_tags = [tags[int(rng.integers(0, 30))] for _ in range(10)]
        result = recall_at(index, queries, query_tags, [1, 5, 10])
        assert result.recalls[1] <= result.recalls[5] <= result.recalls[10]

    def test_matches_brute_force_oracle(self, rng):
        m = 40
        vectors = rng.normal(size=(m, 5))
        ids = [f"i{k:02d}" for k in range(m)]
        tags = grid_tags(m)
        index = build_index(ids, vectors, tags)
        queries = rng.normal(size=(15, 5))
        query_tags = [tags[int(rng.integers(0, m))] for _ in range(15)]
        result = recall_at(index, queries, query_tags, [1, 5, 10])
        expected = recall_reference(ids, vectors, tags, queries, query_tags, [1, 5, 10], 25.0)
        for n in (1, 5, 10):
            assert result.recalls[n] == pytest.approx(expected[n])

    def test_unreachable_counted_as_failure(self, rng):
        vectors = rng.normal(size=(3, 4))
        index = build_index(["a", "b", "c"], vectors, grid_tags(3))
        far = GeoTag(10000.0, 10000.0)
        result = recall_at(index, rng.normal(size=(2, 4)), [far, GeoTag(0, 0)], [1, 3])
        assert result.num_unreachable == 1
        assert result.recalls[3] <= 0.5

    def test_monotone_in_dr(self, rng):
        vectors = rng.normal(size=(20, 4))
        ids = [f"i{k}" for k in range(20)]
        tags = grid_tags(20, spacing=20.0)
        index = build_index(ids, vectors, tags)
        queries = rng.normal(size=(8, 4))
        query_tags = [tags[int(rng.integers(0, 20))] for _ in range(8)]
        small = recall_at(index, queries, query_tags, [1, 5], d_r=10.0)
        large = recall_at(index, queries, query_tags, [1, 5], d_r=50.0)
        for n in (1, 5):
            assert small.recalls[n] <= large.recalls[n]

    def test_isotropic_whitening_preserves_ranking(self, rng):
        # equal-eigenvalue whitening is an orthogonal rotation plus uniform
        # scale of centered data, so rankings match an explicit rotation
        from placerec import fit_whitening, apply_whitening_batch

        dim, m = 6, 36
        # orthonormal columns orthogonal to the all-ones vector: the sample
        # mean is exactly zero and the sample covariance exactly sigma^2 I
        seed_cols = np.concatenate([np.ones((m, 1)), rng.normal(size=(m, dim))], axis=1)
        basis, _ = np.linalg.qr(seed_cols)
        sigma = 1.7
        centered = basis[:, 1 : dim + 1] * sigma * np.sqrt(m - 1)
        data = centered + rng.normal(size=dim)
        t = fit_whitening(data, dim)
        whitened = apply_whitening_batch(t, data)
        rotation, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        explicit = (data - data.mean(axis=0)) @ rotation / sigma
        explicit /= np.linalg.norm(explicit, axis=1, keepdims=True)
        query = 0
        rank_w = np.argsort(np.linalg.norm(whitened - whitened[query], axis=1), kind="stable")
        rank_e = np.argsort(np.linalg.norm(explicit - explicit[query], axis=1), kind="stable")
        np.testing.assert_array_equal(rank_w, rank_e)


class TestGnuplotOutput:
    def test_rows(self, rng, tmp_path):
        from placerec.evaluation import write_recall_gnuplot

        vectors = rng.normal(size=(6, 3))
        index = build_index([f"i{k}" for k in range(6)], vectors, grid_tags(6))
        result = recall_at(index, vectors[:2], grid_tags(6)[:2], [1, 5])
        path = tmp_path / "r.dat"
        write_recall_gnuplot(path, result)
        lines = path.read_text(encoding="utf-8").strip().splitlines()
        assert lines[0] == "# N recall"
        assert len(lines) == 3
        n, recall = lines[1].split()
        assert int(n) == 1
        float(recall)


class TestRecallCsv:
    def test_rows(self, rng, tmp_path):
        vectors = rng.normal(size=(6, 3))
        ids = [f"i{k}" for k in range(6)]
        tags = grid_tags(6)
        index = build_index(ids, vectors, tags)
        result = recall_at(index, vectors[:2], tags[:2], [1, 5])
        path = tmp_path / "r.csv"
        write_recall_csv(path, result)
        lines = path.read_text(encoding="utf-8").strip().splitlines()
        assert lines[0] == "N,recall"
        assert len(lines) == 3
        assert lines[1].startswith("1,")

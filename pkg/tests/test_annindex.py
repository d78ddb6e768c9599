"""Exact search oracle, product quantization, incremental adds, file IO."""

import logging
import math

import numpy as np
import pytest

from admatch.annindex import (
    AnnIndex,
    PqTrainingError,
    build_exact_index,
    export_ad_vectors,
    pq_decode,
    pq_encode,
    pq_train,
)
from admatch.autodiff import DegenerateVectorError
from admatch.data import GeneratorConfig, build_vocab, generate_synthetic
from admatch.model import EncoderConfig, MatchingModel


def selection_topk_oracle(ids, vectors, query, k):
    """Independent O(nK) top-k: repeated scan for the best remaining."""
    scores = {i: float(np.dot(v, query)) for i, v in zip(ids, vectors)}
    remaining = list(ids)
    out = []
    for _ in range(min(k, len(remaining))):
        best = None
        for cand in remaining:
            if best is None or scores[cand] > scores[best] or (
                scores[cand] == scores[best] and cand < best
            ):
                best = cand
        remaining.remove(best)
        out.append((best, scores[best]))
    return out


def random_unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def filled_index(rng, n, d, prefix="ad") -> AnnIndex:
    index = AnnIndex(d)
    for i, v in enumerate(random_unit(rng, n, d)):
        index.add(f"{prefix}{i:04d}", v)
    return index


class TestExactSearch:
    def test_stored_vector_ranks_first_with_unit_score(self):
        rng = np.random.default_rng(1)
        index = filled_index(rng, 30, 8)
        target = index.vector_for("ad0007")
        top = index.exact_topk(target, 3)
        assert top[0][0] == "ad0007"
        assert top[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_k_larger_than_index_returns_everything(self):
        rng = np.random.default_rng(2)
        index = filled_index(rng, 5, 4)
        assert len(index.exact_topk(random_unit(rng, 1, 4)[0], 50)) == 5

    def test_hand_placed_angles(self):
        index = AnnIndex(2)
        index.add("deg00", np.array([1.0, 0.0]))
        index.add("deg60", np.array([0.5, math.sqrt(3) / 2]))
        index.add("deg90", np.array([0.0, 1.0]))
        top = index.exact_topk(np.array([1.0, 0.0]), 3)
        assert [t[0] for t in top] == ["deg00", "deg60", "deg90"]
        np.testing.assert_allclose([t[1] for t in top], [1.0, 0.5, 0.0], atol=1e-9)

    def test_ties_break_by_ascending_ad_id(self):
        index = AnnIndex(2)
        index.add("b", np.array([1.0, 0.0]))
        index.add("a", np.array([1.0, 0.0]))
        index.add("c", np.array([0.0, 1.0]))
        top = index.exact_topk(np.array([1.0, 0.0]), 2)
        assert [t[0] for t in top] == ["a", "b"]

    def test_empty_index_returns_empty(self):
        assert AnnIndex(4).exact_topk(np.ones(4), 5) == []

    def test_matches_selection_oracle(self):
        rng = np.random.default_rng(3)
        index = filled_index(rng, 64, 6)
        snap_ids = index.ids()
        vectors = [index.vector_for(i) for i in snap_ids]
        for _ in range(10):
            q = random_unit(rng, 1, 6)[0]
            k = int(rng.integers(1, 12))
            got = index.exact_topk(q, k)
            want = selection_topk_oracle(snap_ids, vectors, q, k)
            assert [g[0] for g in got] == [w[0] for w in want]
            np.testing.assert_allclose(
                [g[1] for g in got], [w[1] for w in want], atol=1e-12
            )


class TestAdds:
    def test_vectors_stay_unit_norm(self):
        rng = np.random.default_rng(4)
        index = AnnIndex(6)
        for i in range(40):
            index.add(f"x{i}", rng.normal(size=6) * rng.uniform(0.1, 9.0))
        snap = index._snap
        np.testing.assert_allclose(
            np.linalg.norm(snap.vectors, axis=1), 1.0, atol=1e-6
        )

    def test_count_increments_and_new_ad_found(self):
        rng = np.random.default_rng(5)
        index = filled_index(rng, 10, 4)
        v = random_unit(rng, 1, 4)[0]
        index.add("fresh", v)
        assert len(index) == 11
        assert index.exact_topk(v, 1)[0][0] == "fresh"

    def test_duplicate_replaced_with_warning(self, caplog):
        rng = np.random.default_rng(6)
        index = filled_index(rng, 4, 4)
        with caplog.at_level(logging.WARNING):
            index.add("ad0002", random_unit(rng, 1, 4)[0])
        assert "replacing" in caplog.text
        assert len(index) == 4

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateVectorError):
            AnnIndex(3).add("z", np.zeros(3))

    def test_wrong_dimension_rejected(self):
        with pytest.raises(ValueError):
            AnnIndex(3).add("z", np.ones(4))


class TestPqTraining:
    def test_distinct_points_reach_zero_error(self):
        rng = np.random.default_rng(7)
        data = random_unit(rng, 24, 8)
        result = pq_train(data, n_subspaces=2, n_centroids=24, iterations=20, seed=0)
        assert result.error_history[:, -1].max() < 1e-12
        codes = pq_encode(result.codebooks, data)
        np.testing.assert_allclose(
            pq_decode(result.codebooks, codes), data, atol=1e-6
        )

    def test_error_non_increasing_per_iteration(self):
        rng = np.random.default_rng(8)
        data = rng.normal(size=(400, 16))
        result = pq_train(data, n_subspaces=4, n_centroids=16, iterations=15, seed=1)
        diffs = np.diff(result.error_history, axis=1)
        assert (diffs <= 1e-12).all()

    def test_beats_random_codebook_baseline(self):
        rng = np.random.default_rng(9)
        data = rng.normal(size=(500, 16))
        result = pq_train(data, n_subspaces=4, n_centroids=16, iterations=15, seed=2)
        trained_err = np.mean(
            (pq_decode(result.codebooks, pq_encode(result.codebooks, data)) - data) ** 2
        )
        picks = rng.choice(len(data), size=16, replace=False)
        random_cb = result.codebooks.__class__(
            np.stack(
                [data[picks, m * 4 : (m + 1) * 4] for m in range(4)]
            ).astype(np.float32)
        )
        random_err = np.mean(
            (pq_decode(random_cb, pq_encode(random_cb, data)) - data) ** 2
        )
        assert trained_err < random_err

    def test_too_few_vectors_rejected(self):
        rng = np.random.default_rng(10)
        with pytest.raises(PqTrainingError):
            pq_train(rng.normal(size=(10, 8)), n_subspaces=2, n_centroids=16)

    def test_indivisible_dimension_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(PqTrainingError):
            pq_train(rng.normal(size=(40, 10)), n_subspaces=3, n_centroids=8)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(12)
        data = rng.normal(size=(200, 8))
        a = pq_train(data, 2, 16, 10, seed=5)
        b = pq_train(data, 2, 16, 10, seed=5)
        np.testing.assert_array_equal(a.codebooks.centroids, b.codebooks.centroids)


class TestPqSearch:
    def test_zero_quantization_error_reproduces_exact(self):
        rng = np.random.default_rng(13)
        index = filled_index(rng, 60, 8)
        index.train_pq(n_subspaces=2, n_centroids=60, iterations=25, seed=3)
        for _ in range(5):
            q = random_unit(rng, 1, 8)[0]
            got = index.pq_search(q, 10, rerank=False)
            want = index.exact_topk(q, 10)
            # ADC sums subspace partials, so scores can differ in the last
            # ulp; ids and ranking must match outright
            assert [g[0] for g in got] == [w[0] for w in want]
            np.testing.assert_allclose(
                [g[1] for g in got], [w[1] for w in want], atol=1e-12
            )

    def test_exhaustive_rerank_reproduces_exact(self):
        rng = np.random.default_rng(14)
        index = filled_index(rng, 80, 8)
        index.train_pq(n_subspaces=4, n_centroids=8, iterations=10, seed=4)
        for _ in range(5):
            q = random_unit(rng, 1, 8)[0]
            got = index.pq_search(q, 10, overfetch_factor=8, rerank=True)
            assert got == index.exact_topk(q, 10)

    def test_fallback_without_codebooks(self, caplog):
        rng = np.random.default_rng(15)
        index = filled_index(rng, 12, 4)
        q = random_unit(rng, 1, 4)[0]
        with caplog.at_level(logging.WARNING):
            got = index.pq_search(q, 3)
        assert "falling back" in caplog.text
        assert got == index.exact_topk(q, 3)

    def test_recall_non_decreasing_in_overfetch(self):
        rng = np.random.default_rng(16)
        index = filled_index(rng, 400, 16)
        index.train_pq(n_subspaces=4, n_centroids=32, iterations=10, seed=5)
        queries = random_unit(rng, 25, 16)
        k = 5
        recalls = []
        for factor in (1, 2, 4, 8):
            hits = 0
            for q in queries:
                exact = {a for a, _ in index.exact_topk(q, k)}
                approx = {a for a, _ in index.pq_search(q, k, overfetch_factor=factor)}
                hits += len(exact & approx)
            recalls.append(hits / (k * len(queries)))
        assert all(a <= b + 1e-12 for a, b in zip(recalls, recalls[1:]))

    def test_added_ad_searchable_and_bounded_error(self):
        rng = np.random.default_rng(17)
        index = filled_index(rng, 120, 8)
        result = index.train_pq(n_subspaces=2, n_centroids=16, iterations=15, seed=6)
        train_vectors = index._snap.vectors.astype(np.float64)
        recon = pq_decode(result.codebooks, pq_encode(result.codebooks, train_vectors))
        # twice the worst training point-to-centroid distance bounds any
        # same-distribution point's quantization error per subspace
        per_sub_err = [
            np.linalg.norm((train_vectors - recon)[:, m * 4 : (m + 1) * 4], axis=1).max()
            for m in range(2)
        ]
        v = random_unit(rng, 1, 8)[0]
        index.add("newcomer", v)
        assert len(index) == 121
        assert index.exact_topk(v, 1)[0][0] == "newcomer"
        code = pq_encode(result.codebooks, v[None, :])
        v_recon = pq_decode(result.codebooks, code)[0]
        for m in range(2):
            err = np.linalg.norm((v - v_recon)[m * 4 : (m + 1) * 4])
            assert err <= 2.0 * per_sub_err[m] + 1e-9

    def test_pq_codes_consistent_after_add(self):
        rng = np.random.default_rng(18)
        index = filled_index(rng, 40, 8)
        index.train_pq(n_subspaces=2, n_centroids=8, iterations=10, seed=7)
        index.add("late", random_unit(rng, 1, 8)[0])
        snap = index._snap
        expected = pq_encode(index.codebooks, snap.vectors.astype(np.float64))
        np.testing.assert_array_equal(snap.codes, expected)


class TestConcurrentReads:
    def test_searches_never_see_torn_state_during_adds(self):
        import threading

        rng = np.random.default_rng(77)
        index = filled_index(rng, 50, 8)
        index.train_pq(n_subspaces=2, n_centroids=16, iterations=5, seed=77)
        queries = random_unit(rng, 10, 8)
        new_vectors = random_unit(rng, 200, 8)
        failures = []
        stop = threading.Event()

        def reader():
            while not stop.is_set():
                for q in queries:
                    try:
                        hits = index.pq_search(q, 5)
                        if len(hits) != len(set(h[0] for h in hits)):
                            failures.append("duplicate ids in one snapshot read")
                    except Exception as exc:  # torn state would surface here
                        failures.append(repr(exc))

        threads = [threading.Thread(target=reader) for _ in range(3)]
        for t in threads:
            t.start()
        for i, v in enumerate(new_vectors):
            index.add(f"late{i:04d}", v)
        stop.set()
        for t in threads:
            t.join()
        assert not failures, failures[:3]
        assert len(index) == 250


class TestIndexFile:
    def test_round_trip_bytes_and_content(self, tmp_path):
        rng = np.random.default_rng(19)
        index = filled_index(rng, 50, 8)
        index.train_pq(n_subspaces=2, n_centroids=16, iterations=10, seed=8)
        p1 = tmp_path / "a.idx"
        index.save(p1)
        loaded = AnnIndex.load(p1)
        assert loaded.ids() == index.ids()
        np.testing.assert_array_equal(loaded._snap.vectors, index._snap.vectors)
        np.testing.assert_array_equal(loaded._snap.codes, index._snap.codes)
        np.testing.assert_array_equal(
            loaded.codebooks.centroids, index.codebooks.centroids
        )
        p2 = tmp_path / "b.idx"
        loaded.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_exact_only_round_trip(self, tmp_path):
        rng = np.random.default_rng(20)
        index = filled_index(rng, 10, 4)
        index.save(tmp_path / "plain.idx")
        loaded = AnnIndex.load(tmp_path / "plain.idx")
        assert loaded.codebooks is None
        q = random_unit(rng, 1, 4)[0]
        assert loaded.exact_topk(q, 3) == index.exact_topk(q, 3)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.idx"
        path.write_bytes(b"NOTANIDX" + b"\0" * 32)
        with pytest.raises(ValueError, match="magic"):
            AnnIndex.load(path)


@pytest.fixture(scope="module")
def small_world():
    cfg = GeneratorConfig(seed=33, n_users=20, days=2, n_items=120, n_categories=4)
    records, ads, _ = generate_synthetic(cfg)
    vocab = build_vocab(records, top_k=5000)
    model = MatchingModel(
        EncoderConfig(
            item_dim=8, shop_dim=4, brand_dim=4, term_dim=8, profile_dim=4,
            gru_hidden=8, attention_hidden=8, tower_dims=(12, 8), prerank_hidden=8,
        ),
        vocab.sizes,
        seed=33,
    )
    return model, ads, vocab


class TestExport:
    def test_exported_vectors_unit_norm_and_deterministic(self, small_world):
        model, ads, vocab = small_world
        pairs = list(export_ad_vectors(model, ads, vocab))
        again = list(export_ad_vectors(model, ads, vocab))
        assert len(pairs) == len(ads)
        for (ad_id, vec), (ad_id2, vec2) in zip(pairs, again):
            assert ad_id == ad_id2
            assert np.array_equal(vec, vec2)
            assert abs(np.linalg.norm(vec) - 1.0) < 1e-9

    def test_normalized_dot_equals_raw_cosine(self, small_world):
        model, ads, vocab = small_world
        from admatch.data import ad_item_from_descriptor

        raw = model.ad_forward([ad_item_from_descriptor(a, vocab) for a in ads[:10]]).data
        pairs = dict(list(export_ad_vectors(model, ads[:10], vocab)))
        rng = np.random.default_rng(0)
        q = rng.normal(size=model.config.d)
        q_unit = q / np.linalg.norm(q)
        for a, raw_row in zip(ads[:10], raw):
            cos = float(np.dot(q, raw_row) / (np.linalg.norm(q) * np.linalg.norm(raw_row)))
            dot = float(np.dot(q_unit, pairs[a.item_id]))
            assert abs(cos - dot) < 1e-9

    def test_degenerate_ad_skipped_with_warning(self, small_world, caplog):
        model, ads, vocab = small_world
        rigged = MatchingModel(
            EncoderConfig(
                item_dim=8, shop_dim=4, brand_dim=4, term_dim=8, profile_dim=4,
                gru_hidden=8, attention_hidden=8, tower_dims=(12, 8), prerank_hidden=8,
                activation="relu",
            ),
            vocab.sizes,
            seed=33,
        )
        names = rigged.tower_param_names("ad")
        rigged.params[names[2]].data[...] = 0.0
        rigged.params[names[3]].data[...] = -1.0
        with caplog.at_level(logging.WARNING):
            pairs = list(export_ad_vectors(rigged, ads[:5], vocab))
        assert pairs == []
        assert "zero-norm" in caplog.text

    def test_build_exact_index(self, small_world):
        model, ads, vocab = small_world
        index = build_exact_index(model, ads, vocab)
        assert len(index) == len(ads)
        assert index.dim == model.config.d

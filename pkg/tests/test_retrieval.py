import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simview.encoder import build_encoder
from simview.errors import FingerprintMismatchWarning, RetrievalError
from simview.registry import FeatureStore, InstanceRecord, build_store, register_observation
from simview.retrieval import (
    cosine_similarity,
    instance_max_similarity,
    retrieve,
    retrieve_vector,
    top_k_neighbors,
)

SMALL = dict(resize_size=37, crop_size=32)


def _record(vectors):
    v = np.asarray(vectors, dtype=np.float32)
    return InstanceRecord(0, "a", np.zeros(3), v, list(range(len(v))))


def random_store(rng, max_j=10, max_n=5, d=8):
    s = FeatureStore()
    for iid in range(int(rng.integers(1, max_j + 1))):
        for _ in range(int(rng.integers(1, max_n + 1))):
            register_observation(s, iid, f"c{iid % 3}", [iid, 0, 0], rng.normal(size=d))
    return s


def flat_argmax_oracle(store, q):
    """Flat scan over every (i, n) pair; first strict maximum wins, ids ascending."""
    best_id, best = None, -np.inf
    for iid in sorted(store.records):
        for z in store.records[iid].vectors.astype(np.float64):
            s = z @ q / (np.linalg.norm(z) * np.linalg.norm(q))
            if s > best:
                best_id, best = iid, s
    return best_id, best


class TestCosine:
    def test_identical(self):
        assert cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 5]) == 0.0

    def test_scale(self):
        a = np.array([0.3, -1.2, 4.0])
        assert cosine_similarity(a, 2 * a) == pytest.approx(1.0)

    def test_zero(self):
        with pytest.raises(RetrievalError):
            cosine_similarity([0, 0], [1, 0])

    def test_dim_mismatch(self):
        with pytest.raises(RetrievalError):
            cosine_similarity([1, 0], [1, 0, 0])

    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_range(self, a, b):
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        assert -1.0 <= cosine_similarity(a, b) <= 1.0


class TestInstanceMax:
    def test_exact_match(self):
        assert instance_max_similarity(_record([[1, 0], [0, 1], [-1, 0]]), [1, 0]) == pytest.approx(1.0)

    def test_diagonal(self):
        r = _record([[0, 1], [1 / math.sqrt(2), 1 / math.sqrt(2)]])
        assert instance_max_similarity(r, [1, 0]) == pytest.approx(math.sqrt(2) / 2, abs=1e-7)

    def test_matches_exhaustive(self, rng):
        z = rng.normal(size=(20, 8))
        q = rng.normal(size=8)
        brute = max(float(v @ q / (np.linalg.norm(v) * np.linalg.norm(q))) for v in z.astype(np.float32).astype(np.float64))
        assert instance_max_similarity(_record(z), q) == pytest.approx(brute, abs=1e-12)

    def test_empty(self):
        with pytest.raises(RetrievalError):
            instance_max_similarity(_record(np.zeros((0, 2))), [1, 0])


class TestRetrieve:
    def test_own_vector(self, rng):
        s = random_store(rng)
        target = s.records[0].vectors[0]
        res = retrieve_vector(s, target)
        assert res.similarity == pytest.approx(1.0)
        assert res.instance_id == flat_argmax_oracle(s, target.astype(np.float64))[0]

    def test_tie_goes_to_lower_id(self):
        s = FeatureStore()
        register_observation(s, 5, "a", [0, 0, 0], [1.0, 0.0])
        register_observation(s, 2, "a", [1, 0, 0], [1.0, 0.0])
        res = retrieve_vector(s, [1.0, 0.0])
        assert res.instance_id == 2
        assert res.position.tolist() == [1, 0, 0]

    def test_result_fields(self, rng):
        s = random_store(rng)
        res = retrieve_vector(s, rng.normal(size=8))
        assert res.similarity == max(res.per_instance_scores.values())
        assert -1 <= res.similarity <= 1
        assert res.class_label == s.records[res.instance_id].class_label
        assert set(res.to_dict()) == {"instance_id", "similarity", "class_label", "position", "per_instance_scores"}

    def test_matches_oracle_on_random_stores(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            s = random_store(rng)
            q = rng.normal(size=8)
            assert retrieve_vector(s, q).instance_id == flat_argmax_oracle(s, q)[0]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, seed, alpha):
        rng = np.random.default_rng(seed)
        s = random_store(rng)
        q = rng.normal(size=8)
        assert retrieve_vector(s, q).instance_id == retrieve_vector(s, alpha * q).instance_id

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_adding_to_winner_never_lowers_score(self, seed):
        rng = np.random.default_rng(seed)
        s = random_store(rng)
        q = rng.normal(size=8)
        res = retrieve_vector(s, q)
        rec = s.records[res.instance_id]
        register_observation(s, res.instance_id, rec.class_label, rec.position, rng.normal(size=8))
        assert instance_max_similarity(s.records[res.instance_id], q) >= res.similarity

    def test_empty_store(self):
        with pytest.raises(RetrievalError):
            retrieve_vector(FeatureStore(), [1.0])

    def test_dim_mismatch(self, rng):
        with pytest.raises(RetrievalError):
            retrieve_vector(random_store(rng), np.ones(3))

    def test_image_query(self, tiny_ds):
        m = build_encoder(num_classes=4, seed=0, **SMALL)
        s = build_store(m, tiny_ds)
        item = tiny_ds.items[7]
        res = retrieve(s, item.pixels, m)
        assert res.instance_id == item.instance_id
        assert res.similarity == pytest.approx(1.0, abs=1e-6)

    def test_fingerprint_mismatch_warns_but_answers(self, tiny_ds):
        m = build_encoder(num_classes=4, seed=0, **SMALL)
        s = build_store(m, tiny_ds)
        other = build_encoder(num_classes=4, seed=1, **SMALL)
        with pytest.warns(FingerprintMismatchWarning):
            res = retrieve(s, tiny_ds.items[0].pixels, other)
        assert res.instance_id in s.records


class TestTopK:
    def test_k1_is_global_best(self, rng):
        s = random_store(rng)
        q = rng.normal(size=8)
        (iid, _, sim), = top_k_neighbors(s, q, 1)
        assert (iid, sim) == pytest.approx(flat_argmax_oracle(s, q))

    def test_full_ranking(self, rng):
        s = random_store(rng)
        q = rng.normal(size=8)
        hits = top_k_neighbors(s, q, s.total_observations)
        assert len(hits) == s.total_observations
        sims = [h[2] for h in hits]
        assert all(a >= b for a, b in zip(sims, sims[1:]))

    def test_truncates(self, rng):
        s = random_store(rng)
        assert len(top_k_neighbors(s, rng.normal(size=8), 10_000)) == s.total_observations

    def test_k3_matches_sort_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            s = random_store(rng)
            q = rng.normal(size=8)
            flat = []
            for iid, rec in s.records.items():
                for view, z in zip(rec.view_indices, rec.vectors.astype(np.float64)):
                    flat.append((iid, view, z @ q / (np.linalg.norm(z) * np.linalg.norm(q))))
            want = sorted(flat, key=lambda t: -t[2])[:3]
            got = top_k_neighbors(s, q, 3)
            assert [g[:2] for g in got] == [w[:2] for w in want]
            np.testing.assert_allclose([g[2] for g in got], [w[2] for w in want], atol=1e-12)

    def test_bad_k(self, rng):
        with pytest.raises(RetrievalError):
            top_k_neighbors(random_store(rng), np.ones(8), 0)

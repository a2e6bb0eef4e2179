import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from simview.data import MultiViewDataset, ObservationImage
from simview.encoder import build_encoder
from simview.errors import EvaluationError
from simview.evaluation import (
    ClusterReport,
    EvalReport,
    ari,
    emit_plots,
    error_breakdown,
    evaluate_map,
    kmeans,
    pca,
    pca_project,
    representation_score,
    within_cluster_ss,
)
from simview.registry import FeatureStore, build_store, register_observation
from simview.retrieval import RetrievalResult

SMALL = dict(resize_size=37, crop_size=32)


class LookupEncoder:
    """Pluggable encoder: pixel (0, 0, 0) indexes a table of hand-placed vectors."""

    fingerprint = "lookup"

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float32)

    def __call__(self, images):
        return self.table[[int(im[0, 0, 0]) for im in images]]


def _img(code):
    return np.full((2, 2, 3), code, np.uint8)


def three_instance_scenario():
    store = FeatureStore(encoder_fingerprint="lookup")
    register_observation(store, 0, "a", [0, 0, 0], [1, 0, 0])
    register_observation(store, 1, "a", [1, 0, 0], [0, 1, 0])
    register_observation(store, 2, "b", [2, 0, 0], [0, 0, 1])
    table = [
        [1, 0.1, 0],    # inst 0 -> 0  hit
        [0.2, 1, 0],    # inst 0 -> 1  same class, wrong instance
        [0, 1, 0.1],    # inst 1 -> 1  hit
        [0, 0.5, 0.2],  # inst 1 -> 1  hit
        [0, 0, 1],      # inst 2 -> 2  hit
        [1, 0, 0.3],    # inst 2 -> 0  wrong class
    ]
    owners = [(0, "a"), (0, "a"), (1, "a"), (1, "a"), (2, "b"), (2, "b")]
    items = [ObservationImage(_img(code), iid, cls, code) for code, (iid, cls) in enumerate(owners)]
    return store, LookupEncoder(table), MultiViewDataset(items)


class TestMAP:
    def test_hand_enumerated(self):
        store, enc, queries = three_instance_scenario()
        rep = evaluate_map(store, enc, queries, K=2, trials=3)
        # per-instance successes: 1/2, 2/2, 1/2
        assert rep.per_instance_ap == {0: 0.5, 1: 1.0, 2: 0.5}
        assert rep.map_score == pytest.approx(2 / 3, abs=1e-15)
        assert rep.diff_instance_rate == pytest.approx(1 / 6)
        assert rep.diff_class_rate == pytest.approx(1 / 6)
        assert rep.success_rate + rep.diff_instance_rate + rep.diff_class_rate == pytest.approx(1.0, abs=1e-15)
        assert rep.success_rate == pytest.approx(rep.map_score)

    def test_all_correct(self, tiny_ds):
        m = build_encoder(num_classes=4, seed=0, **SMALL)
        store = build_store(m, tiny_ds)
        rep = evaluate_map(store, m, tiny_ds, K=5, trials=2)
        assert rep.map_score == 1.0
        assert (rep.diff_instance_rate, rep.diff_class_rate) == (0.0, 0.0)

    def test_half(self):
        store = FeatureStore()
        register_observation(store, 0, "a", [0, 0, 0], [1, 0])
        register_observation(store, 1, "a", [0, 0, 0], [0, 1])
        items = [ObservationImage(_img(0), i // 3, "a", i) for i in range(6)]
        rep = evaluate_map(store, LookupEncoder([[1, 0]]), MultiViewDataset(items), K=3, trials=1)
        assert rep.map_score == 0.5

    def test_resampling_is_seeded(self):
        store, enc, _ = three_instance_scenario()
        rng = np.random.default_rng(0)
        table = rng.normal(size=(60, 3))
        items = [ObservationImage(_img(c), c % 3, "a" if c % 3 < 2 else "b", c) for c in range(60)]
        q = MultiViewDataset(items)
        a = evaluate_map(store, LookupEncoder(table), q, K=10, trials=10, seed=4)
        b = evaluate_map(store, LookupEncoder(table), q, K=10, trials=10, seed=4)
        assert a.to_dict() == b.to_dict()
        assert len(set(a.trial_maps)) > 1

    def test_missing_instance(self):
        store, enc, queries = three_instance_scenario()
        del store.records[2]
        with pytest.raises(EvaluationError, match="not registered"):
            evaluate_map(store, enc, queries, K=2)

    def test_k_too_large(self):
        store, enc, queries = three_instance_scenario()
        with pytest.raises(EvaluationError, match="fewer than K"):
            evaluate_map(store, enc, queries, K=3)

    def test_report_json(self):
        store, enc, queries = three_instance_scenario()
        d = evaluate_map(store, enc, queries, K=2, trials=1).to_dict()
        json.dumps(d)
        assert {"map_score", "per_instance_ap", "diff_instance_rate", "diff_class_rate", "trials", "K"} <= set(d)


def _res(iid, cls):
    return RetrievalResult(iid, 1.0, cls, np.zeros(3))


class TestBreakdown:
    def test_all_success(self):
        assert error_breakdown([(i, "a", _res(i, "a")) for i in range(5)]) == (0.0, 0.0)

    def test_all_wrong_class(self):
        assert error_breakdown([(i, "a", _res(i, "b")) for i in range(5)]) == (0.0, 1.0)

    def test_mixed(self):
        rows = [(0, "a", _res(1, "a"))] * 2 + [(0, "a", _res(2, "b"))] * 3 + [(0, "a", _res(0, "a"))] * 5
        assert error_breakdown(rows) == (0.2, 0.3)

    def test_empty(self):
        with pytest.raises(EvaluationError):
            error_breakdown([])


class TestARI:
    def test_identical(self):
        assert ari([0, 0, 1, 1, 2], [0, 0, 1, 1, 2]) == 1.0

    def test_constant_vs_partition(self):
        assert ari([0, 0, 0, 0, 0, 0], [0, 0, 1, 1, 2, 2]) == 0.0

    def test_hand_computed(self):
        # pairs: index 1, row sum 2, column sum 1, n choose 2 = 6
        # expected 1/3, max 3/2 -> (1 - 1/3) / (3/2 - 1/3) = 4/7
        assert ari([0, 0, 1, 1], [0, 0, 1, 2]) == pytest.approx(4 / 7, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(EvaluationError):
            ari([0, 1], [0, 1, 1])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.data())
    def test_symmetry_permutation_and_sklearn(self, a, data):
        b = data.draw(st.lists(st.integers(0, 4), min_size=len(a), max_size=len(a)))
        perm = data.draw(st.permutations(range(5)))
        val = ari(a, b)
        assert val == pytest.approx(ari(b, a), abs=1e-12)
        assert val == pytest.approx(ari([perm[x] for x in a], b), abs=1e-12)
        assert val == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)
        assert val <= 1.0 + 1e-12


class TestKMeans:
    def test_two_blobs(self, rng):
        x = np.vstack([rng.normal(0, 0.1, (20, 4)), rng.normal(5, 0.1, (20, 4))])
        labels = kmeans(x, 2, seed=0)
        assert ari(labels, [0] * 20 + [1] * 20) == 1.0

    def test_k_equals_n(self, rng):
        x = rng.normal(size=(7, 3))
        labels = kmeans(x, 7, seed=0)
        assert len(set(labels)) == 7
        assert within_cluster_ss(x, labels) == 0.0

    def test_planted_beats_random_assignments(self):
        rng = np.random.default_rng(11)
        centers = np.array([[0, 0], [4, 0], [0, 4]], float)
        x = np.vstack([c + rng.normal(0, 0.5, (4, 2)) for c in centers])
        best = within_cluster_ss(x, kmeans(x, 3, seed=0, restarts=10))
        for _ in range(1000):
            labels = rng.integers(0, 3, size=12)
            assert best <= within_cluster_ss(x, labels) + 1e-12

    def test_deterministic(self, rng):
        x = rng.normal(size=(30, 5))
        assert np.array_equal(kmeans(x, 4, seed=3), kmeans(x, 4, seed=3))

    def test_bad_k(self, rng):
        with pytest.raises(EvaluationError):
            kmeans(rng.normal(size=(3, 2)), 0)
        with pytest.raises(EvaluationError):
            kmeans(rng.normal(size=(3, 2)), 4)


class TestRepresentationScore:
    def _ds(self, n_inst=4, views=6):
        items = [ObservationImage(_img(i), i, "a", v) for i in range(n_inst) for v in range(views)]
        return MultiViewDataset(items)

    def test_distinct_constants(self):
        enc = LookupEncoder(np.eye(4) * 3 + 1)
        rep = representation_score(enc, self._ds(), self._ds())
        assert (rep.ari_train, rep.ari_test, rep.k) == (1.0, 1.0, 4)

    def test_collapsed_encoder(self):
        rng = np.random.default_rng(0)
        items = [ObservationImage(_img(j), j // 8, "a", j) for j in range(64)]
        enc = LookupEncoder(np.ones((64, 16)) + rng.normal(0, 1e-3, (64, 16)))
        rep = representation_score(enc, MultiViewDataset(items))
        assert abs(rep.ari_train) < 0.1
        assert rep.ari_test is None

    def test_coords_for_plotting(self, tiny_ds):
        m = build_encoder(num_classes=4, seed=0, **SMALL)
        rep = representation_score(m, tiny_ds)
        assert rep.coords.shape == (len(tiny_ds), 3)
        assert rep.labels.tolist() == tiny_ds.labels().tolist()


class TestPCA:
    def test_exact_subspace(self, rng):
        basis = np.linalg.qr(rng.normal(size=(8, 3)))[0]
        x = rng.normal(size=(50, 3)) @ basis.T + rng.normal(size=8)
        r = pca(x, 3)
        recon = r.coords @ r.components + r.mean
        assert np.abs(recon - x).max() <= 1e-6

    def test_variances_non_increasing(self, rng):
        coords = pca_project(rng.normal(size=(40, 6)) * [5, 4, 3, 2, 1, 0.5], 3)
        v = coords.var(axis=0)
        assert v[0] >= v[1] >= v[2]

    def test_matches_eigendecomposition(self, rng):
        x = rng.normal(size=(60, 8)) @ rng.normal(size=(8, 8))
        r = pca(x, 3)
        eig = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1][:3]
        np.testing.assert_allclose(r.explained_variance, eig, rtol=1e-10)
        np.testing.assert_allclose(r.coords.var(axis=0, ddof=1), eig, rtol=1e-10)

    def test_rank_deficient_warns(self, rng):
        x = np.outer(rng.normal(size=10), rng.normal(size=5))
        with pytest.warns(RuntimeWarning):
            coords = pca_project(x, 3)
        assert coords.shape == (10, 1)

    def test_too_few_points(self):
        with pytest.raises(EvaluationError):
            pca_project(np.zeros((3, 5)), 3)


class TestPlots:
    def test_cluster_report(self, tmp_path, rng):
        rep = ClusterReport(0.5, 0.4, 3, "x", rng.normal(size=(12, 3)), np.repeat([0, 1, 2], 4))
        files = emit_plots(rep, tmp_path)
        assert sorted(p.name for p in files) == ["latent_scatter.json", "latent_scatter.png"]
        side = json.loads((tmp_path / "latent_scatter.json").read_text())
        assert len(side["coords"]) == 12

    def test_eval_report(self, tmp_path):
        store, enc, queries = three_instance_scenario()
        rep = evaluate_map(store, enc, queries, K=2, trials=1)
        files = emit_plots({"env1": rep, "env2": rep}, tmp_path)
        assert (tmp_path / "map_by_env.png") in files

    def test_deterministic_png(self, tmp_path, rng):
        coords = rng.normal(size=(10, 3))
        emit_plots(coords, tmp_path / "a", labels=np.arange(10) % 2)
        emit_plots(coords, tmp_path / "b", labels=np.arange(10) % 2)
        assert (tmp_path / "a" / "latent_scatter.png").read_bytes() == (tmp_path / "b" / "latent_scatter.png").read_bytes()

    @pytest.mark.parametrize("empty", [np.zeros((0, 3)), {}, []])
    def test_empty_input(self, tmp_path, empty):
        with pytest.raises(EvaluationError):
            emit_plots(empty, tmp_path / "out")
        assert not (tmp_path / "out").exists()

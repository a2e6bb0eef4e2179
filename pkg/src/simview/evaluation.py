"""Evaluation harness: retrieval mAP, failure breakdown, clustering ARI, PCA plots."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from .data import MultiViewDataset
from .encoder import embed_images, encoder_fingerprint
from .errors import EvaluationError
from .registry import FeatureStore, check_fingerprint
from .retrieval import RetrievalResult, retrieve_vector

log = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_TRIALS = 10


@dataclass
class EvalReport:
    map_score: float
    per_instance_ap: dict[int, float]
    diff_instance_rate: float
    diff_class_rate: float
    trials: int
    K: int
    trial_maps: list[float] = field(default_factory=list)
    # mean failures per trial, the count form of the two rates
    diff_instance_count: float = 0.0
    diff_class_count: float = 0.0

    @property
    def success_rate(self) -> float:
        return 1.0 - self.diff_instance_rate - self.diff_class_rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_instance_ap"] = {str(k): v for k, v in sorted(self.per_instance_ap.items())}
        return d


@dataclass
class ClusterReport:
    ari_train: float
    ari_test: float | None
    k: int
    condition: str = ""
    coords: np.ndarray | None = None  # PCA projection of the train features
    labels: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"ari_train": self.ari_train, "ari_test": self.ari_test, "k": self.k, "condition": self.condition}


# ---------------------------------------------------------------------------
# retrieval metrics


def error_breakdown(results) -> tuple[float, float]:
    """(diff_instance_rate, diff_class_rate) as fractions of all queries.

    ``results`` holds (query_instance_id, query_class, RetrievalResult) triples.
    """
    results = list(results)
    if not results:
        raise EvaluationError("no retrieval results to break down")
    diff_instance = diff_class = 0
    for qid, qclass, res in results:
        if res.class_label != qclass:
            diff_class += 1
        elif res.instance_id != qid:
            diff_instance += 1
    n = len(results)
    return diff_instance / n, diff_class / n


def evaluate_map(
    store: FeatureStore,
    encoder,
    queries: MultiViewDataset,
    K: int = DEFAULT_K,
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
) -> EvalReport:
    """Mean over instances of the top-1 success rate over K query views.

    Each trial draws K query views per instance without replacement; the
    report averages over ``trials`` draws seeded from ``seed``.
    """
    if K < 1 or trials < 1:
        raise EvaluationError("K and trials must be >= 1")
    by_instance: dict[int, list[int]] = {}
    for idx, it in enumerate(queries.items):
        by_instance.setdefault(it.instance_id, []).append(idx)
    if not by_instance:
        raise EvaluationError("no query images")
    for iid, idxs in by_instance.items():
        if iid not in store.records:
            raise EvaluationError(f"query instance {iid} is not registered in the store")
        if len(idxs) < K:
            raise EvaluationError(f"instance {iid} has {len(idxs)} query views, fewer than K={K}")

    check_fingerprint(store, encoder_fingerprint(encoder))
    vectors = embed_images(encoder, queries.images())
    results: list[RetrievalResult] = [retrieve_vector(store, v) for v in vectors]

    trial_maps, trial_ap, di_rates, dc_rates = [], [], [], []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        aps, sampled = {}, []
        for iid, idxs in sorted(by_instance.items()):
            chosen = rng.choice(len(idxs), size=K, replace=False)
            hits = [results[idxs[c]].instance_id == iid for c in sorted(chosen)]
            aps[iid] = float(np.mean(hits))
            sampled += [(iid, queries.items[idxs[c]].class_label, results[idxs[c]]) for c in sorted(chosen)]
        trial_ap.append(aps)
        trial_maps.append(float(np.mean(list(aps.values()))))
        di, dc = error_breakdown(sampled)
        di_rates.append(di)
        dc_rates.append(dc)

    n_queries = K * len(by_instance)
    per_instance = {iid: float(np.mean([a[iid] for a in trial_ap])) for iid in sorted(by_instance)}
    report = EvalReport(
        map_score=float(np.mean(trial_maps)),
        per_instance_ap=per_instance,
        diff_instance_rate=float(np.mean(di_rates)),
        diff_class_rate=float(np.mean(dc_rates)),
        trials=trials,
        K=K,
        trial_maps=trial_maps,
        diff_instance_count=float(np.mean(di_rates)) * n_queries,
        diff_class_count=float(np.mean(dc_rates)) * n_queries,
    )
    log.info(
        "mAP %.4f; failures per trial: %.2f diff-instance, %.2f diff-class of %d queries",
        report.map_score, report.diff_instance_count, report.diff_class_count, n_queries,
    )
    return report


# ---------------------------------------------------------------------------
# clustering


def kmeans(features, k: int, seed: int = 0, restarts: int = 10) -> np.ndarray:
    """k-means++ with ``restarts`` initializations; keeps the lowest within-cluster SS."""
    from sklearn.cluster import KMeans

    x = np.asarray(features, dtype=np.float64)
    if k < 1:
        raise EvaluationError("k must be >= 1")
    if k > len(x):
        raise EvaluationError(f"k={k} exceeds the {len(x)} features")
    km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, random_state=seed)
    return km.fit_predict(x).astype(np.int64)


def within_cluster_ss(features, labels) -> float:
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    return float(sum(((x[labels == c] - x[labels == c].mean(0)) ** 2).sum() for c in np.unique(labels)))


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index from the contingency table of two labelings."""
    a, b = np.asarray(labels_a), np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise EvaluationError("label arrays must be 1-D and equally long")
    if a.size < 2:
        raise EvaluationError("need at least 2 labels")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    index = sum(comb(int(n), 2) for n in table.ravel())
    sum_a = sum(comb(int(n), 2) for n in table.sum(1))
    sum_b = sum(comb(int(n), 2) for n in table.sum(0))
    expected = sum_a * sum_b / comb(a.size, 2)
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        # both partitions trivial in the same way
        return 1.0
    return float((index - expected) / (max_index - expected))


def representation_score(
    encoder,
    ds: MultiViewDataset,
    ds_test: MultiViewDataset | None = None,
    condition: str = "",
    seed: int = 0,
    restarts: int = 10,
) -> ClusterReport:
    """ARI between k-means clusters of the embeddings and the true instance IDs.

    k is the number of distinct instances in each dataset.
    """

    def score(d):
        k = len(d.instance_ids)
        if len(d) < k or k == 0:
            raise EvaluationError("fewer items than instances")
        feats = embed_images(encoder, d.images())
        return ari(d.labels(), kmeans(feats, k, seed=seed, restarts=restarts)), feats, k

    ari_train, feats, k = score(ds)
    ari_test = score(ds_test)[0] if ds_test is not None else None
    coords = pca_project(feats, 3) if len(feats) >= 4 else None
    return ClusterReport(ari_train, ari_test, k, condition, coords, ds.labels())


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray


def pca(features, dims: int = 3) -> PCAResult:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < dims + 1:
        raise EvaluationError(f"need at least {dims + 1} features for a {dims}-D projection")
    mean = x.mean(0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2 / (len(x) - 1)
    rank = int((s > s.max() * max(x.shape) * np.finfo(float).eps).sum()) if s.size and s.max() > 0 else 0
    if rank < dims:
        warnings.warn(f"features have rank {rank}; returning {rank} components", RuntimeWarning, stacklevel=2)
        dims = rank
    comps = vt[:dims]
    # deterministic sign: largest-magnitude loading positive
    flip = np.sign(comps[np.arange(dims), np.abs(comps).argmax(1)])
    comps = comps * flip[:, None]
    return PCAResult(xc @ comps.T, comps, var[:dims], mean)


def pca_project(features, dims: int = 3) -> np.ndarray:
    return pca(features, dims).coords


# ---------------------------------------------------------------------------
# plots


def _save_fig(fig, path):
    fig.savefig(path, dpi=100, metadata={"Software": None})


def emit_latent_scatter(coords, labels, out_dir, name: str = "latent_scatter", title: str | None = None) -> list[Path]:
    """3D (or lower) scatter colored by instance plus a JSON sidecar."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.size == 0:
        raise EvaluationError("nothing to plot")
    labels = np.asarray(labels)
    if len(labels) != len(coords):
        raise EvaluationError("labels and coordinates differ in length")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig = plt.figure(figsize=(6, 5))
    cmap = plt.get_cmap("tab20")
    uniq = np.unique(labels)
    colors = [cmap(int(np.searchsorted(uniq, lab)) % 20) for lab in labels]
    if coords.shape[1] >= 3:
        ax = fig.add_subplot(projection="3d")
        ax.scatter(coords[:, 0], coords[:, 1], coords[:, 2], c=colors, s=12)
        ax.set_zlabel("PC3")
    else:
        ax = fig.add_subplot()
        ys = coords[:, 1] if coords.shape[1] > 1 else np.zeros(len(coords))
        ax.scatter(coords[:, 0], ys, c=colors, s=12)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    if title:
        ax.set_title(title)
    png, side = out / f"{name}.png", out / f"{name}.json"
    _save_fig(fig, png)
    plt.close(fig)
    payload = {"coords": coords.tolist(), "labels": [int(v) for v in labels], "title": title}
    side.write_text(json.dumps(payload, sort_keys=True))
    return [png, side]


def emit_map_chart(reports, out_dir, name: str = "map_by_env") -> list[Path]:
    """Bar chart of mAP per environment; ``reports`` maps environment name to EvalReport."""
    if isinstance(reports, EvalReport):
        reports = {"env": reports}
    reports = dict(reports)
    if not reports:
        raise EvaluationError("nothing to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(reports)
    values = [reports[n].map_score for n in names]
    fig, ax = plt.subplots(figsize=(max(4, len(names) * 0.8 + 2), 4))
    ax.bar(range(len(names)), values, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mAP")
    fig.tight_layout()
    png, side = out / f"{name}.png", out / f"{name}.json"
    _save_fig(fig, png)
    plt.close(fig)
    side.write_text(json.dumps({n: reports[n].to_dict() for n in names}, sort_keys=True, indent=1))
    return [png, side]


def emit_plots(obj, out_dir, labels=None) -> list[Path]:
    """Dispatch on what is being plotted: EvalReport(s), ClusterReport, or raw coordinates."""
    if isinstance(obj, ClusterReport):
        if obj.coords is None:
            raise EvaluationError("cluster report carries no coordinates")
        return emit_latent_scatter(obj.coords, obj.labels, out_dir, title=obj.condition or None)
    if isinstance(obj, dict) and not obj:
        raise EvaluationError("nothing to plot")
    if isinstance(obj, EvalReport) or (isinstance(obj, dict) and all(isinstance(v, EvalReport) for v in obj.values())):
        return emit_map_chart(obj, out_dir)
    coords = np.asarray(obj if obj is not None else [], dtype=np.float64)
    if coords.size == 0:
        raise EvaluationError("nothing to plot")
    if labels is None:
        labels = np.zeros(len(coords), dtype=np.int64)
    return emit_latent_scatter(coords, labels, out_dir)

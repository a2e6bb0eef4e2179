"""Find the registered instance that best matches a query image.

Every instance is scored by the best cosine similarity among its observed
vectors; the instance with the highest score wins, ties going to the lowest
instance ID.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import embed_images, encoder_fingerprint
from .errors import RetrievalError
from .registry import FeatureStore, InstanceRecord, check_fingerprint


@dataclass
class RetrievalResult:
    instance_id: int
    similarity: float
    class_label: str
    position: np.ndarray
    per_instance_scores: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "similarity": self.similarity,
            "class_label": self.class_label,
            "position": [float(x) for x in self.position],
            "per_instance_scores": {str(k): v for k, v in sorted(self.per_instance_scores.items())},
        }


def _as_vector(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1)


def cosine_similarity(a, b) -> float:
    a, b = _as_vector(a), _as_vector(b)
    if a.shape != b.shape:
        raise RetrievalError(f"dimension mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise RetrievalError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _similarities(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    z = np.asarray(vectors, dtype=np.float64)
    if z.shape[1] != q.size:
        raise RetrievalError(f"dimension mismatch: store {z.shape[1]} vs query {q.size}")
    qn = np.linalg.norm(q)
    if qn == 0:
        raise RetrievalError("query feature vector is zero")
    # row-wise reductions so a vector's score does not depend on which other rows are present
    return np.clip((z * q).sum(axis=1) / (np.sqrt((z * z).sum(axis=1)) * qn), -1.0, 1.0)


def instance_max_similarity(record: InstanceRecord, q) -> float:
    if record.count == 0:
        raise RetrievalError(f"instance {record.instance_id} has no observations")
    return float(_similarities(record.vectors, _as_vector(q)).max())


def retrieve_vector(store: FeatureStore, q) -> RetrievalResult:
    """Retrieval for an already encoded query vector."""
    if len(store) == 0:
        raise RetrievalError("feature store is empty")
    q = _as_vector(q)
    scores = {iid: instance_max_similarity(store.records[iid], q) for iid in sorted(store.records)}
    best = None
    for iid, m in scores.items():
        if best is None or m > scores[best]:
            best = iid
    rec = store.records[best]
    return RetrievalResult(best, scores[best], rec.class_label, rec.position.copy(), scores)


def retrieve(store: FeatureStore, query_image, encoder) -> RetrievalResult:
    check_fingerprint(store, encoder_fingerprint(encoder))
    q = embed_images(encoder, [query_image])[0]
    return retrieve_vector(store, q)


def top_k_neighbors(store: FeatureStore, q, k: int = 3) -> list[tuple[int, int, float]]:
    """The ``k`` individual observations closest to ``q`` as (instance_id, view_index, similarity).

    Sorted by descending similarity, then instance ID and view index.
    """
    if k < 1:
        raise RetrievalError("k must be >= 1")
    q = _as_vector(q)
    hits = []
    for iid in sorted(store.records):
        rec = store.records[iid]
        for view, s in zip(rec.view_indices, _similarities(rec.vectors, q)):
            hits.append((iid, int(view), float(s)))
    hits.sort(key=lambda t: (-t[2], t[0], t[1]))
    return hits[:k]

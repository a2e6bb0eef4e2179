"""Per-instance feature store: the semantic-map index queried at retrieval time.

Each instance keeps every feature vector it was observed with, together with
its class and 3D position from the semantic map. On disk a store is a
directory holding ``store.json`` (metadata) and ``store.vec`` (little-endian
float32 vectors, concatenated record by record).
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MultiViewDataset
from .encoder import embed_images, encoder_fingerprint
from .errors import ConsistencyError, FingerprintMismatchWarning, StoreFormatError

STORE_FORMAT = "simview-store"
STORE_VERSION = 1


@dataclass
class InstanceRecord:
    instance_id: int
    class_label: str
    position: np.ndarray  # meters
    vectors: np.ndarray  # N_i x dim, float32
    view_indices: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    def __eq__(self, other):
        if not isinstance(other, InstanceRecord):
            return NotImplemented
        return (
            self.instance_id == other.instance_id
            and self.class_label == other.class_label
            and np.array_equal(self.position, other.position)
            and self.vectors.dtype == other.vectors.dtype
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
            and list(self.view_indices) == list(other.view_indices)
        )


@dataclass
class FeatureStore:
    records: dict[int, InstanceRecord] = field(default_factory=dict)
    dim: int | None = None
    encoder_fingerprint: str | None = None

    def __len__(self):
        return len(self.records)

    @property
    def total_observations(self) -> int:
        return sum(r.count for r in self.records.values())

    def __eq__(self, other):
        if not isinstance(other, FeatureStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.encoder_fingerprint == other.encoder_fingerprint
            and sorted(self.records) == sorted(other.records)
            and all(self.records[k] == other.records[k] for k in self.records)
        )


def register_observation(store: FeatureStore, instance_id, class_label, position, vector, view_index=None) -> FeatureStore:
    """Add one observed feature vector to ``store`` (in place) and return it."""
    vec = np.asarray(vector, dtype=np.float32).reshape(-1)
    if not np.all(np.isfinite(vec)):
        raise ConsistencyError(f"non-finite feature vector for instance {instance_id}")
    if not np.any(vec):
        raise ConsistencyError(f"zero feature vector for instance {instance_id}; cosine similarity would be undefined")
    if store.dim is None:
        store.dim = int(vec.size)
    elif vec.size != store.dim:
        raise ConsistencyError(f"vector has dim {vec.size}, store holds dim {store.dim}")
    pos = np.asarray(position, dtype=np.float64).reshape(3)
    iid = int(instance_id)
    rec = store.records.get(iid)
    if rec is None:
        store.records[iid] = InstanceRecord(iid, str(class_label), pos, vec[None, :].copy(), [0 if view_index is None else int(view_index)])
        return store
    if rec.class_label != class_label:
        raise ConsistencyError(f"instance {iid} already registered as {rec.class_label!r}, not {class_label!r}")
    if not np.array_equal(rec.position, pos):
        raise ConsistencyError(f"instance {iid} already registered at {rec.position.tolist()}, not {pos.tolist()}")
    rec.vectors = np.concatenate([rec.vectors, vec[None, :]])
    rec.view_indices.append(rec.count - 1 if view_index is None else int(view_index))
    return store


def build_store(encoder, ds: MultiViewDataset, positions=None) -> FeatureStore:
    """Encode every observation in ``ds`` and register it under its instance."""
    if len(ds) == 0:
        raise ConsistencyError("cannot build a store from an empty dataset")
    positions = ds.positions if positions is None else positions
    for iid in ds.instance_ids:
        if iid not in positions:
            raise ConsistencyError(f"no semantic-map position for instance {iid}")
    vectors = embed_images(encoder, ds.images())
    store = FeatureStore(encoder_fingerprint=encoder_fingerprint(encoder))
    for it, vec in zip(ds.items, vectors):
        register_observation(store, it.instance_id, it.class_label, positions[it.instance_id], vec, it.view_index)
    return store


def save_store(store: FeatureStore, path) -> Path:
    """Write ``store.json`` + ``store.vec`` under ``path`` atomically."""
    path = Path(path)
    chunks, records, offset = [], [], 0
    for iid in sorted(store.records):
        rec = store.records[iid]
        raw = np.ascontiguousarray(rec.vectors, dtype="<f4").tobytes()
        records.append(
            {
                "instance_id": iid,
                "class_label": rec.class_label,
                "position": [float(x) for x in rec.position],
                "count": rec.count,
                "view_indices": [int(v) for v in rec.view_indices],
                "offset": offset,
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": STORE_FORMAT,
        "version": STORE_VERSION,
        "dim": store.dim,
        "encoder_fingerprint": store.encoder_fingerprint,
        "vec_bytes": len(blob),
        "vec_sha256": hashlib.sha256(blob).hexdigest(),
        "records": records,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / "store.vec").write_bytes(blob)
        (tmp / "store.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    return path


def load_store(path, expected_fingerprint: str | None = None) -> FeatureStore:
    path = Path(path)
    try:
        manifest = json.loads((path / "store.json").read_text())
    except (OSError, ValueError) as exc:
        raise StoreFormatError(f"cannot read store metadata in {path}: {exc}") from exc
    if manifest.get("format") != STORE_FORMAT:
        raise StoreFormatError(f"{path} is not a feature store")
    if manifest.get("version") != STORE_VERSION:
        raise StoreFormatError(f"store version {manifest.get('version')} is not supported (expected {STORE_VERSION})")
    try:
        blob = (path / "store.vec").read_bytes()
    except OSError as exc:
        raise StoreFormatError(f"cannot read store vectors in {path}: {exc}") from exc
    if len(blob) != manifest["vec_bytes"]:
        raise StoreFormatError(f"store vectors truncated: {len(blob)} of {manifest['vec_bytes']} bytes")
    if hashlib.sha256(blob).hexdigest() != manifest["vec_sha256"]:
        raise StoreFormatError("store vectors do not match their checksum")
    dim = manifest["dim"]
    store = FeatureStore(dim=dim, encoder_fingerprint=manifest["encoder_fingerprint"])
    for r in manifest["records"]:
        n = r["count"]
        vec = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=r["offset"]).astype(np.float32).reshape(n, dim)
        store.records[int(r["instance_id"])] = InstanceRecord(
            int(r["instance_id"]), r["class_label"], np.asarray(r["position"], dtype=np.float64), vec, list(r["view_indices"])
        )
    if expected_fingerprint is not None:
        check_fingerprint(store, expected_fingerprint)
    return store


def check_fingerprint(store: FeatureStore, fingerprint: str | None) -> bool:
    """Warn when the store was built by a different encoder. Returns True on match."""
    if fingerprint is None or store.encoder_fingerprint is None:
        return True
    if fingerprint != store.encoder_fingerprint:
        warnings.warn(
            f"store was built with encoder {store.encoder_fingerprint}, querying with {fingerprint}",
            FingerprintMismatchWarning,
            stacklevel=2,
        )
        return False
    return True

"""Multi-view object datasets and the observation-side image handling.

Datasets are lists of square RGB crops, each labeled with the instance ID and
class that the semantic map assigns to the observed object. They come either
from the synthetic renderer below or from a directory tree laid out as
``<root>/<class>/<instance_dir>/<view>.png``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetLoadError, EmptyMaskError, ParameterError, SplitError

DEFAULT_SPACING_M = 0.30


@dataclass
class ObservationImage:
    pixels: np.ndarray  # H x W x 3, uint8
    instance_id: int
    class_label: str
    view_index: int
    camera_position: np.ndarray | None = None


@dataclass
class MultiViewDataset:
    items: list[ObservationImage]
    positions: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        class_of: dict[int, str] = {}
        for it in self.items:
            if it.instance_id < 0:
                raise ParameterError(f"negative instance id {it.instance_id}")
            if it.pixels.dtype != np.uint8 or it.pixels.ndim != 3 or it.pixels.shape[2] != 3:
                raise ParameterError("observation pixels must be HxWx3 uint8")
            prev = class_of.setdefault(it.instance_id, it.class_label)
            if prev != it.class_label:
                raise ParameterError(
                    f"instance {it.instance_id} labeled both {prev!r} and {it.class_label!r}"
                )
        self._class_of = class_of

    def __len__(self):
        return len(self.items)

    @property
    def instance_ids(self) -> list[int]:
        return sorted(self._class_of)

    @property
    def class_of(self) -> dict[int, str]:
        return dict(sorted(self._class_of.items()))

    @property
    def views_per_instance(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for it in self.items:
            counts[it.instance_id] = counts.get(it.instance_id, 0) + 1
        return dict(sorted(counts.items()))

    def images(self) -> list[np.ndarray]:
        return [it.pixels for it in self.items]

    def labels(self) -> np.ndarray:
        return np.array([it.instance_id for it in self.items], dtype=np.int64)

    def subset(self, items: list[ObservationImage]) -> "MultiViewDataset":
        ids = {it.instance_id for it in items}
        return MultiViewDataset(
            list(items), {k: v for k, v in self.positions.items() if k in ids}
        )


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel box."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1


@dataclass
class OccupancyGrid:
    cells: np.ndarray  # rows along y, cols along x; True = free
    resolution: float  # meters per cell
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=bool)
        if self.cells.ndim != 2:
            raise ParameterError("occupancy grid must be 2D")
        if not self.resolution > 0:
            raise ParameterError("grid resolution must be positive")


# ---------------------------------------------------------------------------
# observation preprocessing


def mask_to_bbox(mask: np.ndarray) -> BBox:
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def crop_square(image: np.ndarray, bbox: BBox) -> np.ndarray:
    """Crop a square window whose side is the longer bbox side.

    The window is centered on the bbox; whatever falls outside the source
    image is filled with black.
    """
    h, w = image.shape[:2]
    if not (0 <= bbox.row_min <= bbox.row_max < h and 0 <= bbox.col_min <= bbox.col_max < w):
        raise ParameterError(f"{bbox} is outside a {h}x{w} image")
    side = max(bbox.height, bbox.width)
    # integer offsets keep the bbox inside the window even for odd slack
    top = bbox.row_min - (side - bbox.height) // 2
    left = bbox.col_min - (side - bbox.width) // 2
    out = np.zeros((side, side) + image.shape[2:], dtype=image.dtype)
    r0, r1 = max(top, 0), min(top + side, h)
    c0, c1 = max(left, 0), min(left + side, w)
    out[r0 - top : r1 - top, c0 - left : c1 - left] = image[r0:r1, c0:c1]
    return out


def exploration_points(grid: OccupancyGrid, spacing_m: float = DEFAULT_SPACING_M) -> np.ndarray:
    """Lattice points at multiples of ``spacing_m`` from the grid origin that land on free cells.

    Returns an (M, 2) array of (x, y) in meters, x varying fastest.
    """
    if not spacing_m > 0:
        raise ParameterError("spacing must be positive")
    n_rows, n_cols = grid.cells.shape
    ox, oy = grid.origin
    eps = 1e-9

    def steps(extent):
        n = int(math.floor(extent / spacing_m + eps)) + 1
        return [k * spacing_m for k in range(n) if k * spacing_m < extent - eps]

    points = []
    for dy in steps(n_rows * grid.resolution):
        row = int(math.floor(dy / grid.resolution + eps))
        for dx in steps(n_cols * grid.resolution):
            col = int(math.floor(dx / grid.resolution + eps))
            if grid.cells[row, col]:
                points.append((ox + dx, oy + dy))
    return np.array(points, dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# synthetic multi-view renderer

_FAMILIES = ("cuboid", "ellipsoid")
_LIGHT = np.array([0.45, 0.3, 0.84])
_LIGHT /= np.linalg.norm(_LIGHT)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


@dataclass
class _Primitive:
    family: str
    half_extents: np.ndarray  # object frame, meters
    yaw: float
    face_colors: np.ndarray  # 6 x 3 in [0, 1], indexed by dominant normal axis and sign
    stripe_axis: int
    stripe_freq: float
    stripe_phase: float
    stripe_depth: float


def _class_shape(class_index: int, seed: int) -> tuple[str, np.ndarray]:
    rng = np.random.default_rng([seed, 7919, class_index])
    family = _FAMILIES[class_index % len(_FAMILIES)]
    return family, rng.uniform(0.3, 1.0, size=3)


def _instance_primitive(instance_id: int, class_index: int, seed: int) -> _Primitive:
    family, base = _class_shape(class_index, seed)
    rng = np.random.default_rng([seed, 104729, instance_id])
    hue = rng.uniform()
    faces = []
    for _ in range(6):
        h = (hue + rng.normal(0, 0.12)) % 1.0
        faces.append(_hsv_to_rgb(h, rng.uniform(0.35, 0.95), rng.uniform(0.45, 1.0)))
    return _Primitive(
        family=family,
        half_extents=base * rng.uniform(0.75, 1.25, size=3),
        yaw=rng.uniform(0, 2 * math.pi),
        face_colors=np.array(faces),
        stripe_axis=int(rng.integers(3)),
        stripe_freq=rng.uniform(6.0, 18.0),
        stripe_phase=rng.uniform(0, 2 * math.pi),
        stripe_depth=rng.uniform(0.2, 0.5),
    )


def _raycast(prim: _Primitive, azimuth, elevation, size, half_width, offset):
    """Orthographic render of one primitive; returns (rgb float HxWx3, hit mask)."""
    cam_dir = np.array(
        [math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)]
    )
    forward = -cam_dir
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)

    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    sx = (coords[None, :] - offset[1]) * half_width
    sy = -(coords[:, None] - offset[0]) * half_width
    origins = 4.0 * cam_dir + sx[..., None] * right + sy[..., None] * up  # H x W x 3

    c, s = math.cos(-prim.yaw), math.sin(-prim.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = origins @ rot.T
    d = rot @ forward
    a = prim.half_extents

    if prim.family == "ellipsoid":
        os_, ds = o / a, d / a
        qa = ds @ ds
        qb = 2.0 * (os_ @ ds)
        qc = (os_ * os_).sum(-1) - 1.0
        disc = qb * qb - 4 * qa * qc
        hit = disc >= 0
        t = (-qb - np.sqrt(np.where(hit, disc, 0.0))) / (2 * qa)
        p = o + t[..., None] * d
        normal = p / (a * a)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(np.abs(d) > 1e-12, 1.0 / d, 1e12)
        t1, t2 = (-a - o) * inv, (a - o) * inv
        tnear = np.minimum(t1, t2).max(-1)
        tfar = np.maximum(t1, t2).min(-1)
        hit = tnear <= tfar
        p = o + tnear[..., None] * d
        rel = np.abs(p) / a
        axis = rel.argmax(-1)
        normal = np.zeros_like(p)
        np.put_along_axis(normal, axis[..., None], np.sign(np.take_along_axis(p, axis[..., None], -1)), -1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True) + 1e-12

    scaled = normal * a
    dom = np.abs(scaled).argmax(-1)
    sign = np.take_along_axis(scaled, dom[..., None], -1)[..., 0] > 0
    base = prim.face_colors[dom * 2 + sign.astype(int)]
    stripes = np.sin(prim.stripe_freq * p[..., prim.stripe_axis] + prim.stripe_phase) > 0
    base = base * (1.0 - prim.stripe_depth * stripes[..., None])

    world_normal = normal @ rot  # inverse rotation back to world frame
    shade = 0.35 + 0.65 * np.clip(world_normal @ _LIGHT, 0.0, None)
    return base * shade[..., None], hit


def render_view(
    prim: _Primitive, azimuth: float, elevation: float, canvas: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Render one observation onto a noisy background; returns (uint8 RGB, object mask)."""
    radius = float(np.linalg.norm(prim.half_extents))
    fill = rng.uniform(0.45, 0.8)
    offset = rng.uniform(-0.35, 0.35, size=2)
    rgb, hit = _raycast(prim, azimuth, elevation, canvas, radius / fill, offset)
    bg_level = rng.uniform(0.25, 0.75)
    bg = bg_level + rng.normal(0.0, 0.03, size=(canvas, canvas, 1))
    img = np.where(hit[..., None], rgb, np.broadcast_to(bg, rgb.shape))
    return np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8), hit


def generate_synthetic_multiview(
    num_instances: int,
    classes: list[str],
    views_per_instance: int = 24,
    image_size: int = 64,
    seed: int = 0,
) -> MultiViewDataset:
    """Render textured primitives from viewpoints spread around the full circle.

    Instances are assigned to classes round-robin; a class fixes the shape
    family and base proportions, an instance perturbs proportions and draws
    its own colors and stripe texture. Each view is rendered into a larger
    canvas, then cut out through mask -> bbox -> square crop and resized,
    the same path real observations take.
    """
    if num_instances < 2:
        raise ParameterError("need at least 2 instances")
    if views_per_instance < 2:
        raise ParameterError("need at least 2 views per instance")
    if image_size < 32:
        raise ParameterError("image_size must be >= 32")
    if not classes:
        raise ParameterError("need at least one class")

    canvas = 2 * image_size
    items = []
    positions = {}
    for iid in range(num_instances):
        cls_idx = iid % len(classes)
        prim = _instance_primitive(iid, cls_idx, seed)
        rng = np.random.default_rng([seed, 15485863, iid])
        center = np.array([rng.uniform(0, 10), rng.uniform(0, 10), float(prim.half_extents[2])])
        positions[iid] = center
        az0 = rng.uniform(0, 2 * math.pi)
        for v in range(views_per_instance):
            az = az0 + 2 * math.pi * v / views_per_instance
            el = math.radians(rng.uniform(10.0, 45.0))
            rgb, mask = render_view(prim, az, el, canvas, rng)
            crop = crop_square(rgb, mask_to_bbox(mask))
            pixels = np.asarray(
                Image.fromarray(crop).resize((image_size, image_size), Image.BILINEAR)
            )
            dist = 2.0
            cam = center + dist * np.array(
                [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
            )
            items.append(ObservationImage(pixels, iid, classes[cls_idx], v, cam))
    return MultiViewDataset(items, positions)


# ---------------------------------------------------------------------------
# directory layout


def load_directory_dataset(root_path) -> MultiViewDataset:
    """Load ``<root>/<class>/<instance_dir>/<view>.png``.

    Instance IDs are dense from 0 in lexicographic (class, instance_dir)
    order. An optional ``meta.json`` in an instance directory may carry
    ``instance_id`` (overrides the dense ID), ``position`` and
    ``camera_positions`` (keyed by file name).
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetLoadError(f"dataset root not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetLoadError(f"no class directories under {root}")

    items = []
    positions = {}
    seen: dict[int, Path] = {}
    next_id = 0
    for cdir in class_dirs:
        for idir in sorted(p for p in cdir.iterdir() if p.is_dir()):
            files = sorted(idir.glob("*.png"))
            if not files:
                raise DatasetLoadError(f"instance directory has no images: {idir}")
            meta = {}
            meta_path = idir / "meta.json"
            if meta_path.exists():
                try:
                    meta = json.loads(meta_path.read_text())
                except (OSError, ValueError) as exc:
                    raise DatasetLoadError(f"unreadable metadata {meta_path}: {exc}") from exc
            cams = meta.get("camera_positions", {})
            iid = int(meta.get("instance_id", next_id))
            if iid in seen:
                raise DatasetLoadError(f"instance id {iid} of {idir} already used by {seen[iid]}")
            seen[iid] = idir
            if "position" in meta:
                positions[iid] = np.asarray(meta["position"], dtype=np.float64)
            for view_index, f in enumerate(files):
                try:
                    with Image.open(f) as im:
                        pixels = np.asarray(im.convert("RGB"))
                except OSError as exc:
                    raise DatasetLoadError(f"unreadable image {f}: {exc}") from exc
                cam = cams.get(f.name)
                items.append(
                    ObservationImage(
                        pixels,
                        iid,
                        cdir.name,
                        view_index,
                        None if cam is None else np.asarray(cam, dtype=np.float64),
                    )
                )
            next_id += 1
    if not items:
        raise DatasetLoadError(f"no instance directories under {root}")
    return MultiViewDataset(items, positions)


def write_directory_dataset(ds: MultiViewDataset, root_path) -> Path:
    """Write ``ds`` in the layout read by :func:`load_directory_dataset`."""
    root = Path(root_path)
    by_instance: dict[int, list[ObservationImage]] = {}
    for it in ds.items:
        by_instance.setdefault(it.instance_id, []).append(it)
    for iid, views in sorted(by_instance.items()):
        idir = root / views[0].class_label / f"inst_{iid:04d}"
        idir.mkdir(parents=True, exist_ok=True)
        cams = {}
        for it in sorted(views, key=lambda x: x.view_index):
            name = f"{it.view_index:03d}.png"
            Image.fromarray(it.pixels).save(idir / name)
            if it.camera_position is not None:
                cams[name] = [float(x) for x in it.camera_position]
        meta = {"instance_id": int(iid)}
        if iid in ds.positions:
            meta["position"] = [float(x) for x in ds.positions[iid]]
        if cams:
            meta["camera_positions"] = cams
        (idir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return root


# ---------------------------------------------------------------------------


def split_dataset(
    ds: MultiViewDataset, train_fraction: float = 0.5, seed: int = 0
) -> tuple[MultiViewDataset, MultiViewDataset]:
    """Per-instance stratified split of views into train and test."""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError("train_fraction must lie strictly between 0 and 1")
    by_instance: dict[int, list[int]] = {}
    for idx, it in enumerate(ds.items):
        by_instance.setdefault(it.instance_id, []).append(idx)
    train_idx, test_idx = [], []
    for iid, idxs in sorted(by_instance.items()):
        if len(idxs) < 2:
            raise SplitError(f"instance {iid} has fewer than 2 views")
        rng = np.random.default_rng([seed, iid])
        order = rng.permutation(len(idxs))
        n_train = min(max(int(round(train_fraction * len(idxs))), 1), len(idxs) - 1)
        train_idx += sorted(idxs[i] for i in order[:n_train])
        test_idx += sorted(idxs[i] for i in order[n_train:])
    return (
        ds.subset([ds.items[i] for i in sorted(train_idx)]),
        ds.subset([ds.items[i] for i in sorted(test_idx)]),
    )

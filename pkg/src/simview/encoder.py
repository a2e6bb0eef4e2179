"""Image encoder: backbone, SimSiam projector/predictor, instance classifier.

Two backbone profiles are available. ``small`` is a five-block conv net that
trains on a CPU in minutes; ``resnet50`` wraps the torchvision ResNet-50 so
externally trained weights can be attached. Both expose named stages so that
a prefix of the backbone can be frozen during fine-tuning.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from torch import nn

from .errors import ModelError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CHECKPOINT_FORMAT = "simview-checkpoint"
CHECKPOINT_VERSION = 1

PROFILES = {
    "small": dict(embed_dim=128, proj_dim=128, proj_hidden=128, pred_hidden=32, freeze_boundary="block3"),
    "resnet50": dict(embed_dim=2048, proj_dim=2048, proj_hidden=2048, pred_hidden=512, freeze_boundary="layer3"),
}


@dataclass
class EncoderConfig:
    profile: str = "small"
    num_classes: int = 2
    embed_dim: int = 128
    proj_dim: int = 128
    proj_hidden: int = 128
    pred_hidden: int = 32
    freeze_boundary: str = "block3"
    resize_size: int = 256
    crop_size: int = 224
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    @classmethod
    def for_profile(cls, profile: str = "small", **overrides) -> "EncoderConfig":
        if profile not in PROFILES:
            raise ModelError(f"unknown backbone profile {profile!r}")
        kw = dict(PROFILES[profile])
        kw.update(overrides)
        return cls(profile=profile, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["mean"], d["std"] = tuple(d["mean"]), tuple(d["std"])
        return cls(**d)


def _conv_block(cin, cout, stride, pool=False):
    layers = [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def _small_backbone(embed_dim):
    return nn.Sequential(
        OrderedDict(
            block1=_conv_block(3, 16, 2, pool=True),
            block2=_conv_block(16, 32, 1),
            block3=_conv_block(32, 64, 2),
            block4=_conv_block(64, 96, 2),
            block5=_conv_block(96, embed_dim, 2),
            pool=nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten()),
        )
    )


def _resnet50_backbone():
    from torchvision.models import resnet50

    r = resnet50(weights=None)
    return nn.Sequential(
        OrderedDict(
            stem=nn.Sequential(r.conv1, r.bn1, r.relu, r.maxpool),
            layer1=r.layer1,
            layer2=r.layer2,
            layer3=r.layer3,
            layer4=r.layer4,
            pool=nn.Sequential(r.avgpool, nn.Flatten()),
        )
    )


class EncoderModel(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        if c.profile == "small":
            self.backbone = _small_backbone(c.embed_dim)
        elif c.profile == "resnet50":
            if c.embed_dim != 2048:
                raise ModelError("resnet50 profile has a 2048-d embedding")
            self.backbone = _resnet50_backbone()
        else:
            raise ModelError(f"unknown backbone profile {c.profile!r}")
        # SimSiam heads: 3-layer projector, 2-layer bottleneck predictor
        self.projector = nn.Sequential(
            nn.Linear(c.embed_dim, c.proj_hidden, bias=False),
            nn.BatchNorm1d(c.proj_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(c.proj_hidden, c.proj_hidden, bias=False),
            nn.BatchNorm1d(c.proj_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(c.proj_hidden, c.proj_dim, bias=False),
            nn.BatchNorm1d(c.proj_dim, affine=False),
        )
        self.predictor = nn.Sequential(
            nn.Linear(c.proj_dim, c.pred_hidden, bias=False),
            nn.BatchNorm1d(c.pred_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(c.pred_hidden, c.proj_dim),
        )
        self.classifier = nn.Linear(c.embed_dim, c.num_classes)
        if c.freeze_boundary not in self.stage_names:
            raise ModelError(f"unknown freeze boundary {c.freeze_boundary!r}")
        self.frozen_stages: list[str] = []

    @property
    def stage_names(self) -> list[str]:
        return [n for n, _ in self.backbone.named_children() if n != "pool"]

    @property
    def fingerprint(self) -> str:
        return state_fingerprint(self)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ModelError(f"expected a N x 3 x H x W batch, got {tuple(x.shape)}")
        return self.backbone(x)

    def forward(self, x):
        return self.embed(x)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen stages keep their batch-norm statistics
        for name in self.frozen_stages:
            getattr(self.backbone, name).eval()
        return self


def reset_classifier(model: EncoderModel, num_classes: int, seed: int = 0) -> EncoderModel:
    """Attach a fresh linear instance classifier of width ``num_classes``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.classifier = nn.Linear(model.config.embed_dim, num_classes)
    model.config.num_classes = num_classes
    return model


def build_encoder(profile: str = "small", num_classes: int = 2, seed: int = 0, **overrides) -> EncoderModel:
    """Construct a freshly initialized encoder; initialization depends only on ``seed``."""
    cfg = EncoderConfig.for_profile(profile, num_classes=num_classes, **overrides)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EncoderModel(cfg)


# ---------------------------------------------------------------------------
# image pipelines


def _to_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        t = image
        if t.dtype == torch.uint8:
            t = t.float() / 255.0
        return t
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.size == 0:
        raise ModelError(f"expected a nonempty H x W x 3 image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float() / 255.0


def _normalize(t, cfg):
    mean = torch.tensor(cfg.mean, dtype=t.dtype).view(3, 1, 1)
    std = torch.tensor(cfg.std, dtype=t.dtype).view(3, 1, 1)
    return (t - mean) / std


def preprocess(image, config: EncoderConfig | None = None) -> torch.Tensor:
    """Resize to a square, center-crop, scale to [0, 1] and normalize per channel."""
    cfg = config or EncoderConfig()
    t = _to_tensor(image)
    t = TF.resize(t, [cfg.resize_size, cfg.resize_size], antialias=True)
    t = TF.center_crop(t, [cfg.crop_size, cfg.crop_size])
    return _normalize(t, cfg)


@dataclass
class AugmentParams:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    flip_p: float = 0.5


def _resized_crop_box(h, w, rng, scale, ratio):
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def augment_view(t: torch.Tensor, rng: np.random.Generator, cfg: EncoderConfig, params: AugmentParams) -> torch.Tensor:
    """One random view: crop+resize, color jitter, grayscale, horizontal flip, normalize."""
    _, h, w = t.shape
    top, left, ch, cw = _resized_crop_box(h, w, rng, params.crop_scale, params.crop_ratio)
    t = TF.resized_crop(t, top, left, ch, cw, [cfg.crop_size, cfg.crop_size], antialias=True)
    if rng.uniform() < params.jitter_p:
        b, c, s, hue = params.jitter
        factors = [rng.uniform(1 - b, 1 + b), rng.uniform(1 - c, 1 + c), rng.uniform(1 - s, 1 + s), rng.uniform(-hue, hue)]
        for op in rng.permutation(4):
            if op == 0:
                t = TF.adjust_brightness(t, factors[0])
            elif op == 1:
                t = TF.adjust_contrast(t, factors[1])
            elif op == 2:
                t = TF.adjust_saturation(t, factors[2])
            else:
                t = TF.adjust_hue(t, factors[3])
    if rng.uniform() < params.grayscale_p:
        t = TF.rgb_to_grayscale(t, num_output_channels=3)
    if rng.uniform() < params.flip_p:
        t = TF.horizontal_flip(t)
    return _normalize(t, cfg)


def augment_pair(image, seed: int, config: EncoderConfig | None = None, params: AugmentParams | None = None):
    cfg = config or EncoderConfig()
    params = params or AugmentParams()
    t = _to_tensor(image)
    rng = np.random.default_rng(seed)
    return augment_view(t, rng, cfg, params), augment_view(t, rng, cfg, params)


# ---------------------------------------------------------------------------
# inference


def encode(model: EncoderModel, inputs: torch.Tensor) -> np.ndarray:
    """Backbone embedding of one preprocessed input (3xHxW) or a batch (Nx3xHxW)."""
    single = inputs.dim() == 3
    x = inputs.unsqueeze(0) if single else inputs
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model.embed(x)
    finally:
        model.train(was_training)
    if out.shape[-1] != model.config.embed_dim:
        raise ModelError("backbone output does not match the configured embedding width")
    out = out.numpy().astype(np.float32)
    return out[0] if single else out


def embed_images(encoder, images, batch_size: int = 64) -> np.ndarray:
    """Feature vectors (N x D, float32) for a list of RGB rasters.

    ``encoder`` is either an :class:`EncoderModel` or any callable mapping a
    list of rasters to an N x D array, which is how externally pretrained
    encoders plug in.
    """
    images = list(images)
    if isinstance(encoder, EncoderModel):
        chunks = []
        for i in range(0, len(images), batch_size):
            batch = torch.stack([preprocess(im, encoder.config) for im in images[i : i + batch_size]])
            chunks.append(encode(encoder, batch))
        if not chunks:
            return np.zeros((0, encoder.config.embed_dim), dtype=np.float32)
        return np.concatenate(chunks)
    if callable(encoder):
        out = np.asarray(encoder(images), dtype=np.float32)
        if out.ndim != 2 or out.shape[0] != len(images):
            raise ModelError("pluggable encoder must return an N x D array")
        return out
    raise ModelError(f"unsupported encoder type {type(encoder).__name__}")


def encoder_fingerprint(encoder) -> str | None:
    if isinstance(encoder, EncoderModel):
        return encoder.fingerprint
    return getattr(encoder, "fingerprint", None)


def forward_training(model: EncoderModel, x: torch.Tensor, x2: torch.Tensor):
    """Returns (z, h, logits, z', h', logits') for a batch of view pairs."""
    f1, f2 = model.embed(x), model.embed(x2)
    z1, z2 = model.projector(f1), model.projector(f2)
    h1, h2 = model.predictor(z1), model.predictor(z2)
    return z1, h1, model.classifier(f1), z2, h2, model.classifier(f2)


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + params.bin (little-endian raw arrays)

_DTYPES = {torch.float32: "<f4", torch.int64: "<i8"}


def _serialize_state(model: nn.Module) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ModelError(f"cannot serialize {name} with dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def state_fingerprint(model: EncoderModel) -> str:
    entries, blob = _serialize_state(model)
    h = hashlib.sha256()
    h.update(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    h.update(json.dumps(entries, sort_keys=True).encode())
    h.update(blob)
    return h.hexdigest()[:16]


def save_checkpoint(model: EncoderModel, path, extra: dict | None = None) -> Path:
    """Write ``path/manifest.json`` and ``path/params.bin``.

    The pair is written into a temporary sibling directory and renamed into
    place, so an interrupted save never leaves a half-written checkpoint.
    """
    path = Path(path)
    entries, blob = _serialize_state(model)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "frozen_stages": list(model.frozen_stages),
        "tensors": entries,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "fingerprint": model.fingerprint,
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / "params.bin").write_bytes(blob)
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            try:
                os.replace(tmp, path)
            except BaseException:
                os.replace(old, path)
                raise
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise ModelError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint format in {path}")
    return manifest


def load_checkpoint(path) -> EncoderModel:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / "params.bin").read_bytes()
    except OSError as exc:
        raise ModelError(f"cannot read checkpoint parameters in {path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ModelError(f"checkpoint parameters in {path} are corrupt or truncated")
    model = EncoderModel(EncoderConfig.from_dict(manifest["config"]))
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype=e["dtype"], count=e["nbytes"] // np.dtype(e["dtype"]).itemsize, offset=e["offset"])
        state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(e["shape"]))
    model.load_state_dict(state)
    model.frozen_stages = list(manifest.get("frozen_stages", []))
    for name in model.frozen_stages:
        for p in getattr(model.backbone, name).parameters():
            p.requires_grad_(False)
    return model


_WEIGHT_PREFIXES = ("module.encoder.", "module.backbone.", "encoder.", "backbone.", "module.")

_RESNET_STAGE = {"conv1": "stem.0", "bn1": "stem.1"}


def load_backbone_weights(model: EncoderModel, path) -> list[str]:
    """Attach externally trained backbone weights from a torch state-dict file.

    Accepts torchvision-style ResNet-50 keys (optionally under the usual
    ``module.encoder.`` style prefixes). Returns the backbone keys that were
    not found in the file.
    """
    raw = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(raw, dict) and "state_dict" in raw:
        raw = raw["state_dict"]
    own = model.backbone.state_dict()
    mapped = {}
    for key, val in raw.items():
        for pre in _WEIGHT_PREFIXES:
            if key.startswith(pre):
                key = key[len(pre) :]
                break
        head, _, rest = key.partition(".")
        if model.config.profile == "resnet50" and head in _RESNET_STAGE:
            key = f"{_RESNET_STAGE[head]}.{rest}"
        if key in own and own[key].shape == val.shape:
            mapped[key] = val
    missing = sorted(set(own) - set(mapped))
    model.backbone.load_state_dict(mapped, strict=False)
    return missing

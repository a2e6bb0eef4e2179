"""Fine-tuning with a SimSiam objective plus a linear instance classifier.

The classifier is trained on pseudo-labels, i.e. the instance IDs the
semantic map assigns to each observation. Both views of a pair come from the
same observation and therefore share one label.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

try:
    from tomllib import loads as toml_loads
except ModuleNotFoundError:  # Python < 3.11
    from tomli import loads as toml_loads

from .data import MultiViewDataset
from .encoder import AugmentParams, EncoderModel, _to_tensor, augment_view, forward_training
from .errors import ModelError, ParameterError, TrainingError


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 0.07
    weight_decay: float = 1.5e-6
    momentum: float = 0.9
    epochs: int = 100
    use_classifier: bool = True
    freeze_partial: bool = True
    seed: int = 0
    backbone_profile: str = "small"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2 (batch norm)")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if not (self.lr > 0 and self.weight_decay >= 0 and 0 <= self.momentum < 1):
            raise ParameterError("lr must be positive, weight decay non-negative, momentum in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# The four fine-tuning conditions compared in the ablation; frozen-prefix runs
# get half the epochs.
CONDITIONS = {
    "all+classifier": dict(freeze_partial=False, use_classifier=True, epochs=100),
    "partial+classifier": dict(freeze_partial=True, use_classifier=True, epochs=50),
    "all": dict(freeze_partial=False, use_classifier=False, epochs=100),
    "partial": dict(freeze_partial=True, use_classifier=False, epochs=50),
}


def condition_config(name: str, **overrides) -> TrainConfig:
    if name not in CONDITIONS:
        raise ParameterError(f"unknown training condition {name!r}; expected one of {sorted(CONDITIONS)}")
    kw = dict(CONDITIONS[name])
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class TrainReport:
    loss_history: list[float] = field(default_factory=list)
    contrastive_history: list[float] = field(default_factory=list)
    ce_history: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def simview_loss_parts(z, h, logits, y_true, z2, h2, logits2, y2_true, use_classifier=True):
    """Returns (total, contrastive, ce); ``ce`` is 0 when the classifier is off.

    The contrastive term is the negative cosine between each predictor output
    and the other view's projection, with the projection treated as a
    constant (stop-gradient).
    """
    if z.shape != h.shape or z2.shape != h2.shape or z.shape != z2.shape:
        raise ParameterError("projection and prediction shapes must match")
    contrastive = -0.5 * (
        F.cosine_similarity(h, z2.detach(), dim=-1).mean() + F.cosine_similarity(h2, z.detach(), dim=-1).mean()
    )
    if not use_classifier:
        return contrastive, contrastive, torch.zeros((), dtype=contrastive.dtype)
    if logits.shape != logits2.shape or logits.shape[0] != z.shape[0]:
        raise ParameterError("logit shapes must match the batch")
    if y_true.shape != y2_true.shape or y_true.shape[0] != logits.shape[0]:
        raise ParameterError("label shapes must match the batch")
    ce = 0.5 * (F.cross_entropy(logits, y_true) + F.cross_entropy(logits2, y2_true))
    return contrastive + ce, contrastive, ce


def simview_loss(z, h, logits, y_true, z2, h2, logits2, y2_true, use_classifier=True):
    return simview_loss_parts(z, h, logits, y_true, z2, h2, logits2, y2_true, use_classifier)[0]


def freeze_partial(model: EncoderModel, boundary: str | None = None) -> EncoderModel:
    """Freeze every backbone stage up to and including ``boundary``."""
    boundary = boundary or model.config.freeze_boundary
    names = model.stage_names
    if boundary not in names:
        raise ModelError(f"unknown freeze boundary {boundary!r}; stages are {names}")
    frozen = names[: names.index(boundary) + 1]
    for name in names:
        for p in getattr(model.backbone, name).parameters():
            p.requires_grad_(name not in frozen)
    model.frozen_stages = frozen
    model.train(model.training)
    return model


def unfreeze(model: EncoderModel) -> EncoderModel:
    for p in model.parameters():
        p.requires_grad_(True)
    model.frozen_stages = []
    return model


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise ParameterError("epoch must lie in [0, total_epochs)")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def _check_labels(model: EncoderModel, ds: MultiViewDataset, cfg: TrainConfig):
    if len(ds) == 0:
        raise TrainingError("training set is empty")
    ids = ds.instance_ids
    if len(ids) < 2:
        raise TrainingError("need at least 2 instances to fine-tune")
    if cfg.use_classifier:
        width = model.classifier.out_features
        if width != len(ids) or max(ids) >= width:
            raise TrainingError(
                f"classifier width {width} does not match the {len(ids)} instances (ids {ids[0]}..{ids[-1]})"
            )


def train(model: EncoderModel, ds_train: MultiViewDataset, cfg: TrainConfig, log_path=None, augment=None, progress=None):
    """Fine-tune ``model`` in place with SGD; returns (model, TrainReport).

    The learning rate follows the cosine schedule per epoch. All randomness
    (shuffling and augmentation) comes from ``cfg.seed``.
    """
    _check_labels(model, ds_train, cfg)
    params_aug = augment or AugmentParams()
    if cfg.freeze_partial:
        freeze_partial(model)
    else:
        unfreeze(model)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(trainable, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    images = [_to_tensor(im) for im in ds_train.images()]
    labels = torch.from_numpy(ds_train.labels())
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    t0 = time.perf_counter()
    n = len(images)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model.train()
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
            for g in opt.param_groups:
                g["lr"] = lr
            order = rng.permutation(n)
            sums = np.zeros(3)
            seen = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                if len(idx) < 2:  # batch norm needs two samples
                    continue
                x1 = torch.stack([augment_view(images[i], rng, model.config, params_aug) for i in idx])
                x2 = torch.stack([augment_view(images[i], rng, model.config, params_aug) for i in idx])
                y = labels[idx]
                z1, h1, l1, z2, h2, l2 = forward_training(model, x1, x2)
                total, contrastive, ce = simview_loss_parts(z1, h1, l1, y, z2, h2, l2, y, cfg.use_classifier)
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                sums += len(idx) * np.array([total.item(), contrastive.item(), ce.item()])
                seen += len(idx)
            means = sums / max(seen, 1)
            report.loss_history.append(float(means[0]))
            report.contrastive_history.append(float(means[1]))
            report.ce_history.append(float(means[2]))
            report.lr_history.append(lr)
            if progress is not None:
                progress(epoch, report)
    model.eval()
    report.wall_time_s = time.perf_counter() - t0
    if log_path is not None:
        write_train_log(report, log_path)
    return model, report


def write_train_log(report: TrainReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total", "contrastive", "ce", "lr"])
        for e, row in enumerate(zip(report.loss_history, report.contrastive_history, report.ce_history, report.lr_history)):
            w.writerow([e, *(repr(float(v)) for v in row)])
    return path


def load_train_config(path) -> TrainConfig:
    """Read a TrainConfig from a JSON or TOML file (optionally under a ``[train]`` table)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        d = json.loads(text)
    else:
        d = toml_loads(text)
    return TrainConfig.from_dict(d.get("train", d))

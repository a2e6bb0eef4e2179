"""Desk-scale experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

from .data import MultiViewDataset, generate_synthetic_multiview, split_dataset
from .encoder import EncoderModel, build_encoder, reset_classifier
from .evaluation import ClusterReport, EvalReport, evaluate_map, representation_score
from .registry import build_store
from .trainer import CONDITIONS, TrainConfig, TrainReport, condition_config, train

log = logging.getLogger(__name__)

# 64 px crops keep the small backbone trainable in seconds per epoch on one core;
# the resize/crop ratio matches the 256/224 default.
DESK_ENCODER = dict(resize_size=73, crop_size=64)


@dataclass
class SyntheticSetup:
    num_instances: int = 8
    classes: tuple[str, ...] = ("chair", "tv")
    views_per_instance: int = 24
    image_size: int = 64
    train_fraction: float = 0.5

    def make(self, seed: int) -> tuple[MultiViewDataset, MultiViewDataset]:
        ds = generate_synthetic_multiview(
            self.num_instances, list(self.classes), self.views_per_instance, self.image_size, seed=seed
        )
        return split_dataset(ds, self.train_fraction, seed)


def initial_encoder(num_classes: int, seed: int, pretrain: MultiViewDataset | None = None, pretrain_epochs: int = 0, **encoder_kwargs) -> EncoderModel:
    """Fresh encoder, optionally warmed up with plain SimSiam on a disjoint dataset."""
    kw = dict(DESK_ENCODER)
    kw.update(encoder_kwargs)
    model = build_encoder("small", num_classes=num_classes, seed=seed, **kw)
    if pretrain is not None and pretrain_epochs > 0:
        reset_classifier(model, len(pretrain.instance_ids), seed)
        train(model, pretrain, TrainConfig(epochs=pretrain_epochs, use_classifier=False, freeze_partial=False, seed=seed))
        reset_classifier(model, num_classes, seed)
    return model


@dataclass
class ConditionResult:
    cluster: ClusterReport
    train_report: TrainReport | None = None
    model: EncoderModel | None = field(default=None, repr=False)


def run_conditions(
    base: EncoderModel,
    ds_train: MultiViewDataset,
    ds_test: MultiViewDataset,
    seed: int,
    conditions=tuple(CONDITIONS),
    keep_models: bool = False,
    **train_overrides,
) -> dict[str, ConditionResult]:
    """Fine-tune a copy of ``base`` under each condition and score the embeddings by ARI.

    The untouched ``base`` is reported under the key ``"initial"``.
    """
    results = {
        "initial": ConditionResult(representation_score(base, ds_train, ds_test, condition="initial", seed=seed))
    }
    n_cls = len(ds_train.instance_ids)
    for name in conditions:
        model = reset_classifier(copy.deepcopy(base), n_cls, seed)
        cfg = condition_config(name, seed=seed, **train_overrides)
        _, rep = train(model, ds_train, cfg)
        cluster = representation_score(model, ds_train, ds_test, condition=name, seed=seed)
        log.info("%s seed %d: ARI train %.3f test %.3f", name, seed, cluster.ari_train, cluster.ari_test)
        results[name] = ConditionResult(cluster, rep, model if keep_models else None)
    return results


def retrieval_map(model, ds_train: MultiViewDataset, ds_test: MultiViewDataset, K: int = 10, trials: int = 10, seed: int = 0) -> EvalReport:
    """Register the train views, query with held-out views."""
    store = build_store(model, ds_train)
    return evaluate_map(store, model, ds_test, K=K, trials=trials, seed=seed)

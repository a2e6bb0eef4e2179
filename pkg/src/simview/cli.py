"""Command line entry point: ``simview <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import data as data_mod
from .encoder import build_encoder, load_backbone_weights, load_checkpoint, reset_classifier, save_checkpoint, embed_images
from .errors import SimViewError
from .evaluation import EvalReport, emit_latent_scatter, emit_map_chart, evaluate_map, representation_score
from .experiments import run_conditions
from .registry import build_store, load_store, save_store
from .retrieval import retrieve, top_k_neighbors
from .trainer import CONDITIONS, TrainConfig, toml_loads, train

log = logging.getLogger("simview")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return toml_loads(text)
    except ValueError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc


def _section(cfg, name) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise UsageError(f"config section [{name}] must be a table")
    return sec


def _seed(args, cfg, section) -> int:
    if args.seed is not None:
        return args.seed
    return int(_section(cfg, section).get("seed", 0))


def _out_dir(args, cfg) -> Path | None:
    out = args.out or _section(cfg, "output").get("dir")
    return Path(out) if out else None


def _require_out(args, cfg) -> Path:
    out = _out_dir(args, cfg)
    if out is None:
        raise UsageError("an output directory is required (--out or [output] dir)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg):
    """Dataset from ``--data`` / [dataset] path, or the synthetic generator."""
    sec = _section(cfg, "dataset")
    path = getattr(args, "data", None) or sec.get("path")
    if path and sec.get("source", "directory") == "directory":
        ds = data_mod.load_directory_dataset(path)
    else:
        ds = data_mod.generate_synthetic_multiview(
            int(sec.get("num_instances", 8)),
            list(sec.get("classes", ["chair", "tv"])),
            int(sec.get("views_per_instance", 24)),
            int(sec.get("image_size", 64)),
            seed=_seed(args, cfg, "dataset"),
        )
    return ds


def _splits(args, cfg, ds):
    frac = _section(cfg, "dataset").get("train_fraction")
    if frac is None:
        return ds, ds
    return data_mod.split_dataset(ds, float(frac), _seed(args, cfg, "dataset"))


_ENCODER_KEYS = ("resize_size", "crop_size", "mean", "std", "embed_dim", "proj_dim", "proj_hidden", "pred_hidden", "freeze_boundary")


def _encoder(args, cfg, num_classes=None):
    sec = _section(cfg, "encoder")
    ckpt = getattr(args, "checkpoint", None) or sec.get("checkpoint")
    if ckpt:
        model = load_checkpoint(ckpt)
    else:
        overrides = {k: (tuple(v) if isinstance(v, list) else v) for k, v in sec.items() if k in _ENCODER_KEYS}
        model = build_encoder(sec.get("profile", "small"), num_classes=num_classes or 2, seed=_seed(args, cfg, "encoder"), **overrides)
        if sec.get("weights"):
            missing = load_backbone_weights(model, sec["weights"])
            if missing:
                log.warning("%d backbone tensors not found in %s", len(missing), sec["weights"])
    if num_classes is not None and model.classifier.out_features != num_classes:
        reset_classifier(model, num_classes, _seed(args, cfg, "encoder"))
    return model


def validate_paths(args, cfg):
    """Every input path named on the command line or in the config must exist before work starts."""
    named = {
        "--data": getattr(args, "data", None),
        "--checkpoint": getattr(args, "checkpoint", None),
        "--query": getattr(args, "query", None),
        "--input": getattr(args, "input", None),
        "[dataset] path": _section(cfg, "dataset").get("path"),
        "[encoder] checkpoint": _section(cfg, "encoder").get("checkpoint"),
        "[encoder] weights": _section(cfg, "encoder").get("weights"),
    }
    if args.command != "register":
        named["--store"] = getattr(args, "store", None)
    for flag, path in named.items():
        if path and not Path(path).exists():
            raise UsageError(f"{flag}: no such path {path}")


def _relay_warnings(caught):
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    out = _require_out(args, cfg)
    ds = _dataset(args, cfg)
    data_mod.write_directory_dataset(ds, out)
    print(f"wrote {len(ds)} images of {len(ds.instance_ids)} instances")


def cmd_finetune(args, cfg):
    out = _require_out(args, cfg)
    ds = _dataset(args, cfg)
    ds_train, _ = _splits(args, cfg, ds)
    sec = dict(_section(cfg, "train"))
    if args.condition:
        sec.update(CONDITIONS[args.condition])
    if args.classifier is not None:
        sec["use_classifier"] = args.classifier
    if args.freeze is not None:
        sec["freeze_partial"] = args.freeze == "partial"
    if args.epochs is not None:
        sec["epochs"] = args.epochs
    sec["seed"] = _seed(args, cfg, "train")
    tcfg = TrainConfig.from_dict(sec)
    model = _encoder(args, cfg, num_classes=len(ds_train.instance_ids))
    train(model, ds_train, tcfg, log_path=out / "train_log.csv",
          progress=lambda e, r: log.info("epoch %d loss %.4f", e, r.loss_history[-1]))
    extra = {"train": {k: getattr(tcfg, k) for k in TrainConfig.__dataclass_fields__}}
    save_checkpoint(model, out / "checkpoint", extra=extra)
    print(f"checkpoint {model.fingerprint}")


def cmd_register(args, cfg):
    out = _require_out(args, cfg)
    ds = _dataset(args, cfg)
    ds_train, _ = _splits(args, cfg, ds)
    model = _encoder(args, cfg)
    store = build_store(model, ds_train)
    dest = Path(args.store) if args.store else out / "store"
    save_store(store, dest)
    print(f"registered {store.total_observations} observations of {len(store)} instances")


def cmd_retrieve(args, cfg):
    if not args.store or not args.query:
        raise UsageError("retrieve needs --store and --query")
    from PIL import Image

    model = _encoder(args, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        store = load_store(args.store)
        with Image.open(args.query) as im:
            query = np.asarray(im.convert("RGB"))
        result = retrieve(store, query, model)
    _relay_warnings(caught)
    payload = result.to_dict()
    if args.top_k:
        q = embed_images(model, [query])[0]
        payload["neighbors"] = [
            {"instance_id": i, "view_index": v, "similarity": s} for i, v, s in top_k_neighbors(store, q, args.top_k)
        ]
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        pos = ", ".join(f"{x:.3f}" for x in result.position)
        print(f"instance {result.instance_id} ({result.class_label}) similarity {result.similarity:.4f} at ({pos})")
        for n in payload.get("neighbors", []):
            print(f"  {n['instance_id']}/{n['view_index']}: {n['similarity']:.4f}")


def cmd_evaluate(args, cfg):
    out = _require_out(args, cfg)
    ev = _section(cfg, "eval")
    ds = _dataset(args, cfg)
    ds_train, ds_test = _splits(args, cfg, ds)
    model = _encoder(args, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        store = load_store(args.store) if args.store else build_store(model, ds_train)
        report = evaluate_map(
            store, model, ds_test,
            K=int(args.K or ev.get("K", 10)), trials=int(ev.get("trials", 10)), seed=_seed(args, cfg, "eval"),
        )
    _relay_warnings(caught)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    with open(out / "per_instance_ap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "ap"])
        for iid, ap in sorted(report.per_instance_ap.items()):
            w.writerow([iid, repr(ap)])
    emit_map_chart({_section(cfg, "eval").get("env_name", "env"): report}, out)
    print(f"mAP {report.map_score:.4f}")


def cmd_cluster_eval(args, cfg):
    out = _require_out(args, cfg)
    ds = _dataset(args, cfg)
    ds_train, ds_test = _splits(args, cfg, ds)
    seed = _seed(args, cfg, "eval")
    if args.conditions:
        base = _encoder(args, cfg, num_classes=len(ds_train.instance_ids))
        sec = _section(cfg, "train")
        overrides = {k: sec[k] for k in ("batch_size", "lr", "weight_decay", "momentum") if k in sec}
        results = run_conditions(base, ds_train, ds_test, seed, **overrides)
        payload = {name: r.cluster.to_dict() for name, r in results.items()}
        (out / "ablation.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
        for name, r in results.items():
            emit_latent_scatter(r.cluster.coords, r.cluster.labels, out, name=f"latent_scatter_{name.replace('+', '_')}", title=name)
        for name, r in payload.items():
            print(f"{name:>20s}  ARI train {r['ari_train']:.3f}  test {r['ari_test']:.3f}")
        return
    model = _encoder(args, cfg)
    report = representation_score(model, ds_train, ds_test if ds_test is not ds_train else None, seed=seed)
    (out / "cluster_report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    emit_latent_scatter(report.coords, report.labels, out)
    print(f"ARI train {report.ari_train:.4f}" + ("" if report.ari_test is None else f" test {report.ari_test:.4f}"))


def cmd_plot(args, cfg):
    out = _require_out(args, cfg)
    if not args.input:
        raise UsageError("plot needs --input (report.json or a latent scatter sidecar)")
    payload = json.loads(Path(args.input).read_text())
    if "coords" in payload:
        emit_latent_scatter(payload["coords"], payload["labels"], out, title=payload.get("title"))
    elif "map_score" in payload:
        emit_map_chart({"env": _eval_report(payload)}, out)
    else:
        emit_map_chart({name: _eval_report(p) for name, p in payload.items()}, out)


def _eval_report(d) -> EvalReport:
    d = dict(d)
    d["per_instance_ap"] = {int(k): v for k, v in d["per_instance_ap"].items()}
    return EvalReport(**d)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "register": cmd_register,
    "finetune": cmd_finetune,
    "retrieve": cmd_retrieve,
    "evaluate": cmd_evaluate,
    "cluster-eval": cmd_cluster_eval,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON pipeline config")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory (<class>/<instance>/<view>.png)")
    common.add_argument("--checkpoint", help="encoder checkpoint directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="simview", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render a synthetic multi-view dataset")
    p = sub.add_parser("finetune", parents=[common], help="fine-tune the encoder")
    p.add_argument("--condition", choices=sorted(CONDITIONS))
    p.add_argument("--classifier", dest="classifier", action="store_true", default=None)
    p.add_argument("--no-classifier", dest="classifier", action="store_false")
    p.add_argument("--freeze-partial", dest="freeze", action="store_const", const="partial")
    p.add_argument("--freeze-none", dest="freeze", action="store_const", const="none")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("register", parents=[common], help="build the per-instance feature store")
    p.add_argument("--store", help="store directory (default <out>/store)")
    p = sub.add_parser("retrieve", parents=[common], help="find the instance matching a query image")
    p.add_argument("--store")
    p.add_argument("--query")
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p = sub.add_parser("evaluate", parents=[common], help="mAP and failure breakdown")
    p.add_argument("--store")
    p.add_argument("-K", type=int)
    p = sub.add_parser("cluster-eval", parents=[common], help="k-means ARI of the embeddings")
    p.add_argument("--conditions", action="store_true", help="run the four fine-tuning conditions")
    p = sub.add_parser("plot", parents=[common], help="render plots from JSON artifacts")
    p.add_argument("--input")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        validate_paths(args, cfg)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimViewError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

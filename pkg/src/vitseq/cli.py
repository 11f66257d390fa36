"""Command-line surface.

Subcommands: synth, extract-features, train, evaluate, predict, gradcheck,
inspect-weights. Configuration comes from an optional JSON file
(--config) whose sections {"vit", "lstm", "adam", "train", "slice_count"}
are overridden by individual flags. Exit codes: 0 success, 1 usage error,
2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import checks, manifest, train as train_mod, vit as vit_mod, volume as vol_mod
from .bilstm import BiLSTMWeights, LSTMConfig, bilstm_forward, classify_sequence, predicted_class
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
    StorageError,
    VitSeqError,
)
from .tensor import Tensor
from .vit import ViTConfig, ViTWeights


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise FormatError(f"config {path} must hold a JSON object")
    return cfg


def _merged(section: dict, overrides: dict) -> dict:
    out = dict(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def build_configs(args):
    """Config file sections overridden by flags; returns the dataclasses."""
    cfg = _load_config_file(getattr(args, "config", None))
    vit_over = {"feature_dim": getattr(args, "feature_dim", None)}
    lstm_over = {
        "num_classes": getattr(args, "classes", None),
        "input_dim": getattr(args, "feature_dim", None),
    }
    train_over = {
        "seed": getattr(args, "seed", None),
        "folds": getattr(args, "folds", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "fine_tune_vit": True if getattr(args, "fine_tune_vit", False) else None,
    }
    vit_cfg = ViTConfig(**_merged(cfg.get("vit", {}), vit_over))
    lstm_section = _merged(cfg.get("lstm", {}), lstm_over)
    lstm_section.setdefault("input_dim", vit_cfg.feature_dim)
    lstm_cfg = LSTMConfig(**lstm_section)
    adam_cfg = train_mod.AdamConfig(**cfg.get("adam", {}))
    train_cfg = train_mod.TrainConfig(**_merged(cfg.get("train", {}), train_over))
    slice_count = getattr(args, "slices", None) or cfg.get("slice_count", 50)
    return vit_cfg, lstm_cfg, adam_cfg, train_cfg, slice_count


def _load_encoder(args, vit_cfg):
    """Encoder weights from a manifest, or a seeded random encoder."""
    if getattr(args, "weights", None):
        weights, norm = manifest.load_pretrained(args.weights, vit_cfg)
        return weights, norm
    if getattr(args, "random_vit", False):
        seed = args.seed if getattr(args, "seed", None) is not None else 0
        return ViTWeights.random(vit_cfg, seed), None
    raise ConfigError("need --weights PATH or --random-vit")


def _load_dataset_dir(data_dir):
    index_path = os.path.join(data_dir, "labels.json")
    try:
        with open(index_path, "r", encoding="utf-8") as fh:
            index = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {index_path}: {exc}") from exc
    labels = {k: int(v) for k, v in index["labels"].items()}
    samples = []
    for sid in sorted(labels):
        path = os.path.join(data_dir, f"{sid}.bvol")
        samples.append(vol_mod.Sample(
            sid=sid, label=labels[sid], volume=vol_mod.load_volume(path)
        ))
    label_map = {k: int(v) for k, v in index.get("label_map", {}).items()}
    return vol_mod.Dataset(samples, label_map or {"NC": 0, "AD": 1})


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = vol_mod.SynthConfig(
        dims=(args.depth, args.height, args.width),
        noise_std=args.noise_std,
        amplitude=args.amplitude,
    )
    dataset = vol_mod.synth_dataset(args.n, args.classes, cfg, args.seed or 0)
    os.makedirs(args.out, exist_ok=True)
    labels = {}
    for sample in dataset.samples:
        vol_mod.write_volume(sample.volume, os.path.join(args.out, f"{sample.sid}.bvol"))
        labels[sample.sid] = sample.label
    index = {"labels": labels, "label_map": dataset.label_map}
    with open(os.path.join(args.out, "labels.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    print(f"wrote {len(dataset.samples)} volumes to {args.out}")
    return 0


def cmd_extract_features(args) -> int:
    vit_cfg, _, _, _, slice_count = build_configs(args)
    weights, norm = _load_encoder(args, vit_cfg)
    dataset = _load_dataset_dir(args.data)
    mean = norm.get("mean") if norm else None
    std = norm.get("std") if norm else None
    features = {}
    labels = {}
    for sample in dataset.samples:
        imgs = vol_mod.volume_to_slices(sample.volume, vit_cfg, slice_count, mean, std)
        features[sample.sid] = vit_mod.extract_slice_features(imgs, vit_cfg, weights)
        labels[sample.sid] = sample.label
    manifest.save_feature_cache(args.out, features, labels, model=vit_cfg.to_dict())
    print(f"extracted {len(features)} feature sequences "
          f"({slice_count}x{vit_cfg.feature_dim}) to {args.out}")
    return 0


def _dataset_from_cache(path):
    features, labels, model = manifest.load_feature_cache(path)
    samples = [
        vol_mod.Sample(sid=sid, label=labels[sid], features=features[sid])
        for sid in sorted(features)
    ]
    return vol_mod.Dataset(samples), model


def cmd_train(args) -> int:
    _, lstm_cfg, adam_cfg, train_cfg, _ = build_configs(args)
    dataset, model = _dataset_from_cache(args.features)
    feat_dim = dataset.samples[0].features.shape[1]
    if feat_dim != lstm_cfg.input_dim:
        lstm_cfg = LSTMConfig(**{**lstm_cfg.to_dict(), "input_dim": int(feat_dim)})
    started = time.monotonic()
    report = train_mod.fit(dataset, train_cfg, lstm_cfg, adam_cfg)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    _write_text_atomic(report_path, report.to_json() + "\n")
    from .metrics import report_table
    table = report_table(report.crossval)
    _write_text_atomic(os.path.join(args.out, "report.txt"), table + "\n")
    if args.save_checkpoints:
        for fold_result, weights in zip(report.fold_results, report.fold_weights):
            manifest.save_checkpoint(
                os.path.join(args.out, f"checkpoint_fold{fold_result['fold']}.wman"),
                weights, seed=train_cfg.seed, epoch=train_cfg.epochs,
            )
    print(table)
    print(f"report written to {report_path} "
          f"({time.monotonic() - started:.1f}s wall clock)")
    return 0


def _write_text_atomic(path, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"failed to write {path}: {exc}") from exc


def cmd_evaluate(args) -> int:
    dataset, _ = _dataset_from_cache(args.features)
    weights, extra, _ = manifest.load_checkpoint(args.checkpoint)
    lstm_cfg = LSTMConfig(**extra["lstm_config"])
    feats = [s.features for s in dataset.samples]
    labels = [s.label for s in dataset.samples]
    preds, _ = train_mod.evaluate_head(feats, labels, weights, lstm_cfg)
    from .metrics import confusion, metrics
    report = metrics(confusion(preds, labels, num_classes=lstm_cfg.num_classes))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    vit_cfg, lstm_cfg, _, _, slice_count = build_configs(args)
    weights, norm = _load_encoder(args, vit_cfg)
    vol = vol_mod.load_volume(args.volume)
    mean = norm.get("mean") if norm else None
    std = norm.get("std") if norm else None
    imgs = vol_mod.volume_to_slices(vol, vit_cfg, slice_count, mean, std)
    feats = vit_mod.extract_slice_features(imgs, vit_cfg, weights)
    if args.checkpoint:
        head, extra, _ = manifest.load_checkpoint(args.checkpoint)
        lstm_cfg = LSTMConfig(**extra["lstm_config"])
    else:
        # untrained default head, seeded; useful only as a smoke test
        lstm_cfg = LSTMConfig(**{**lstm_cfg.to_dict(),
                                 "input_dim": vit_cfg.feature_dim})
        head = BiLSTMWeights.init(lstm_cfg, args.seed or 0)
    rep = bilstm_forward(Tensor(feats), head, lstm_cfg, training=False)
    probs = classify_sequence(rep, head)
    print("probabilities:", " ".join(f"{p:.6f}" for p in probs.data))
    print("predicted class:", predicted_class(probs))
    return 0


def cmd_gradcheck(args) -> int:
    results = checks.gradient_suite(float64=args.float64)
    tol = checks.suite_tolerance(args.float64)
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err < tol else "FAIL"
        print(f"{name:<18} max relative error {err:.3e}  [{status}]")
        worst = max(worst, err)
    if worst >= tol:
        print(f"gradient check failed: worst {worst:.3e} >= tolerance {tol:.0e}")
        return 3
    print(f"all kernels within {tol:.0e}")
    return 0


def cmd_inspect_weights(args) -> int:
    man = manifest.load_manifest(args.weights)
    if man.model is None:
        raise FormatError(f"{args.weights}: manifest carries no model descriptor")
    cfg = ViTConfig(**man.model)
    weights, norm = manifest.load_pretrained(args.weights, cfg)
    total = weights.param_count()
    print(f"model: {json.dumps(man.model, sort_keys=True)}")
    print(f"encoder layers: {cfg.layers}")
    print(f"tensors: {len(weights.named_tensors())}")
    print(f"parameters: {total:,}")
    if norm:
        print(f"normalization: mean={norm['mean']} std={norm['std']}")
    print("shape audit: ok")
    return 0


# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None)


def make_parser() -> _Parser:
    parser = _Parser(prog="vitseq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a synthetic BVOL dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--depth", type=int, default=16)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--amplitude", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract-features", help="volumes -> feature cache")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory of .bvol + labels.json")
    p.add_argument("--out", required=True, help="output feature-cache manifest")
    p.add_argument("--weights", help="encoder weight manifest (WMAN v1)")
    p.add_argument("--random-vit", action="store_true",
                   help="use a seeded random encoder instead of --weights")
    p.add_argument("--slices", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=None)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", help="K-fold training on a feature cache")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--fine-tune-vit", action="store_true")
    p.add_argument("--save-checkpoints", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a feature cache")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify one volume")
    _add_common(p)
    p.add_argument("--volume", required=True)
    p.add_argument("--weights")
    p.add_argument("--random-vit", action="store_true")
    p.add_argument("--checkpoint")
    p.add_argument("--slices", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="gradient-check every kernel")
    p.add_argument("--float64", action="store_true",
                   help="check at 64-bit precision (tolerance 1e-5)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-weights", help="audit a weight manifest")
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_inspect_weights)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"vitseq: config error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"vitseq: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, FormatError, ShapeError, StorageError) as exc:
        print(f"vitseq: {exc}", file=sys.stderr)
        return 2
    except VitSeqError as exc:
        print(f"vitseq: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

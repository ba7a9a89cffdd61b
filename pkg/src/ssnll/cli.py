"""Experiment driver: declarative TOML configs in, metrics/checkpoints out.

Subcommands: run (full pipeline + ablation table), sweep (split-ratio
sweep from a shared pre-trained model), export-embeddings, eval.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .adapt import extract_features
from .data import AugmentSpec, LabeledDataset, ShiftSpec, generate_shifted_gaussians, load_idx_dataset
from .errors import ConfigError, InvalidInputError, SsnllError
from .nn import Classifier, build_mlp, load_checkpoint, save_checkpoint
from .trainer import (
    AdamConfig,
    OptimizerConfig,
    SGDConfig,
    TrainConfig,
    evaluate,
    run_ssnll,
    train_source,
)

logger = logging.getLogger(__name__)

STAGE_LABELS = [
    ("source_only", "source-only"),
    ("adabn", "+AdaBN"),
    ("adabn_dtc", "+AdaBN+DTC"),
    ("ssnll_final", "SSNLL (final)"),
]


@dataclass(frozen=True)
class IdxPairSpec:
    source_images: Path
    source_labels: Path
    target_images: Path
    target_labels: Path
    subsample: int | None
    num_classes: int


@dataclass
class ExperimentConfig:
    dataset: ShiftSpec | IdxPairSpec
    hidden: list[int]
    source_train: TrainConfig
    adapt_train: TrainConfig
    seeds: list[int]
    sweep: list[float]
    output_dir: Path
    model_checkpoint: Path | None = None  # skips source training when set

    def resolved(self) -> dict:
        """Full config with every default filled in, for the run manifest."""

        def train_dict(cfg: TrainConfig) -> dict:
            opt = cfg.optimizer
            if isinstance(opt, AdamConfig):
                optimizer = {"optimizer": "adam", "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
            else:
                optimizer = {"optimizer": "sgd", "lr": opt.lr, "momentum": opt.momentum, "weight_decay": opt.weight_decay}
            return {
                **optimizer,
                "batch_size": cfg.batch_size,
                "epochs": cfg.epochs,
                "split_ratio": cfg.split_ratio,
                "ema_lambda": cfg.ema_lambda,
                "adabn_lambda": cfg.adabn_lambda,
                "blur_predictions": cfg.blur_predictions,
                "seed": cfg.seed,
                "lr_schedule": cfg.lr_schedule,
                "augment": {
                    "jitter_stddev": cfg.augment.jitter_stddev,
                    "scale_range": list(cfg.augment.scale_range),
                    "dropout_fraction": cfg.augment.dropout_fraction,
                },
            }

        if isinstance(self.dataset, ShiftSpec):
            dataset = {"kind": "synthetic", **{k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self.dataset).items()}}
        else:
            dataset = {
                "kind": "idx",
                "source_images": str(self.dataset.source_images),
                "source_labels": str(self.dataset.source_labels),
                "target_images": str(self.dataset.target_images),
                "target_labels": str(self.dataset.target_labels),
                "subsample": self.dataset.subsample,
                "num_classes": self.dataset.num_classes,
            }
        return {
            "dataset": dataset,
            "model": {
                "hidden": self.hidden,
                "checkpoint": str(self.model_checkpoint) if self.model_checkpoint else None,
            },
            "source_train": train_dict(self.source_train),
            "adapt_train": train_dict(self.adapt_train),
            "seeds": self.seeds,
            "sweep": self.sweep,
            "output_dir": str(self.output_dir),
        }


def _reject_unknown(table: dict, known: set[str], where: str) -> None:
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")


def _parse_optimizer(table: dict, where: str) -> OptimizerConfig:
    name = table.get("optimizer", "adam")
    if name == "adam":
        return AdamConfig(
            lr=float(table.get("lr", AdamConfig.lr)),
            beta1=float(table.get("beta1", AdamConfig.beta1)),
            beta2=float(table.get("beta2", AdamConfig.beta2)),
            eps=float(table.get("eps", AdamConfig.eps)),
        )
    if name == "sgd":
        return SGDConfig(
            lr=float(table.get("lr", SGDConfig.lr)),
            momentum=float(table.get("momentum", SGDConfig.momentum)),
            weight_decay=float(table.get("weight_decay", SGDConfig.weight_decay)),
        )
    raise ConfigError(f"[{where}].optimizer must be 'adam' or 'sgd', got {name!r}")


_TRAIN_KEYS = {
    "optimizer", "lr", "momentum", "weight_decay", "beta1", "beta2", "eps",
    "batch_size", "epochs", "split_ratio", "ema_lambda", "adabn_lambda",
    "blur_predictions", "seed", "lr_schedule", "augment",
}


def _parse_train(table: dict, where: str) -> TrainConfig:
    _reject_unknown(table, _TRAIN_KEYS, where)
    aug_table = table.get("augment", {})
    _reject_unknown(aug_table, {"jitter_stddev", "scale_range", "dropout_fraction"}, f"{where}.augment")
    defaults = TrainConfig()
    try:
        aug = AugmentSpec(
            jitter_stddev=float(aug_table.get("jitter_stddev", AugmentSpec.jitter_stddev)),
            scale_range=tuple(aug_table.get("scale_range", AugmentSpec.scale_range)),
            dropout_fraction=float(aug_table.get("dropout_fraction", AugmentSpec.dropout_fraction)),
        )
        return TrainConfig(
            optimizer=_parse_optimizer(table, where),
            batch_size=int(table.get("batch_size", defaults.batch_size)),
            epochs=int(table.get("epochs", defaults.epochs)),
            split_ratio=float(table.get("split_ratio", defaults.split_ratio)),
            ema_lambda=float(table.get("ema_lambda", defaults.ema_lambda)),
            augment=aug,
            adabn_lambda=float(table.get("adabn_lambda", defaults.adabn_lambda)),
            blur_predictions=bool(table.get("blur_predictions", defaults.blur_predictions)),
            seed=int(table.get("seed", defaults.seed)),
            lr_schedule=str(table.get("lr_schedule", defaults.lr_schedule)),
        )
    except InvalidInputError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def _parse_dataset(table: dict, config_dir: Path) -> ShiftSpec | IdxPairSpec:
    kind = table.get("kind")
    if kind == "synthetic":
        known = {
            "kind", "num_classes", "samples_per_class_source", "samples_per_class_target",
            "class_center_radius", "within_class_stddev", "shift_translation",
            "shift_rotation_angle", "seed",
        }
        _reject_unknown(table, known, "dataset")
        try:
            return ShiftSpec(
                num_classes=int(table.get("num_classes", 4)),
                samples_per_class_source=int(table.get("samples_per_class_source", 500)),
                samples_per_class_target=int(table.get("samples_per_class_target", 500)),
                class_center_radius=float(table.get("class_center_radius", 4.0)),
                within_class_stddev=float(table.get("within_class_stddev", 1.0)),
                shift_translation=tuple(table.get("shift_translation", (1.0, 1.0))),
                shift_rotation_angle=float(table.get("shift_rotation_angle", 0.5)),
                seed=int(table.get("seed", 0)),
            )
        except InvalidInputError as exc:
            raise ConfigError(f"[dataset]: {exc}") from exc
    if kind == "idx":
        known = {
            "kind", "source_images", "source_labels", "target_images", "target_labels",
            "subsample", "num_classes",
        }
        _reject_unknown(table, known, "dataset")
        paths = {}
        for key in ("source_images", "source_labels", "target_images", "target_labels"):
            if key not in table:
                raise ConfigError(f"[dataset].{key} is required for kind='idx'")
            path = Path(table[key])
            if not path.is_absolute():
                path = config_dir / path
            if not path.is_file():
                raise ConfigError(f"[dataset].{key}: file not found: {path}")
            paths[key] = path
        subsample = table.get("subsample")
        return IdxPairSpec(
            subsample=int(subsample) if subsample is not None else None,
            num_classes=int(table.get("num_classes", 10)),
            **paths,
        )
    raise ConfigError(f"[dataset].kind must be 'synthetic' or 'idx', got {kind!r}")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    _reject_unknown(raw, {"dataset", "model", "source_train", "adapt_train", "seeds", "sweep", "output_dir"}, "top level")
    if "dataset" not in raw:
        raise ConfigError("missing [dataset] table")
    model_table = raw.get("model", {})
    _reject_unknown(model_table, {"hidden", "checkpoint"}, "model")
    hidden = [int(h) for h in model_table.get("hidden", [64, 64])]
    model_checkpoint = None
    if model_table.get("checkpoint") is not None:
        model_checkpoint = Path(model_table["checkpoint"])
        if not model_checkpoint.is_absolute():
            model_checkpoint = path.parent / model_checkpoint
        if not model_checkpoint.is_file():
            raise ConfigError(f"[model].checkpoint: file not found: {model_checkpoint}")
    seeds = [int(s) for s in raw.get("seeds", [0])]
    if not seeds:
        raise ConfigError("seeds must be non-empty")
    sweep = [float(r) for r in raw.get("sweep", [])]
    output_dir = Path(raw.get("output_dir", "runs"))
    if not output_dir.is_absolute():
        output_dir = path.parent / output_dir
    return ExperimentConfig(
        dataset=_parse_dataset(raw["dataset"], path.parent),
        hidden=hidden,
        source_train=_parse_train(raw.get("source_train", {}), "source_train"),
        adapt_train=_parse_train(raw.get("adapt_train", {}), "adapt_train"),
        seeds=seeds,
        sweep=sweep,
        output_dir=output_dir,
        model_checkpoint=model_checkpoint,
    )


def build_datasets(cfg: ExperimentConfig, run_seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    if isinstance(cfg.dataset, ShiftSpec):
        spec = replace(cfg.dataset, seed=cfg.dataset.seed + run_seed)
        return generate_shifted_gaussians(spec)
    ds = cfg.dataset
    source = load_idx_dataset(
        ds.source_images, ds.source_labels, ds.num_classes, ds.subsample, seed=1000 + run_seed
    )
    target = load_idx_dataset(
        ds.target_images, ds.target_labels, ds.num_classes, ds.subsample, seed=2000 + run_seed
    )
    return source, target


def _pretrain(cfg: ExperimentConfig, run_seed: int) -> tuple[Classifier, LabeledDataset, LabeledDataset]:
    source, target = build_datasets(cfg, run_seed)
    if cfg.model_checkpoint is not None:
        return load_checkpoint(cfg.model_checkpoint), source, target
    src_cfg = replace(cfg.source_train, seed=cfg.source_train.seed + run_seed)
    model = build_mlp(source.dim, cfg.hidden, source.num_classes, seed=src_cfg.seed)
    train_source(model, source, src_cfg)
    return model, source, target


def _write_manifest(cfg: ExperimentConfig, out: Path) -> None:
    manifest = {"tool_version": __version__, "config": cfg.resolved()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_run(config_path: str) -> int:
    cfg = load_config(config_path)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(cfg, out)

    per_seed: list[dict[str, float]] = []
    for s in cfg.seeds:
        model, source, target = _pretrain(cfg, s)
        seed_dir = out / f"seed{s}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, seed_dir / "checkpoint_source.npz")
        adapt_cfg = replace(cfg.adapt_train, seed=cfg.adapt_train.seed + s)
        stages: dict[str, float] = {}
        _, metrics = run_ssnll(model, target, adapt_cfg, output_dir=seed_dir, stage_accuracies=stages)
        stages["ssnll_final"] = metrics[-1].target_accuracy
        stages["ssnll_best"] = max(m.target_accuracy for m in metrics)
        per_seed.append(stages)
        logger.info("seed %d: %s", s, {k: round(v, 4) for k, v in stages.items()})

    medians = {key: statistics.median(row[key] for row in per_seed) for key in per_seed[0]}
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "median_accuracy"])
        for key, label in STAGE_LABELS:
            writer.writerow([label, repr(medians[key])])

    print(f"accuracy on target (median over {len(cfg.seeds)} seed(s))")
    for key, label in STAGE_LABELS:
        print(f"  {label:<16} {medians[key]:.4f}")
    return 0


def cmd_sweep(config_path: str) -> int:
    cfg = load_config(config_path)
    if not cfg.sweep:
        raise ConfigError("sweep requires a non-empty top-level 'sweep' list of split ratios")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(cfg, out)

    pretrained: list[tuple[Path, LabeledDataset]] = []
    for s in cfg.seeds:
        model, _, target = _pretrain(cfg, s)
        ckpt = out / f"seed{s}_source.npz"
        save_checkpoint(model, ckpt)
        pretrained.append((ckpt, target))

    rows = []
    for r in cfg.sweep:
        finals, bests = [], []
        for s, (ckpt, target) in zip(cfg.seeds, pretrained):
            model = load_checkpoint(ckpt)
            adapt_cfg = replace(cfg.adapt_train, seed=cfg.adapt_train.seed + s, split_ratio=r)
            _, metrics = run_ssnll(model, target, adapt_cfg)
            finals.append(metrics[-1].target_accuracy)
            bests.append(max(m.target_accuracy for m in metrics))
        rows.append((r, statistics.median(finals), statistics.median(bests)))
        logger.info("sweep r=%.2f: final=%.4f best=%.4f", *rows[-1])

    with open(out / "sweep.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["r", "final_accuracy", "best_accuracy"])
        for r, final, best in rows:
            writer.writerow([repr(r), repr(final), repr(best)])
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} ratio(s))")
    return 0


def _resolve_split(cfg: ExperimentConfig, split: str) -> LabeledDataset:
    source, target = build_datasets(cfg, cfg.seeds[0])
    return source if split == "source" else target


def cmd_export_embeddings(checkpoint: str, config_path: str, out_path: str, split: str = "target") -> int:
    cfg = load_config(config_path)
    model = load_checkpoint(checkpoint)
    data = _resolve_split(cfg, split)
    features = extract_features(model, data)
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "label"] + [f"feat_{j}" for j in range(features.shape[1])])
        for i in range(features.shape[0]):
            writer.writerow([i, int(data.labels[i])] + [repr(float(v)) for v in features[i]])
    print(f"wrote {features.shape[0]} embedding rows to {out_path}")
    return 0


def cmd_eval(checkpoint: str, config_path: str, split: str = "target") -> int:
    cfg = load_config(config_path)
    model = load_checkpoint(checkpoint)
    data = _resolve_split(cfg, split)
    result = evaluate(model, data)
    print(f"accuracy: {result.accuracy:.4f}")
    for c, acc in enumerate(result.per_class_accuracy):
        shown = "n/a" if np.isnan(acc) else f"{acc:.4f}"
        print(f"  class {c}: {shown}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ssnll", description="Source-free domain adaptation experiments")
    parser.add_argument("--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="pre-train on source, adapt on target, print the ablation table")
    p_run.add_argument("--config", required=True)

    p_sweep = sub.add_parser("sweep", help="adapt once per configured split ratio from a shared pre-trained model")
    p_sweep.add_argument("--config", required=True)

    p_exp = sub.add_parser("export-embeddings", help="write feature-tap activations as CSV")
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--config", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--split", choices=["source", "target"], default="target")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the configured dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--split", choices=["source", "target"], default="target")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "sweep":
            return cmd_sweep(args.config)
        if args.command == "export-embeddings":
            return cmd_export_embeddings(args.checkpoint, args.config, args.out, args.split)
        return cmd_eval(args.checkpoint, args.config, args.split)
    except SsnllError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

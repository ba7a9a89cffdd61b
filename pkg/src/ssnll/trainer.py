"""Source-domain supervised training and the alternating adaptation loop:
split the target set by small-loss ranking, then fine-tune the student on
the cleaner half with pseudo labels and on the noisier half with labels
self-generated by an EMA teacher, epoch by epoch."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .adapt import (
    PseudoLabelSet,
    adabn_update,
    dtc_refine,
    extract_features,
    kmeans,
    overcluster_count,
    pregenerate_labels,
)
from .data import AugmentSpec, LabeledDataset, augment_batch, balanced_batches
from .errors import InvalidInputError
from .nn import (
    Adam,
    Classifier,
    SGD,
    backward,
    clone,
    cross_entropy,
    ema_update,
    forward,
    save_checkpoint,
    _softmax_rows,
)
from .split import SplitAssignment, labelwise_split, per_sample_loss

logger = logging.getLogger(__name__)

LR_FIXED = "fixed"
LR_COSINE = "cosine"


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


OptimizerConfig = SGDConfig | AdamConfig


@dataclass
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=AdamConfig)
    batch_size: int = 128
    epochs: int = 20
    split_ratio: float = 0.2
    ema_lambda: float = 0.99
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    adabn_lambda: float = 0.9
    blur_predictions: bool = True
    seed: int = 0
    lr_schedule: str = LR_FIXED

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise InvalidInputError("batch_size must be even (1:1 cleaner/noisier packing)")
        if not 0 < self.split_ratio <= 1:
            raise InvalidInputError("split_ratio must lie in (0, 1]")
        if not 0 <= self.ema_lambda <= 1:
            raise InvalidInputError("ema_lambda must lie in [0, 1]")
        if not 0 <= self.adabn_lambda < 1:
            raise InvalidInputError("adabn_lambda must lie in [0, 1)")
        if self.lr_schedule not in (LR_FIXED, LR_COSINE):
            raise InvalidInputError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class EpochMetrics:
    epoch: int
    target_accuracy: float
    pseudo_label_accuracy: float
    cleaner_size: int
    noisier_size: int
    cleaner_precision: float
    mean_supervised_loss: float
    mean_self_loss: float

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (float(v) if isinstance(v, float) else int(v)) for k, v in d.items()}


class EvalResult(NamedTuple):
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray


def make_optimizer(cfg: OptimizerConfig) -> SGD | Adam:
    if isinstance(cfg, SGDConfig):
        return SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    if isinstance(cfg, AdamConfig):
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    raise InvalidInputError(f"unknown optimizer config {cfg!r}")


def scheduled_lr(base_lr: float, schedule: str, epoch: int, total_epochs: int) -> float:
    if schedule == LR_COSINE:
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(1, total_epochs)))
    return base_lr


def evaluate(model: Classifier, data: LabeledDataset) -> EvalResult:
    """Eval-mode single-view inference: overall accuracy, per-class recall,
    and the (true x predicted) confusion counts."""
    if (data.labels < 0).any():
        raise InvalidInputError("evaluate requires fully labeled data")
    probs, _, _ = forward(model, data.features, mode="eval")
    preds = probs.argmax(axis=1)
    k = data.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (data.labels, preds), 1)
    row_totals = confusion.sum(axis=1)
    with np.errstate(invalid="ignore"):
        per_class = np.where(row_totals > 0, np.diag(confusion) / np.maximum(row_totals, 1), np.nan)
    accuracy = float(np.trace(confusion) / data.n)
    return EvalResult(accuracy, per_class, confusion)


def train_source(model: Classifier, source: LabeledDataset, config: TrainConfig) -> Classifier:
    """Plain supervised training on labeled source data; BatchNorm running
    statistics end up reflecting the source distribution."""
    if (source.labels < 0).any():
        raise InvalidInputError("source data must be fully labeled")
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer)
    base_lr = opt.lr
    for epoch in range(config.epochs):
        opt.lr = scheduled_lr(base_lr, config.lr_schedule, epoch, config.epochs)
        order = rng.permutation(source.n)
        for start in range(0, source.n, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, _, cache = forward(model, source.features[idx], mode="train")
            grads = backward(model, cache, source.labels[idx])
            opt.step(model, grads)
    train_acc = evaluate(model, source).accuracy
    logger.info("train_source: final source training accuracy %.4f", train_acc)
    return model


def self_label(teacher: Classifier, view: np.ndarray) -> np.ndarray:
    """Argmax labels from the teacher on the second augmented view; no
    gradient ever flows through this path."""
    probs, _, _ = forward(teacher, view, mode="eval")
    return probs.argmax(axis=1)


def _masked_accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    mask = truth >= 0
    if not mask.any():
        return float("nan")
    return float((predicted[mask] == truth[mask]).mean())


class _NoisierSampler:
    """Uniform draws without replacement, reshuffling on exhaustion."""

    def __init__(self, pool: np.ndarray, rng: np.random.Generator):
        self.pool = pool
        self.rng = rng
        self.order = rng.permutation(pool)
        self.pos = 0

    def draw(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self.pos >= self.order.size:
                self.order = self.rng.permutation(self.pool)
                self.pos = 0
            take = min(count, self.order.size - self.pos)
            out.append(self.order[self.pos : self.pos + take])
            self.pos += take
            count -= take
        return np.concatenate(out)


def ssnll_epoch(
    student: Classifier,
    teacher: Classifier,
    target: LabeledDataset,
    pseudo: PseudoLabelSet,
    assign: SplitAssignment,
    config: TrainConfig,
    rng: np.random.Generator,
    optimizer: SGD | Adam | None = None,
    epoch: int = 0,
) -> tuple[Classifier, Classifier, EpochMetrics]:
    """One training epoch of the alternating loop.

    Each batch packs batch_size/2 cleaner samples (balanced over their
    pseudo-label classes, trained un-augmented against those labels) with
    batch_size/2 noisier samples (view 1 trained against the teacher's
    argmax on view 2); the two mean cross-entropies are summed and one
    optimizer step taken, then the teacher EMA is advanced. With an empty
    noisier set (split ratio 1.0) the epoch degenerates to plain fine-tuning
    on the pseudo labels.
    """
    if optimizer is None:
        optimizer = make_optimizer(config.optimizer)
    half = config.batch_size // 2
    degenerate = assign.noisier.size == 0
    if assign.cleaner.size == 0:
        raise InvalidInputError("cleaner subset is empty")

    cleaner_by_class = [
        assign.cleaner[pseudo.labels[assign.cleaner] == c] for c in range(target.num_classes)
    ]
    quota = config.batch_size if degenerate else half
    cleaner_stream = balanced_batches(cleaner_by_class, quota, rng)
    noisier_sampler = None if degenerate else _NoisierSampler(assign.noisier, rng)

    iterations = math.ceil(target.n / config.batch_size)
    sup_losses, self_losses = [], []
    for _ in range(iterations):
        cl_idx = next(cleaner_stream)
        x_cl = target.features[cl_idx]
        y_cl = pseudo.labels[cl_idx]
        if degenerate:
            probs, _, cache = forward(student, x_cl, mode="train")
            train_probs = _softmax_rows(probs) if config.blur_predictions else probs
            loss, _ = cross_entropy(train_probs, y_cl)
            sup_losses.append(loss)
            self_losses.append(0.0)
            grads = backward(student, cache, y_cl, blur=config.blur_predictions)
        else:
            no_idx = noisier_sampler.draw(half)
            x_no = target.features[no_idx]
            view1 = augment_batch(x_no, config.augment, rng)
            view2 = augment_batch(x_no, config.augment, rng)
            y_no = self_label(teacher, view2)
            batch = np.vstack([x_cl, view1])
            labels = np.concatenate([y_cl, y_no])
            probs, _, cache = forward(student, batch, mode="train")
            train_probs = _softmax_rows(probs) if config.blur_predictions else probs
            _, per_sample = cross_entropy(train_probs, labels)
            sup_losses.append(float(per_sample[:half].mean()))
            self_losses.append(float(per_sample[half:].mean()))
            grads = backward(student, cache, labels, blur=config.blur_predictions)
            # the objective is the sum of the two half-batch means, which is
            # twice the full-batch mean that backward() differentiates
            grads = {key: 2.0 * g for key, g in grads.items()}
        optimizer.step(student, grads)
        ema_update(teacher, student, config.ema_lambda)

    metrics = EpochMetrics(
        epoch=epoch,
        target_accuracy=_masked_accuracy(
            forward(student, target.features, mode="eval")[0].argmax(axis=1), target.labels
        ),
        pseudo_label_accuracy=_masked_accuracy(pseudo.labels, target.labels),
        cleaner_size=int(assign.cleaner.size),
        noisier_size=int(assign.noisier.size),
        cleaner_precision=_masked_accuracy(
            pseudo.labels[assign.cleaner], target.labels[assign.cleaner]
        ),
        mean_supervised_loss=float(np.mean(sup_losses)),
        mean_self_loss=float(np.mean(self_losses)),
    )
    return student, teacher, metrics


def run_ssnll(
    model: Classifier,
    target: LabeledDataset,
    config: TrainConfig,
    output_dir: str | Path | None = None,
    stage_accuracies: dict | None = None,
) -> tuple[Classifier, list[EpochMetrics]]:
    """Full source-free adaptation pipeline, in order: AdaBN statistic
    re-estimation, pseudo-label pre-generation, one round of over-clustered
    k-means + within-cluster aggregation, then the alternating split/train
    loop. The teacher starts as a deep copy of the post-AdaBN student.

    ``stage_accuracies``, when given, is filled with the target accuracy
    after each denoising stage (requires ground-truth target labels).
    ``output_dir``, when given, receives metrics.jsonl, summary.csv and the
    post-AdaBN/final checkpoints.
    """
    rng = np.random.default_rng(config.seed)
    has_truth = bool((target.labels >= 0).any())

    def record(stage: str, labels: np.ndarray) -> None:
        if stage_accuracies is not None and has_truth:
            stage_accuracies[stage] = _masked_accuracy(labels, target.labels)

    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").unlink(missing_ok=True)  # reruns must not append

    record("source_only", forward(model, target.features, mode="eval")[0].argmax(axis=1))
    adabn_update(model, target, config.adabn_lambda, config.batch_size, rng=rng)
    raw_pseudo = pregenerate_labels(model, target)
    record("adabn", raw_pseudo.labels)

    features = extract_features(model, target)
    k = overcluster_count(target.num_classes, target.n)
    clusters = kmeans(features, k, seed=config.seed)
    pseudo = dtc_refine(raw_pseudo, clusters)
    record("adabn_dtc", pseudo.labels)

    teacher = clone(model)
    optimizer = make_optimizer(config.optimizer)
    base_lr = optimizer.lr
    if out is not None:
        save_checkpoint(model, out / "checkpoint_postadabn.npz")

    metrics: list[EpochMetrics] = []
    for epoch in range(config.epochs):
        optimizer.lr = scheduled_lr(base_lr, config.lr_schedule, epoch, config.epochs)
        losses = per_sample_loss(model, target, pseudo)
        assign = labelwise_split(losses, pseudo.labels, target.num_classes, config.split_ratio)
        model, teacher, epoch_metrics = ssnll_epoch(
            model, teacher, target, pseudo, assign, config, rng, optimizer, epoch
        )
        metrics.append(epoch_metrics)
        if out is not None:
            append_metrics_jsonl(epoch_metrics, out / "metrics.jsonl")
        logger.info(
            "ssnll epoch %d: target_acc=%.4f cleaner=%d noisier=%d",
            epoch,
            epoch_metrics.target_accuracy,
            epoch_metrics.cleaner_size,
            epoch_metrics.noisier_size,
        )
    if out is not None:
        save_checkpoint(model, out / "checkpoint_final.npz")
        write_summary_csv(metrics, out / "summary.csv")
    return model, metrics


# --- metrics serialization ---

METRIC_FIELDS = [
    "epoch",
    "target_accuracy",
    "pseudo_label_accuracy",
    "cleaner_size",
    "noisier_size",
    "cleaner_precision",
    "mean_supervised_loss",
    "mean_self_loss",
]


def metrics_jsonl_line(m: EpochMetrics) -> str:
    return json.dumps(m.to_dict(), sort_keys=True)


def append_metrics_jsonl(m: EpochMetrics, path) -> None:
    with open(path, "a") as f:
        f.write(metrics_jsonl_line(m) + "\n")


def write_metrics_jsonl(metrics: list[EpochMetrics], path) -> None:
    with open(path, "w") as f:
        for m in metrics:
            f.write(metrics_jsonl_line(m) + "\n")


def write_summary_csv(metrics: list[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_FIELDS)
        for m in metrics:
            d = m.to_dict()
            writer.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in METRIC_FIELDS])

"""Source-free domain adaptation by self-supervised noisy-label learning.

A pre-trained classifier is adapted to an unlabeled target domain by
re-estimating its batch-norm statistics, denoising its own predictions with
over-clustered k-means voting, and alternating small-loss dataset splits
with a student/EMA-teacher fine-tuning loop.
"""

__version__ = "0.1.0"

from .adapt import (
    ClusterModel,
    PseudoLabelSet,
    adabn_update,
    dtc_refine,
    extract_features,
    kmeans,
    pregenerate_labels,
)
from .data import (
    AugmentSpec,
    LabeledDataset,
    ShiftSpec,
    augment,
    balanced_batches,
    generate_shifted_gaussians,
    load_idx_dataset,
    parse_idx,
)
from .errors import (
    ConfigError,
    FormatError,
    InvalidInputError,
    InvalidStateError,
    ShapeError,
    SsnllError,
    UnsupportedError,
)
from .nn import (
    Adam,
    Affine,
    BatchNorm,
    Classifier,
    ReLU,
    SGD,
    Softmax,
    backward,
    build_mlp,
    clone,
    cross_entropy,
    ema_update,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .split import SplitAssignment, labelwise_split, per_sample_loss
from .trainer import (
    AdamConfig,
    EpochMetrics,
    EvalResult,
    SGDConfig,
    TrainConfig,
    evaluate,
    run_ssnll,
    self_label,
    ssnll_epoch,
    train_source,
)

__all__ = [
    "Adam",
    "AdamConfig",
    "Affine",
    "AugmentSpec",
    "BatchNorm",
    "Classifier",
    "ClusterModel",
    "ConfigError",
    "EpochMetrics",
    "EvalResult",
    "FormatError",
    "InvalidInputError",
    "InvalidStateError",
    "LabeledDataset",
    "PseudoLabelSet",
    "ReLU",
    "SGD",
    "SGDConfig",
    "ShapeError",
    "ShiftSpec",
    "Softmax",
    "SplitAssignment",
    "SsnllError",
    "TrainConfig",
    "UnsupportedError",
    "adabn_update",
    "augment",
    "backward",
    "balanced_batches",
    "build_mlp",
    "clone",
    "cross_entropy",
    "dtc_refine",
    "ema_update",
    "evaluate",
    "extract_features",
    "forward",
    "generate_shifted_gaussians",
    "kmeans",
    "labelwise_split",
    "load_checkpoint",
    "load_idx_dataset",
    "parse_idx",
    "per_sample_loss",
    "pregenerate_labels",
    "run_ssnll",
    "save_checkpoint",
    "self_label",
    "ssnll_epoch",
    "train_source",
]

"""Minimal differentiable classifier on NumPy float64.

Layers are plain dataclasses (Affine, BatchNorm, ReLU, Softmax) assembled
into a Classifier; forward/backward are free functions so gradients can be
checked against finite differences without any autodiff machinery.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FormatError,
    InvalidInputError,
    InvalidStateError,
    ShapeError,
)

# Running-statistic momentum of a BatchNorm layer in plain train mode:
# running <- 0.9 * running + 0.1 * batch.
BN_MOMENTUM = 0.1

# Probabilities are floored here inside cross_entropy, capping the loss at
# -log(1e-12) for confidently wrong predictions.
PROB_FLOOR = 1e-12

TRAIN = "train"
EVAL = "eval"

# One gradient array per trainable parameter, keyed by (layer index, role).
GradientSet = dict[tuple[int, str], np.ndarray]


@dataclass
class Affine:
    W: np.ndarray  # (in_width, out_width)
    b: np.ndarray  # (out_width,)

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.ndim != 1 or self.b.shape[0] != self.W.shape[1]:
            raise ShapeError(f"affine W {self.W.shape} incompatible with b {self.b.shape}")


@dataclass
class BatchNorm:
    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        widths = {a.shape for a in (self.mean, self.var, self.gamma, self.beta)}
        if len(widths) != 1 or self.mean.ndim != 1:
            raise ShapeError("batchnorm vectors must share one 1-D shape")
        if (self.var < 0).any():
            raise InvalidInputError("batchnorm variance must be non-negative")
        if self.epsilon < 0:
            raise InvalidInputError("batchnorm epsilon must be non-negative")

    @property
    def width(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, width: int, epsilon: float = 1e-5) -> "BatchNorm":
        return cls(np.zeros(width), np.ones(width), np.ones(width), np.zeros(width), epsilon)


@dataclass
class ReLU:
    pass


@dataclass
class Softmax:
    pass


Layer = Affine | BatchNorm | ReLU | Softmax


@dataclass
class Classifier:
    """Layered model ending in a Softmax head.

    ``feature_tap`` is the index of the layer whose output is the penultimate
    representation used for clustering/export; -1 taps the raw input batch.
    """

    layers: list[Layer]
    num_classes: int
    feature_tap: int
    version: int = field(default=0, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise InvalidInputError("final layer must be Softmax")
        if not -1 <= self.feature_tap < len(self.layers):
            raise InvalidInputError(f"feature_tap {self.feature_tap} out of range")
        width: int | None = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Affine):
                if width is not None and layer.W.shape[0] != width:
                    raise ShapeError(f"layer {i}: expected input width {width}, got {layer.W.shape[0]}")
                width = layer.W.shape[1]
            elif isinstance(layer, BatchNorm):
                if width is not None and layer.width != width:
                    raise ShapeError(f"layer {i}: batchnorm width {layer.width} != {width}")
                width = layer.width
        if width is not None and width != self.num_classes:
            raise ShapeError(f"softmax width {width} != num_classes {self.num_classes}")

    @property
    def input_width(self) -> int:
        for layer in self.layers:
            if isinstance(layer, Affine):
                return layer.W.shape[0]
            if isinstance(layer, BatchNorm):
                return layer.width
        return self.num_classes

    def bump_version(self) -> None:
        self.version += 1


def build_mlp(input_width: int, hidden: list[int], num_classes: int, seed: int = 0) -> Classifier:
    """Default experiment architecture: [Affine, BatchNorm, ReLU] per hidden
    width, then Affine(num_classes) + Softmax. Feature tap: last hidden ReLU
    (or the input when there are no hidden layers)."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    width = input_width
    tap = -1
    for h in hidden:
        layers.append(Affine(rng.normal(0.0, np.sqrt(2.0 / width), size=(width, h)), np.zeros(h)))
        layers.append(BatchNorm.identity(h))
        layers.append(ReLU())
        tap = len(layers) - 1
        width = h
    layers.append(Affine(rng.normal(0.0, np.sqrt(2.0 / width), size=(width, num_classes)), np.zeros(num_classes)))
    layers.append(Softmax())
    return Classifier(layers, num_classes, tap)


def clone(model: Classifier) -> Classifier:
    """Deep copy; the clone shares no arrays with the original."""
    return copy.deepcopy(model)


def iter_params(model: Classifier):
    """Yield (layer_index, role, array) for every trainable parameter."""
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Affine):
            yield i, "W", layer.W
            yield i, "b", layer.b
        elif isinstance(layer, BatchNorm):
            yield i, "gamma", layer.gamma
            yield i, "beta", layer.beta


def iter_bn_stats(model: Classifier):
    """Yield (layer_index, role, array) for every BatchNorm running statistic."""
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BatchNorm):
            yield i, "mean", layer.mean
            yield i, "var", layer.var


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ForwardCache:
    """Activation record of one train-mode forward, consumed by backward()."""

    mode: str
    model_id: int
    version: int
    records: list[tuple]
    probs: np.ndarray
    batch_rows: int


def forward(
    model: Classifier,
    batch: np.ndarray,
    mode: str = EVAL,
    bn_momentum: float = BN_MOMENTUM,
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run the model on a batch.

    Returns (probs, features, cache). In train mode each BatchNorm normalizes
    with batch statistics (biased variance) and folds them into its running
    estimates with ``bn_momentum``; in eval mode it reads the stored
    population statistics and mutates nothing.
    """
    if mode not in (TRAIN, EVAL):
        raise InvalidInputError(f"mode must be '{TRAIN}' or '{EVAL}', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {x.shape}")
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    if x.shape[1] != model.input_width:
        raise ShapeError(f"batch width {x.shape[1]} != model input width {model.input_width}")
    if not np.isfinite(x).all():
        raise InvalidInputError("batch contains non-finite values")

    train = mode == TRAIN
    features = x if model.feature_tap == -1 else None
    records: list[tuple] = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Affine):
            records.append(("affine", x))
            x = x @ layer.W + layer.b
        elif isinstance(layer, BatchNorm):
            if train:
                mu = x.mean(axis=0)
                var = x.var(axis=0)  # biased (1/N)
                inv_std = 1.0 / np.sqrt(var + layer.epsilon)
                xhat = (x - mu) * inv_std
                layer.mean[...] = (1.0 - bn_momentum) * layer.mean + bn_momentum * mu
                layer.var[...] = (1.0 - bn_momentum) * layer.var + bn_momentum * var
            else:
                inv_std = 1.0 / np.sqrt(layer.var + layer.epsilon)
                xhat = (x - layer.mean) * inv_std
            records.append(("batchnorm", xhat, inv_std))
            x = layer.gamma * xhat + layer.beta
        elif isinstance(layer, ReLU):
            mask = x > 0
            records.append(("relu", mask))
            x = np.where(mask, x, 0.0)
        else:  # Softmax
            x = _softmax_rows(x)
            records.append(("softmax", x))
        if i == model.feature_tap:
            features = x
    probs = x
    cache = ForwardCache(mode, id(model), model.version, records, probs, probs.shape[0])
    return probs, features.copy(), cache


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean and per-sample -log p[label], with probabilities floored at
    PROB_FLOOR so a confident miss yields a large finite loss."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.ndim != 1 or probs.shape[0] != labels.shape[0]:
        raise ShapeError(f"probs {probs.shape} incompatible with labels {labels.shape}")
    if labels.size and ((labels < 0).any() or (labels >= probs.shape[1]).any()):
        raise InvalidInputError("label out of range")
    picked = probs[np.arange(probs.shape[0]), labels.astype(int)]
    per_sample = -np.log(np.maximum(picked, PROB_FLOOR))
    return float(per_sample.mean()), per_sample


def _check_cache(model: Classifier, cache: ForwardCache) -> None:
    if cache.mode != TRAIN:
        raise InvalidStateError("backward requires a cache from a train-mode forward")
    if cache.model_id != id(model) or cache.version != model.version:
        raise InvalidStateError("cache is stale: model parameters changed since forward")


def backward(
    model: Classifier,
    cache: ForwardCache,
    labels: np.ndarray,
    blur: bool = False,
) -> GradientSet:
    """Gradient of the mean cross-entropy w.r.t. every trainable parameter.

    With ``blur=True`` the loss consumes softmax(probs) in place of probs
    (the training-time prediction-blurring path); evaluation never blurs.
    """
    _check_cache(model, cache)
    labels = np.asarray(labels)
    n = cache.batch_rows
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if (labels < 0).any() or (labels >= model.num_classes).any():
        raise InvalidInputError("label out of range")

    onehot = np.zeros((n, model.num_classes))
    onehot[np.arange(n), labels.astype(int)] = 1.0

    probs = cache.probs
    if blur:
        # d mean CE(softmax(p), y) / dp, then through the head's own Jacobian.
        dp = (_softmax_rows(probs) - onehot) / n
        g = probs * (dp - (dp * probs).sum(axis=1, keepdims=True))
    else:
        # fused softmax + cross-entropy gradient at the head's input
        g = (probs - onehot) / n

    grads: GradientSet = {}
    for i in range(len(model.layers) - 2, -1, -1):
        layer = model.layers[i]
        rec = cache.records[i]
        if isinstance(layer, Affine):
            x_in = rec[1]
            grads[(i, "W")] = x_in.T @ g
            grads[(i, "b")] = g.sum(axis=0)
            g = g @ layer.W.T
        elif isinstance(layer, BatchNorm):
            xhat, inv_std = rec[1], rec[2]
            grads[(i, "gamma")] = (g * xhat).sum(axis=0)
            grads[(i, "beta")] = g.sum(axis=0)
            dxhat = g * layer.gamma
            m = xhat.shape[0]
            g = (inv_std / m) * (
                m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        elif isinstance(layer, ReLU):
            g = np.where(rec[1], g, 0.0)
        else:  # interior Softmax
            p = rec[1]
            g = p * (g - (g * p).sum(axis=1, keepdims=True))
    return grads


def _check_grad_shapes(model: Classifier, grads: GradientSet) -> None:
    keys = set()
    for i, role, param in iter_params(model):
        keys.add((i, role))
        g = grads.get((i, role))
        if g is not None and g.shape != param.shape:
            raise ShapeError(f"gradient for layer {i} {role} has shape {g.shape}, expected {param.shape}")
    unknown = set(grads) - keys
    if unknown:
        raise ShapeError(f"gradients for unknown parameters: {sorted(unknown)}")


class SGD:
    """Momentum SGD with optional decoupled-into-gradient weight decay."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0:
            raise InvalidInputError("lr must be non-negative")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self, model: Classifier, grads: GradientSet) -> Classifier:
        _check_grad_shapes(model, grads)
        for i, role, param in iter_params(model):
            g = grads.get((i, role))
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * param
            v = self._velocity.get((i, role))
            if self.momentum:
                v = g if v is None else self.momentum * v + g
                self._velocity[(i, role)] = v
            else:
                v = g
            param -= self.lr * v
        model.bump_version()
        return model


class Adam:
    """Bias-corrected adaptive moments, one shared step counter."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise InvalidInputError("lr must be non-negative")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise InvalidInputError("betas must lie in [0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[tuple[int, str], np.ndarray] = {}
        self._v: dict[tuple[int, str], np.ndarray] = {}

    def step(self, model: Classifier, grads: GradientSet) -> Classifier:
        _check_grad_shapes(model, grads)
        self.step_count += 1
        t = self.step_count
        for i, role, param in iter_params(model):
            g = grads.get((i, role))
            if g is None:
                continue
            m = self._m.get((i, role), np.zeros_like(param))
            v = self._v.get((i, role), np.zeros_like(param))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[(i, role)] = m
            self._v[(i, role)] = v
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        model.bump_version()
        return model


def ema_update(teacher: Classifier, student: Classifier, lambda_ema: float) -> Classifier:
    """teacher <- lambda * teacher + (1 - lambda) * student, applied to every
    trainable parameter and every BatchNorm running statistic."""
    if not 0 <= lambda_ema <= 1:
        raise InvalidInputError("lambda_ema must lie in [0, 1]")
    t_params = list(iter_params(teacher)) + list(iter_bn_stats(teacher))
    s_params = list(iter_params(student)) + list(iter_bn_stats(student))
    if len(t_params) != len(s_params):
        raise InvalidInputError("teacher and student are structurally different")
    for (ti, trole, tp), (si, srole, sp) in zip(t_params, s_params):
        if ti != si or trole != srole or tp.shape != sp.shape:
            raise InvalidInputError("teacher and student are structurally different")
        tp[...] = lambda_ema * tp + (1.0 - lambda_ema) * sp
    teacher.bump_version()
    return teacher


# --- checkpoint serialization (.npz: json header + one array per tensor) ---

CHECKPOINT_FORMAT = "ssnll-checkpoint"
CHECKPOINT_VERSION = 1


def _layer_spec(layer: Layer) -> dict:
    if isinstance(layer, Affine):
        return {"kind": "affine", "in": int(layer.W.shape[0]), "out": int(layer.W.shape[1])}
    if isinstance(layer, BatchNorm):
        return {"kind": "batchnorm", "width": layer.width, "epsilon": layer.epsilon}
    if isinstance(layer, ReLU):
        return {"kind": "relu"}
    return {"kind": "softmax"}


def save_checkpoint(model: Classifier, path) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "num_classes": model.num_classes,
        "feature_tap": model.feature_tap,
        "layers": [_layer_spec(l) for l in model.layers],
    }
    arrays: dict[str, np.ndarray] = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for i, role, param in iter_params(model):
        arrays[f"layer{i}.{role}"] = param
    for i, role, stat in iter_bn_stats(model):
        arrays[f"layer{i}.{role}"] = stat
    np.savez(path, **arrays)


def load_checkpoint(path) -> Classifier:
    try:
        with np.load(path, allow_pickle=False) as data:
            if "meta" not in data:
                raise FormatError("checkpoint missing header")
            meta = json.loads(str(data["meta"][()]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise FormatError(f"bad checkpoint magic: {meta.get('format')!r}")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise FormatError(f"unsupported checkpoint version {meta.get('version')!r}")
            layers: list[Layer] = []
            for i, spec in enumerate(meta["layers"]):
                kind = spec["kind"]
                if kind == "affine":
                    layers.append(Affine(data[f"layer{i}.W"], data[f"layer{i}.b"]))
                elif kind == "batchnorm":
                    layers.append(
                        BatchNorm(
                            data[f"layer{i}.mean"],
                            data[f"layer{i}.var"],
                            data[f"layer{i}.gamma"],
                            data[f"layer{i}.beta"],
                            float(spec["epsilon"]),
                        )
                    )
                elif kind == "relu":
                    layers.append(ReLU())
                elif kind == "softmax":
                    layers.append(Softmax())
                else:
                    raise FormatError(f"unknown layer kind {kind!r}")
            return Classifier(layers, int(meta["num_classes"]), int(meta["feature_tap"]))
    except FormatError:
        raise
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint: {exc}") from exc

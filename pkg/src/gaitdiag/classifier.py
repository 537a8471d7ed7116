"""Five-class gait MLP: 222 -> ReLU -> ReLU + dropout -> softmax(5).

Trained with Adam on categorical cross-entropy. Weight matrices are stored
``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
"""

from __future__ import annotations

import copy
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from gaitdiag.errors import (
    DegenerateDataset,
    DimensionMismatch,
    DivergedTraining,
    EmptyTestSet,
    ModelFormatError,
    NonFiniteInput,
)
from gaitdiag.features import LAYOUT_VERSION, N_FEATURES
from gaitdiag.rng import make_rng

logger = logging.getLogger(__name__)

MODEL_FORMAT = "gaitdiag-mlp"
MODEL_FORMAT_VERSION = 1
LOG_CLAMP = 1e-12
STD_FLOOR = 1e-12


class GaitLabel(enum.IntEnum):
    IDLE = 0
    WALK = 1
    RUN = 2
    HOPPING = 3
    SKIP = 4

    @property
    def title(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value) -> "GaitLabel":
        if isinstance(value, str):
            return cls[value.strip().upper()]
        return cls(int(value))


N_CLASSES = len(GaitLabel)
LABEL_MAP = {int(g): g.title for g in GaitLabel}


@dataclass
class MlpModel:
    weights: list
    biases: list
    norm_mean: np.ndarray
    norm_std: np.ndarray
    activations: tuple = ("relu", "relu", "softmax")
    dropout_rate: float = 0.5
    feature_layout: str = LAYOUT_VERSION

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def validate(self):
        sizes = self.layer_sizes
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise DimensionMismatch("expected exactly three dense layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise DimensionMismatch(f"layer {i} has weight {w.shape} and bias {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFiniteInput(f"layer {i} has non-finite parameters")
        if sizes[-1] != N_CLASSES:
            raise DimensionMismatch(f"output layer must have {N_CLASSES} units")
        if self.norm_mean.shape != (sizes[0],) or self.norm_std.shape != (sizes[0],):
            raise DimensionMismatch("normalization stats do not match input width")

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.norm_mean) / self.norm_std

    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "format_version": MODEL_FORMAT_VERSION,
            "feature_layout": self.feature_layout,
            "layer_sizes": self.layer_sizes,
            "activations": list(self.activations),
            "dropout": {"layer": 2, "rate": self.dropout_rate},
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "normalization": {"mean": self.norm_mean.tolist(), "std": self.norm_std.tolist()},
            "labels": {str(k): v for k, v in LABEL_MAP.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"not a {MODEL_FORMAT} document")
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model format version {doc.get('format_version')}")
        labels = {int(k): v for k, v in doc["labels"].items()}
        if labels != LABEL_MAP:
            raise ModelFormatError(f"label map {labels} does not match {LABEL_MAP}")
        model = cls(
            weights=[np.array(w, dtype=np.float64) for w in doc["weights"]],
            biases=[np.array(b, dtype=np.float64) for b in doc["biases"]],
            norm_mean=np.array(doc["normalization"]["mean"], dtype=np.float64),
            norm_std=np.array(doc["normalization"]["std"], dtype=np.float64),
            activations=tuple(doc["activations"]),
            dropout_rate=float(doc["dropout"]["rate"]),
            feature_layout=doc["feature_layout"],
        )
        model.validate()
        if model.layer_sizes != doc["layer_sizes"]:
            raise ModelFormatError("layer_sizes disagree with weight shapes")
        return model


def init_model(sizes: Sequence[int], rng: np.random.Generator, dropout_rate=0.5) -> MlpModel:
    """He-style uniform init (limit sqrt(6 / fan_in)), zero biases, identity normalization."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(
        weights, biases, np.zeros(sizes[0]), np.ones(sizes[0]), dropout_rate=dropout_rate
    )


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    validation_fraction: float = 0.2
    hidden: tuple = (20, 10)
    dropout_rate: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValueError("hidden must be two positive layer widths")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, 222), raw (un-normalized)
    labels: np.ndarray  # (n,) int codes
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionMismatch("features and labels differ in length")
        if len(self.labels) and self.features.shape[1] != N_FEATURES:
            raise DimensionMismatch(f"rows must have {N_FEATURES} values, got {self.features.shape[1]}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValueError("label codes must lie in 0..4")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.norm_mean, self.norm_std)

    def with_stats_from_self(self) -> "LabeledDataset":
        mean, std = normalization_stats(self.features)
        return LabeledDataset(self.features, self.labels, mean, std)

    def normalized(self) -> np.ndarray:
        if self.norm_mean is None:
            raise ValueError("dataset has no normalization statistics")
        return (self.features - self.norm_mean) / self.norm_std

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES)


def normalization_stats(x: np.ndarray):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std < STD_FLOOR, 1.0, std)


def stratified_split(labels, fractions: Sequence[float], seed) -> list[np.ndarray]:
    """Split row indices per class by ``fractions`` (summing to 1), order-stable.

    Each class is shuffled with its own seeded stream and cut at rounded
    cumulative boundaries, so equal class sizes give identical per-class counts.
    """
    labels = np.asarray(labels)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    parts: list[list[int]] = [[] for _ in fractions]
    rng = make_rng(seed)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        bounds = np.round(np.cumsum(fractions) * len(idx)).astype(int)
        start = 0
        for p, stop in enumerate(bounds):
            parts[p].extend(idx[start:stop].tolist())
            start = stop
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


# --- forward / backward -----------------------------------------------------


_P_MIN = np.finfo(np.float64).tiny
_P_MAX = np.nextafter(1.0, 0.0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    # saturated logits would otherwise produce exact 0 or 1
    return np.clip(e / e.sum(axis=-1, keepdims=True), _P_MIN, _P_MAX)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 for dropped units, 1/(1-rate) for survivors."""
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _forward_pass(model: MlpModel, x: np.ndarray, mask: Optional[np.ndarray]):
    w1, w2, w3 = model.weights
    b1, b2, b3 = model.biases
    z1 = x @ w1 + b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ w2 + b2
    h2 = np.maximum(z2, 0.0)
    if mask is not None:
        h2 = h2 * mask
    z3 = h2 @ w3 + b3
    return (z1, h1, z2, h2, z3), softmax(z3)


def _check_input(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.layer_sizes[0]:
        raise DimensionMismatch(f"input width {x.shape[-1]} != {model.layer_sizes[0]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("input contains NaN or Inf")
    return x


def forward(model: MlpModel, x, mode: str = "infer", dropout_seed: Optional[int] = None) -> np.ndarray:
    """Class probabilities for one normalized vector or a batch of them."""
    x = _check_input(model, x)
    mask = None
    if mode == "train" and model.dropout_rate > 0:
        h2_shape = x.shape[:-1] + (model.layer_sizes[2],)
        mask = dropout_mask(h2_shape, model.dropout_rate, make_rng(dropout_seed or 0))
    elif mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return _forward_pass(model, x, mask)[1]


def cce_loss(predicted, true_label) -> float:
    p = np.clip(np.asarray(predicted, dtype=np.float64), LOG_CLAMP, 1.0)
    return float(-np.log(p[int(true_label)]))


def _batch_cce(probs: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(y)), y], LOG_CLAMP, 1.0)
    return float(-np.mean(np.log(p)))


def loss_and_gradients(model: MlpModel, x: np.ndarray, y: np.ndarray, mask: Optional[np.ndarray] = None):
    """Mean CCE over the batch and its gradient w.r.t. every weight and bias."""
    x = np.atleast_2d(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    (z1, h1, z2, h2, z3), probs = _forward_pass(model, x, mask)
    n = len(y)
    loss = _batch_cce(probs, y)

    dz3 = probs.copy()
    dz3[np.arange(n), y] -= 1.0
    dz3 /= n
    gw3 = h2.T @ dz3
    gb3 = dz3.sum(axis=0)
    dh2 = dz3 @ model.weights[2].T
    if mask is not None:
        dh2 = dh2 * mask
    dz2 = dh2 * (z2 > 0)
    gw2 = h1.T @ dz2
    gb2 = dz2.sum(axis=0)
    dz1 = (dz2 @ model.weights[1].T) * (z1 > 0)
    gw1 = x.T @ dz1
    gb1 = dz1.sum(axis=0)
    return loss, [gw1, gw2, gw3], [gb1, gb2, gb3]


# --- training ---------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: Optional[float]
    val_accuracy: Optional[float]


@dataclass
class TrainResult:
    model: MlpModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: Optional[float] = None


class _Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _accuracy(probs, y) -> float:
    return float(np.mean(probs.argmax(axis=1) == y))


def train(
    dataset: LabeledDataset,
    config: Optional[TrainConfig] = None,
    validation: Optional[LabeledDataset] = None,
) -> TrainResult:
    """Fit a fresh MLP and return the epoch with the best validation accuracy.

    Without an explicit ``validation`` set, ``config.validation_fraction`` of
    ``dataset`` is held out (stratified). Normalization statistics always come
    from the rows actually trained on. Ties on validation accuracy keep the
    earliest epoch.
    """
    config = config or TrainConfig()
    counts = dataset.class_counts()
    if np.count_nonzero(counts) < 2:
        raise DegenerateDataset("training needs at least two classes")

    rng = make_rng(config.seed)
    split_seed, init_seed, loop_seed = (int(s) for s in rng.integers(0, 2**63, size=3))
    if validation is None and config.validation_fraction > 0:
        tr_idx, va_idx = stratified_split(
            dataset.labels, (1 - config.validation_fraction, config.validation_fraction), split_seed
        )
        train_set, validation = dataset.subset(tr_idx), dataset.subset(va_idx)
    else:
        train_set = dataset
    if validation is not None and len(validation) == 0:
        validation = None

    mean, std = normalization_stats(train_set.features)
    x = (train_set.features - mean) / std
    y = train_set.labels
    xv = yv = None
    if validation is not None:
        xv = (validation.features - mean) / std
        yv = validation.labels

    sizes = [N_FEATURES, *config.hidden, N_CLASSES]
    model = init_model(sizes, make_rng(init_seed), config.dropout_rate)
    model.norm_mean, model.norm_std = mean, std
    params = model.weights + model.biases
    adam = _Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    loop_rng = make_rng(loop_seed)

    n = len(y)
    batch = min(config.batch_size, n)
    history: list[EpochRecord] = []
    best = TrainResult(copy.deepcopy(model), history, 0, None)
    best_score = -1.0
    for epoch in range(1, config.epochs + 1):
        order = loop_rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            mask = None
            if model.dropout_rate > 0:
                mask = dropout_mask((len(idx), sizes[2]), model.dropout_rate, loop_rng)
            loss, gw, gb = loss_and_gradients(model, x[idx], y[idx], mask)
            if not math.isfinite(loss):
                raise DivergedTraining(f"loss became {loss} in epoch {epoch}", history)
            adam.step(params, gw + gb)

        _, probs = _forward_pass(model, x, None)
        record = EpochRecord(epoch, _batch_cce(probs, y), _accuracy(probs, y), None, None)
        if not math.isfinite(record.train_loss):
            raise DivergedTraining(f"loss became {record.train_loss} in epoch {epoch}", history)
        score = record.train_accuracy
        if xv is not None:
            _, pv = _forward_pass(model, xv, None)
            record.val_loss = _batch_cce(pv, yv)
            record.val_accuracy = score = _accuracy(pv, yv)
        history.append(record)
        if score > best_score:
            best_score = score
            best.model = copy.deepcopy(model)
            best.best_epoch = epoch
            best.best_val_accuracy = record.val_accuracy
        if epoch % 100 == 0:
            logger.info("epoch %d loss %.4f acc %.3f val %s", epoch, record.train_loss,
                        record.train_accuracy, record.val_accuracy)
    return best


# --- inference and metrics --------------------------------------------------


def predict(model: MlpModel, x):
    """Argmax label (lowest code on ties) and the infer-mode probabilities."""
    probs = forward(model, x, "infer")
    return GaitLabel(int(np.argmax(probs))), probs


def predict_batch(model: MlpModel, x) -> np.ndarray:
    return forward(model, x, "infer").argmax(axis=-1)


@dataclass
class ClassMetrics:
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    support: int


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class: dict
    accuracy: float
    macro: dict
    weighted: dict
    total: int

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "labels": [g.title for g in GaitLabel],
            "per_class": {
                g.title: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for g, m in self.per_class.items()
            },
            "accuracy": self.accuracy,
            "macro_avg": self.macro,
            "weighted_avg": self.weighted,
            "total": self.total,
        }

    def row_normalized_percent(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1, keepdims=True)
        return np.divide(100.0 * self.confusion, rows, out=np.zeros(self.confusion.shape), where=rows > 0)


def confusion_matrix(y_true, y_pred) -> np.ndarray:
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(cm) -> MetricsReport:
    """Per-class and averaged metrics; rows are true classes, columns predictions.

    A metric whose denominator is zero is reported as ``None``. Averages run
    over classes with non-zero support and count an undefined value as 0.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise EmptyTestSet("confusion matrix is empty")
    per_class = {}
    for g in GaitLabel:
        c = int(g)
        tp = int(cm[c, c])
        predicted = int(cm[:, c].sum())
        support = int(cm[c, :].sum())
        precision = tp / predicted if predicted else None
        recall = tp / support if support else None
        if precision is None or recall is None:
            f1 = None
        else:
            f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class[g] = ClassMetrics(precision, recall, f1, support)

    present = [m for m in per_class.values() if m.support > 0]

    def avg(attr, weighted):
        num = sum((getattr(m, attr) or 0.0) * (m.support if weighted else 1) for m in present)
        den = sum(m.support for m in present) if weighted else len(present)
        return num / den

    macro = {k: avg(k, False) for k in ("precision", "recall", "f1")}
    weighted = {k: avg(k, True) for k in ("precision", "recall", "f1")}
    return MetricsReport(cm, per_class, float(np.trace(cm)) / total, macro, weighted, total)


def evaluate(model: MlpModel, test: LabeledDataset) -> MetricsReport:
    if len(test) == 0:
        raise EmptyTestSet("test set is empty")
    pred = predict_batch(model, model.normalize(test.features))
    return metrics_from_confusion(confusion_matrix(test.labels, pred))


def save_model(model: MlpModel, path, extra: Optional[dict] = None):
    from gaitdiag.io import atomic_write_text

    doc = model.to_dict()
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def load_model_doc(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_model(path) -> MlpModel:
    return MlpModel.from_dict(load_model_doc(path))

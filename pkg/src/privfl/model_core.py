"""Datasets, small classification models, and per-sample gradients.

Models expose per-example gradients because record-level privacy clips each
example's gradient before anything is averaged. Both architectures keep their
parameters in one flat float64 vector so the privacy engine, the aggregation
protocol, and the update rule can treat a model as a plain vector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class LabeledSample:
    """One training record: a feature vector and an integer class label."""

    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Immutable array-backed collection of labeled samples."""

    features: np.ndarray  # (n, num_features) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be (n, f) and labels (n,)")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels disagree on sample count")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(features=self.features[i], label=int(self.labels[i]))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            num_classes=self.num_classes,
            name=self.name,
        )

    def split(self, first: int) -> tuple["Dataset", "Dataset"]:
        """Split into the first `first` samples and the rest, preserving order."""
        if not 0 <= first <= len(self):
            raise ValueError(f"split point {first} outside [0, {len(self)}]")
        return self.subset(np.arange(first)), self.subset(np.arange(first, len(self)))


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector plus the named shapes it decomposes into."""

    values: np.ndarray  # (total,) float64
    shapes: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        total = sum(int(np.prod(s)) for _, s in self.shapes)
        if self.values.shape != (total,):
            raise ValueError(f"expected {total} parameters, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameters must be finite")
        self.values.setflags(write=False)

    def view(self, name: str) -> np.ndarray:
        offset = 0
        for n, shape in self.shapes:
            size = int(np.prod(shape))
            if n == name:
                return self.values[offset : offset + size].reshape(shape)
            offset += size
        raise KeyError(name)

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(values=np.asarray(values, dtype=np.float64), shapes=self.shapes)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class PerSampleGradient:
    """Gradient of one record's loss with respect to the flat parameters."""

    values: np.ndarray

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    loss: float


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class LogisticModel:
    """Multinomial logistic regression: logits = W x + c."""

    def __init__(self, num_features: int, num_classes: int):
        if num_features < 1 or num_classes < 2:
            raise ValueError("need num_features >= 1 and num_classes >= 2")
        self.num_features = num_features
        self.num_classes = num_classes
        self.shapes = (
            ("weight", (num_classes, num_features)),
            ("bias", (num_classes,)),
        )

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def zero_params(self) -> ModelParams:
        return ModelParams(values=np.zeros(self.num_params), shapes=self.shapes)

    def init_params(self, rng: np.random.Generator, scale: float = 0.1) -> ModelParams:
        return ModelParams(values=scale * rng.standard_normal(self.num_params), shapes=self.shapes)

    def logits(self, params: ModelParams, x: np.ndarray) -> np.ndarray:
        return x @ params.view("weight").T + params.view("bias")

    def per_sample_losses_and_grads(self, params, x, y):
        logp = _log_softmax(self.logits(params, x))
        n = len(y)
        losses = -logp[np.arange(n), y]
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        grads = np.concatenate(
            [np.einsum("nl,nf->nlf", d, x).reshape(n, -1), d], axis=1
        )
        return losses, grads


class MlpModel:
    """One-hidden-layer network with tanh activation."""

    def __init__(self, num_features: int, num_classes: int, hidden: int = 32):
        if num_features < 1 or num_classes < 2 or hidden < 1:
            raise ValueError("need num_features >= 1, num_classes >= 2, hidden >= 1")
        self.num_features = num_features
        self.num_classes = num_classes
        self.hidden = hidden
        self.shapes = (
            ("w1", (hidden, num_features)),
            ("b1", (hidden,)),
            ("w2", (num_classes, hidden)),
            ("b2", (num_classes,)),
        )

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def zero_params(self) -> ModelParams:
        return ModelParams(values=np.zeros(self.num_params), shapes=self.shapes)

    def init_params(self, rng: np.random.Generator, scale: float = 0.1) -> ModelParams:
        return ModelParams(values=scale * rng.standard_normal(self.num_params), shapes=self.shapes)

    def logits(self, params: ModelParams, x: np.ndarray) -> np.ndarray:
        h = np.tanh(x @ params.view("w1").T + params.view("b1"))
        return h @ params.view("w2").T + params.view("b2")

    def per_sample_losses_and_grads(self, params, x, y):
        w1, b1 = params.view("w1"), params.view("b1")
        w2, b2 = params.view("w2"), params.view("b2")
        hpre = x @ w1.T + b1
        h = np.tanh(hpre)
        logp = _log_softmax(h @ w2.T + b2)
        n = len(y)
        losses = -logp[np.arange(n), y]
        d2 = np.exp(logp)
        d2[np.arange(n), y] -= 1.0
        dpre = (1.0 - h * h) * (d2 @ w2)
        grads = np.concatenate(
            [
                np.einsum("nh,nf->nhf", dpre, x).reshape(n, -1),
                dpre,
                np.einsum("nl,nh->nlh", d2, h).reshape(n, -1),
                d2,
            ],
            axis=1,
        )
        return losses, grads


def build_model(kind: str, num_features: int, num_classes: int, hidden: int = 32):
    if kind == "logistic":
        return LogisticModel(num_features, num_classes)
    if kind == "mlp":
        return MlpModel(num_features, num_classes, hidden=hidden)
    raise ValueError(f"unknown model kind {kind!r}; expected 'logistic' or 'mlp'")


def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, Dataset):
        return batch.features, batch.labels
    feats = np.stack([s.features for s in batch])
    labels = np.array([s.label for s in batch], dtype=np.int64)
    return feats, labels


def loss_and_per_sample_grads(model, params: ModelParams, batch):
    """Mean cross-entropy loss and one gradient per record in the batch."""
    x, y = _batch_arrays(batch)
    if len(y) == 0:
        raise ValueError("batch is empty")
    losses, grads = model.per_sample_losses_and_grads(params, x, y)
    return float(losses.mean()), [PerSampleGradient(values=g) for g in grads]


def single_loss_and_grad(model, params: ModelParams, sample: LabeledSample):
    """Loss and flat gradient for one record; handy for gradient checking."""
    losses, grads = model.per_sample_losses_and_grads(
        params, sample.features[None, :], np.array([sample.label])
    )
    return float(losses[0]), grads[0]


def evaluate(model, params: ModelParams, data: Dataset) -> EvalResult:
    """Accuracy and mean cross-entropy on a dataset."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logp = _log_softmax(model.logits(params, data.features))
    preds = logp.argmax(axis=1)
    loss = float(-logp[np.arange(len(data)), data.labels].mean())
    return EvalResult(accuracy=float((preds == data.labels).mean()), loss=loss)


def synth_dataset(
    num_samples: int,
    num_features: int,
    num_classes: int,
    seed: int,
    separation: float = 2.0,
    name: str | None = None,
) -> Dataset:
    """Gaussian blobs with one mean per class and round-robin label counts.

    Class means are orthonormal directions scaled by `separation`, so classes
    overlap heavily at 0.0 and become nearly separable past ~4.0. Labels are
    assigned round-robin before a final shuffle, so class counts differ by at
    most one. Deterministic in `seed`.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if num_features < 1 or num_classes < 2:
        raise ValueError("need num_features >= 1 and num_classes >= 2")
    if separation < 0:
        raise ValueError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((num_features, max(num_classes, 2)))
    if num_classes <= num_features:
        q, _ = np.linalg.qr(raw)
        dirs = q[:, :num_classes].T
    else:
        raw = rng.standard_normal((num_classes, num_features))
        dirs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    means = separation * dirs
    labels = np.arange(num_samples, dtype=np.int64) % num_classes
    features = means[labels] + rng.standard_normal((num_samples, num_features))
    perm = rng.permutation(num_samples)
    return Dataset(
        features=features[perm],
        labels=labels[perm],
        num_classes=num_classes,
        name=name or f"synth-{seed}",
    )


def load_csv_dataset(path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    """Load `f1,...,fk,label` rows; a non-numeric first row is treated as a header."""
    path = Path(path)
    rows: list[list[str]] = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    start = 0
    try:
        float(rows[0][0])
    except ValueError:
        start = 1
    if start == len(rows):
        raise ValueError(f"{path}: header only, no data rows")
    width = len(rows[start])
    feats, labels = [], []
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise ValueError(f"{path} row {i}: expected {width} fields, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
        except ValueError as exc:
            raise ValueError(f"{path} row {i}: {exc}") from None
    labels_arr = np.array(labels, dtype=np.int64)
    if labels_arr.min() < 0:
        raise ValueError(f"{path}: labels must be nonnegative")
    classes = num_classes if num_classes is not None else int(labels_arr.max()) + 1
    return Dataset(
        features=np.array(feats, dtype=np.float64),
        labels=labels_arr,
        num_classes=classes,
        name=name or path.stem,
    )


def model_hash(params: ModelParams) -> str:
    """Hex digest of the exact parameter bytes; used for round snapshots."""
    import hashlib

    return hashlib.sha256(params.values.tobytes()).hexdigest()

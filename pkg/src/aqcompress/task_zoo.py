"""Small hand-differentiated classifiers and datasets for end-to-end runs.

Parameters are stored layer-major, weight before bias, under the names
``layer{i}.weight`` (shape ``(fan_in, fan_out)``) and ``layer{i}.bias``.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import log_softmax

from .tensor_io import TensorArchive

ACTIVATIONS = ("tanh", "relu")


class TaskTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    widths: Tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"need at least two positive widths, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        object.__setattr__(self, "widths", widths)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_shapes(self) -> List[Tuple[str, tuple]]:
        out = []
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out.append((f"layer{i}.weight", (a, b)))
            out.append((f"layer{i}.bias", (b,)))
        return out


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float32)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"features {X.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("labels out of range")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size


@dataclass
class TaskModel:
    spec: MlpSpec
    params: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def init(cls, spec: MlpSpec, dtype=np.float32) -> "TaskModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(spec.seed)
        params = []
        for name, shape in spec.param_shapes():
            if name.endswith(".weight"):
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                params.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
            else:
                params.append(np.zeros(shape, dtype=dtype))
        return cls(spec, params)

    def copy(self) -> "TaskModel":
        return TaskModel(self.spec, [p.copy() for p in self.params])

    def astype(self, dtype) -> "TaskModel":
        return TaskModel(self.spec, [p.astype(dtype) for p in self.params])

    def to_archive(self) -> TensorArchive:
        return TensorArchive.from_arrays(
            (name, p) for (name, _), p in zip(self.spec.param_shapes(), self.params)
        )

    @classmethod
    def from_archive(cls, archive: TensorArchive, activation: str = "relu", seed: int = 0) -> "TaskModel":
        """Rebuild from an archive, inferring layer widths from the weight shapes."""
        if len(archive) < 2 or len(archive) % 2:
            raise ValueError("archive does not hold (weight, bias) pairs")
        widths = [archive[0].shape[0]] if len(archive[0].shape) == 2 else None
        if widths is None:
            raise ValueError("first tensor is not a 2-D weight")
        for i in range(len(archive) // 2):
            widths.append(archive[2 * i].shape[-1])
        spec = MlpSpec(tuple(widths), activation, seed)
        expected = spec.param_shapes()
        got = [(e.name, e.shape) for e in archive]
        if got != expected:
            raise ValueError(f"archive layout {got} does not match an MLP {expected}")
        return cls(spec, [e.array().copy() for e in archive])


def make_blobs(n_per_class: int = 200, classes: int = 3, dim: int = 2, spread: float = 2.0,
               seed: int = 0) -> Dataset:
    """Gaussian clusters around fixed centers.

    Centers sit on a circle of radius 5 in the first two coordinates (on a
    line when ``dim == 1``); they do not depend on ``seed``.
    """
    if n_per_class < 1 or classes < 1 or dim < 1 or spread < 0:
        raise ValueError("blob arguments must be positive")
    centers = np.zeros((classes, dim))
    for c in range(classes):
        if dim == 1:
            centers[c, 0] = 5.0 * c
        else:
            angle = 2 * math.pi * c / classes
            centers[c, :2] = 5.0 * math.cos(angle), 5.0 * math.sin(angle)
    rng = np.random.default_rng(seed)
    X = np.repeat(centers, n_per_class, axis=0) + spread * rng.standard_normal((classes * n_per_class, dim))
    y = np.repeat(np.arange(classes), n_per_class)
    return Dataset(X.astype(np.float32), y, classes)


def _act(x, kind):
    return np.tanh(x) if kind == "tanh" else np.maximum(x, 0)


def _act_grad(z, a, kind):
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(z.dtype)


def forward(model: TaskModel, X: np.ndarray):
    """Logits plus the per-layer ``(input, pre-activation, activation)`` cache."""
    X = np.asarray(X, dtype=model.params[0].dtype)
    if X.ndim != 2 or X.shape[1] != model.spec.widths[0]:
        raise ValueError(f"expected features of width {model.spec.widths[0]}, got {X.shape}")
    cache = []
    a = X
    L = model.spec.n_layers
    for i in range(L):
        W, b = model.params[2 * i], model.params[2 * i + 1]
        z = a @ W + b
        if i < L - 1:
            out = _act(z, model.spec.activation)
            cache.append((a, z, out))
            a = out
        else:
            cache.append((a, z, None))
            a = z
    return a, cache


def loss_and_backward(model: TaskModel, X: np.ndarray, y: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Mean softmax cross-entropy and its gradient for every parameter tensor."""
    logits, cache = forward(model, X)
    y = np.asarray(y)
    n = y.size
    logp = log_softmax(logits, axis=1)  # max-subtracted internally
    loss = float(-logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    grads: List[Optional[np.ndarray]] = [None] * len(model.params)
    for i in reversed(range(model.spec.n_layers)):
        a_in, z, out = cache[i]
        if out is not None:
            g = g * _act_grad(z, out, model.spec.activation)
        grads[2 * i] = a_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i:
            g = g @ model.params[2 * i].T
    return loss, grads


def predict(model: TaskModel, X: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, X)
    return np.argmax(logits, axis=1)


def evaluate(model: TaskModel, data: Dataset) -> float:
    """Top-1 accuracy; ties in the logits go to the lowest class index."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, data.features) == data.labels))


def train_task(spec: MlpSpec, data: Dataset, epochs: int = 50, lr: float = 0.1, seed: int = 0,
               batch_size: int = 32) -> Tuple[TaskModel, List[dict]]:
    """Plain minibatch gradient descent from a fresh initialization."""
    model = TaskModel.init(spec)
    rng = np.random.default_rng(seed)
    history = []
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            loss, grads = loss_and_backward(model, data.features[idx], data.labels[idx])
            if not math.isfinite(loss):
                raise TaskTrainingError(f"loss is {loss} at epoch {epoch}")
            for p, g in zip(model.params, grads):
                p -= (lr * g).astype(p.dtype)
            total += loss * idx.size
        history.append({"epoch": epoch, "loss": total / n, "accuracy": evaluate(model, data)})
    return model, history


# -- IDX files ---------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: str) -> np.ndarray:
    """Read an IDX array (optionally gzip-compressed)."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0 or blob[2] not in _IDX_TYPES:
        raise ValueError(f"{path}: not an IDX file")
    ndim = blob[3]
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    dtype = np.dtype(_IDX_TYPES[blob[2]])
    offset = 4 + 4 * ndim
    count = math.prod(dims)
    if len(blob) != offset + count * dtype.itemsize:
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(blob, dtype=dtype, offset=offset, count=count).reshape(dims)


def load_idx_dataset(images_path: str, labels_path: str, limit: Optional[int] = None) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image and label counts differ")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = images.reshape(images.shape[0], -1).astype(np.float32)
    if images.dtype == np.uint8:
        X /= 255.0
    return Dataset(X, labels, int(labels.max()) + 1 if labels.size else 1)

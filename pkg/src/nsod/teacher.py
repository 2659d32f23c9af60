"""Linear softmax teacher over frozen features.

The teacher is trained with mini-batch gradient descent on the mean
cross-entropy against C-way pseudo-labels, using a cosine-decayed learning
rate. It is then used as a region classifier.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datamodel import FormatError, NSODError
from .features import fit_scaling, fold_scaling, unfold_scaling

logger = logging.getLogger(__name__)

TEACHER_MAGIC = b"NSODTCHR"


class TrainingError(NSODError):
    pass


@dataclass(frozen=True)
class TeacherParams:
    learning_rate: float = 1e-2
    batch_size: int = 32
    epochs: int = 30
    init_scale: float = 0.01
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown teacher keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TeacherModel:
    W: np.ndarray  # (C, D)
    b: np.ndarray  # (C,)
    final_loss: float = float("nan")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.W.T + self.b

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Softmax class probabilities for ``(N, D)`` features."""
        return softmax(self.logits(features))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(W, b, X, y):
    """Mean cross-entropy of ``softmax(X W^T + b)`` against integer labels, with gradients."""
    z = X @ W.T + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1
    g /= n
    return loss, g.T @ X, g.sum(axis=0)


def init_teacher(num_classes: int, dim: int, params: TeacherParams) -> TeacherModel:
    rng = np.random.default_rng(params.seed)
    W = rng.normal(0.0, params.init_scale, size=(num_classes, dim))
    return TeacherModel(_f32(W), np.zeros(num_classes))


def _f32(a):
    # parameters are kept float32-representable so a saved model reloads bit-exactly
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1 + math.cos(math.pi * step / max(total, 1)))


def train_teacher(features: np.ndarray, labels, num_classes: int, params: TeacherParams = TeacherParams(),
                  scaling=None):
    """Fit the teacher on ``(N, D)`` features and C-way labels.

    Returns the trained :class:`TeacherModel`; its ``final_loss`` is the mean
    training cross-entropy after the last epoch. SGD runs on per-dimension
    standardized features and the result is folded back into weights that act
    on raw features. ``scaling`` overrides the ``(mean, spread)`` statistics,
    which are otherwise fit on ``features``.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) == 0:
        raise TrainingError("empty training set")
    if len(X) != len(y):
        raise ValueError("features and labels differ in length")
    model = init_teacher(num_classes, X.shape[1], params)
    mu, sd = fit_scaling(X) if scaling is None else scaling
    Z = (X - mu) / sd
    W, b = unfold_scaling(model.W, model.b, mu, sd)
    rng = np.random.default_rng([params.seed, 1])
    steps_per_epoch = math.ceil(len(X) / params.batch_size)
    total = steps_per_epoch * params.epochs
    step = 0
    for epoch in range(params.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), params.batch_size):
            idx = order[start:start + params.batch_size]
            loss, gW, gb = cross_entropy(W, b, Z[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite teacher loss at iteration {step}")
            lr = cosine_lr(params.learning_rate, step, total)
            W -= lr * gW
            b -= lr * gb
            step += 1
        logger.debug("teacher epoch %d loss %.4f", epoch, loss)
    W, b = fold_scaling(W, b, mu, sd)
    model = TeacherModel(_f32(W), _f32(b))
    model.final_loss = float(cross_entropy(model.W, model.b, X, y)[0])
    return model


def predict_image(teacher: TeacherModel, global_feature: np.ndarray) -> np.ndarray:
    return teacher.predict(np.asarray(global_feature).reshape(1, -1))[0]


def region_prob_matrix(teacher: TeacherModel, region_features: np.ndarray) -> np.ndarray:
    """``A``: one softmax row per proposal, shape ``(R, C)``."""
    return teacher.predict(region_features)


def save_teacher(path, model: TeacherModel):
    C, D = model.W.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TEACHER_MAGIC)
        f.write(struct.pack("<II", C, D))
        f.write(np.ascontiguousarray(model.W, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(model.b, dtype="<f4").tobytes())


def load_teacher(path) -> TeacherModel:
    data = Path(path).read_bytes()
    if data[:8] != TEACHER_MAGIC:
        raise FormatError(f"{path}: not a teacher model file")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated teacher model file")
    C, D = struct.unpack("<II", data[8:16])
    if len(data) != 16 + 4 * (C * D + C):
        raise FormatError(f"{path}: truncated teacher model file")
    W = np.frombuffer(data, dtype="<f4", count=C * D, offset=16).reshape(C, D)
    b = np.frombuffer(data, dtype="<f4", count=C, offset=16 + 4 * C * D)
    return TeacherModel(W.astype(np.float64), b.astype(np.float64))

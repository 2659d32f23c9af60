"""MIL student detector: a two-stream dual-softmax head plus refinement branches.

The base head scores every proposal with ``softmax_rows(M_cls) * softmax_cols(M_det)``
and sums over proposals to get image-level class probabilities, trained with
per-class binary cross-entropy against the image-level pseudo-label. Each
refinement branch is a (C+1)-way proposal classifier (index C is background)
supervised by pseudo proposal labels mined from the previous branch: the top
proposal of every positive class becomes a seed and its IoU >= 0.5
neighbours inherit its label.

All heads are linear over frozen region features; gradients are analytic.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import Box, Detection, FormatError, NSODError
from .evaluate import iou_matrix
from .features import _spread, fold_scaling
from .voting import dual_softmax

logger = logging.getLogger(__name__)

STUDENT_MAGIC = b"NSODSTDT"
EPS = 1e-6


@dataclass(frozen=True)
class StudentParams:
    steps: int = 5000
    learning_rate: float = 1e-2
    decay_step: int = 3500
    decay_factor: float = 0.1
    branches: int = 3
    refine_iou: float = 0.5
    init_scale: float = 0.01
    score_floor: float = 1e-3
    nms_iou: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.branches < 1:
            raise ValueError("the student needs at least one refinement branch")

    @classmethod
    def from_dict(cls, d: dict) -> "StudentParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown student keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StudentModel:
    W_cls: np.ndarray  # (C, D)
    b_cls: np.ndarray
    W_det: np.ndarray  # (C, D)
    b_det: np.ndarray
    W_ref: list  # K x (C+1, D)
    b_ref: list  # K x (C+1,)
    history: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.W_cls.shape[0]

    @property
    def dim(self) -> int:
        return self.W_cls.shape[1]

    def params(self) -> list:
        out = [self.W_cls, self.b_cls, self.W_det, self.b_det]
        for W, b in zip(self.W_ref, self.b_ref):
            out += [W, b]
        return out


@dataclass(frozen=True)
class TrainingExample:
    image_id: str
    features: np.ndarray  # (R, D)
    boxes: np.ndarray  # (R, 4), used for refinement overlaps
    y_hat: np.ndarray  # (C,) binary
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.loss_weight <= 0:
            raise ValueError(f"{self.image_id}: loss_weight must be positive")
        y = np.asarray(self.y_hat)
        if not np.all((y == 0) | (y == 1)):
            raise ValueError(f"{self.image_id}: y_hat must be binary")


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def init_student(num_classes: int, dim: int, params: StudentParams) -> StudentModel:
    rng = np.random.default_rng(params.seed)
    s = params.init_scale
    return StudentModel(
        W_cls=_f32(rng.normal(0, s, (num_classes, dim))),
        b_cls=np.zeros(num_classes),
        W_det=_f32(rng.normal(0, s, (num_classes, dim))),
        b_det=np.zeros(num_classes),
        W_ref=[_f32(rng.normal(0, s, (num_classes + 1, dim))) for _ in range(params.branches)],
        b_ref=[np.zeros(num_classes + 1) for _ in range(params.branches)],
    )


def zero_student(num_classes: int, dim: int, branches: int = 3) -> StudentModel:
    return StudentModel(
        np.zeros((num_classes, dim)), np.zeros(num_classes),
        np.zeros((num_classes, dim)), np.zeros(num_classes),
        [np.zeros((num_classes + 1, dim)) for _ in range(branches)],
        [np.zeros(num_classes + 1) for _ in range(branches)],
    )


# ---------------------------------------------------------------------------
# base MIL head


def mil_forward(model: StudentModel, features: np.ndarray):
    """Return ``(proposal_scores (R, C), image_scores (C,))``."""
    F = np.asarray(features, dtype=np.float64)
    cls, _ = dual_softmax(F @ model.W_cls.T + model.b_cls)
    _, det = dual_softmax(F @ model.W_det.T + model.b_det)
    scores = cls * det
    return scores, np.clip(scores.sum(axis=0), EPS, 1 - EPS)


def mil_loss(image_scores, y_hat, loss_weight: float = 1.0) -> float:
    p = np.clip(np.asarray(image_scores, dtype=np.float64), EPS, 1 - EPS)
    y = np.asarray(y_hat, dtype=np.float64)
    return float(-loss_weight * np.sum(y * np.log(p) + (1 - y) * np.log(1 - p)))


def mil_loss_grad(model: StudentModel, features, y_hat, loss_weight: float = 1.0):
    """Loss, proposal scores and gradients w.r.t. ``(W_cls, b_cls, W_det, b_det)``."""
    F = np.asarray(features, dtype=np.float64)
    cls, _ = dual_softmax(F @ model.W_cls.T + model.b_cls)
    _, det = dual_softmax(F @ model.W_det.T + model.b_det)
    scores = cls * det
    raw = scores.sum(axis=0)
    p = np.clip(raw, EPS, 1 - EPS)
    y = np.asarray(y_hat, dtype=np.float64)
    loss = float(-loss_weight * np.sum(y * np.log(p) + (1 - y) * np.log(1 - p)))
    # clamping stops the gradient outside [EPS, 1 - EPS]
    g = -loss_weight * (y / p - (1 - y) / (1 - p)) * ((raw > EPS) & (raw < 1 - EPS))
    gA = g[None, :] * det  # d loss / d cls
    gB = g[None, :] * cls  # d loss / d det
    dM_cls = cls * (gA - (gA * cls).sum(axis=1, keepdims=True))
    dM_det = det * (gB - (gB * det).sum(axis=0, keepdims=True))
    grads = (dM_cls.T @ F, dM_cls.sum(axis=0), dM_det.T @ F, dM_det.sum(axis=0))
    return loss, scores, grads


# ---------------------------------------------------------------------------
# refinement branches


def refine_targets(prev_scores: np.ndarray, y_hat, iou: np.ndarray, iou_threshold: float = 0.5):
    """Pseudo proposal labels in ``[0, C]`` (C = background) and per-proposal weights.

    For each positive class the top-scoring proposal is a seed. A proposal
    takes the label of the seed it overlaps most; if that overlap is below
    ``iou_threshold`` it becomes background. Either way its weight is that
    seed's score. Ties in overlap go to the higher seed score, then the lower
    class index. With no positive class every proposal is background with
    weight 1.
    """
    prev = np.asarray(prev_scores, dtype=np.float64)
    R, C = prev.shape
    y = np.asarray(y_hat)
    positives = np.flatnonzero(y)
    if len(positives) == 0:
        return np.full(R, C, dtype=np.int64), np.ones(R)
    seeds = np.array([int(np.argmax(prev[:, j])) for j in positives])
    seed_w = prev[seeds, positives]
    ov = iou[:, seeds]  # (R, n_seeds)
    # lexicographic choice: max IoU, then max weight, then lowest class (order of positives)
    best = np.empty(R, dtype=np.int64)
    for i in range(R):
        row = ov[i]
        cand = np.flatnonzero(row == row.max())
        if len(cand) > 1:
            w = seed_w[cand]
            cand = cand[w == w.max()]
        best[i] = cand[0]
    max_ov = ov[np.arange(R), best]
    labels = np.where(max_ov >= iou_threshold, positives[best], C)
    return labels.astype(np.int64), seed_w[best].astype(np.float64)


def branch_forward(W, b, features) -> np.ndarray:
    z = np.asarray(features, dtype=np.float64) @ W.T + b
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def refine_loss(branch_output: np.ndarray, targets, weights) -> float:
    """Mean over proposals of ``weight * cross_entropy``."""
    q = np.clip(np.asarray(branch_output, dtype=np.float64), 1e-12, 1.0)
    t = np.asarray(targets)
    w = np.asarray(weights, dtype=np.float64)
    return float(np.mean(-w * np.log(q[np.arange(len(t)), t])))


def refine_loss_grad(W, b, features, targets, weights, loss_weight: float = 1.0):
    F = np.asarray(features, dtype=np.float64)
    q = branch_forward(W, b, F)
    R = len(F)
    t = np.asarray(targets)
    w = np.asarray(weights, dtype=np.float64) * loss_weight
    loss = float(np.mean(-w * np.log(np.clip(q[np.arange(R), t], 1e-12, 1.0))))
    dz = q.copy()
    dz[np.arange(R), t] -= 1
    dz *= (w / R)[:, None]
    return loss, q, dz.T @ F, dz.sum(axis=0)


# ---------------------------------------------------------------------------
# training


def step_loss_grad(model: StudentModel, ex: TrainingExample, iou: np.ndarray, refine_iou: float = 0.5):
    """Total loss of one image and the gradient for every parameter, in ``model.params()`` order."""
    loss, prev, grads = mil_loss_grad(model, ex.features, ex.y_hat, ex.loss_weight)
    grads = list(grads)
    for W, b in zip(model.W_ref, model.b_ref):
        labels, weights = refine_targets(prev, ex.y_hat, iou, refine_iou)
        l, q, gW, gb = refine_loss_grad(W, b, ex.features, labels, weights, ex.loss_weight)
        loss += l
        grads += [gW, gb]
        prev = q[:, :-1]
    return loss, grads


def _lr(params: StudentParams, step: int) -> float:
    return params.learning_rate * (params.decay_factor if step >= params.decay_step else 1.0)


def train_student(examples: Sequence[TrainingExample], num_classes: int,
                  params: StudentParams = StudentParams(), log_every: int = 0) -> StudentModel:
    """SGD with one image per step, visiting images in seeded random epochs.

    Training runs on region features standardized per dimension over all
    training proposals (initial parameters live in that space); the returned
    model has the scaling folded in and acts on raw features.
    ``model.history`` holds ``(step, mean loss over the last window)`` pairs,
    with the window equal to one pass over the examples.
    """
    if not examples:
        raise NSODError("no training examples")
    if not any(np.any(ex.y_hat) for ex in examples):
        raise NSODError("nothing to learn: no example has a positive label")
    dim = examples[0].features.shape[1]
    model = init_student(num_classes, dim, params)
    mu, sd = region_scaling(examples)
    ious = {}
    rng = np.random.default_rng([params.seed, 2])
    order = np.array([], dtype=np.int64)
    window = []
    history = []
    n = len(examples)
    for step in range(params.steps):
        if len(order) == 0:
            order = rng.permutation(n)
        idx, order = order[0], order[1:]
        ex = examples[idx]
        key = ex.boxes.tobytes()
        if key not in ious:
            ious[key] = iou_matrix(ex.boxes, ex.boxes)
        z = replace(ex, features=(ex.features - mu) / sd)
        loss, grads = step_loss_grad(model, z, ious[key], params.refine_iou)
        if not np.isfinite(loss):
            raise NSODError(f"non-finite student loss at step {step} ({ex.image_id})")
        lr = _lr(params, step)
        for p, g in zip(model.params(), grads):
            p -= lr * g
        window.append(loss)
        if len(window) == n or step == params.steps - 1:
            history.append((step + 1, float(np.mean(window))))
            window = []
        if log_every and (step + 1) % log_every == 0:
            logger.info("student step %d loss %.4f", step + 1, loss)
    heads = [(model.W_cls, model.b_cls), (model.W_det, model.b_det), *zip(model.W_ref, model.b_ref)]
    for W, b in heads:
        W[...], b[...] = fold_scaling(W, b, mu, sd)
    for p in model.params():
        p[...] = _f32(p)
    model.history = history
    return model


def region_scaling(examples: Sequence[TrainingExample], eps: float = 1e-3):
    """Per-dimension mean and spread over every proposal of every example."""
    n = 0
    s1 = s2 = 0.0
    for ex in examples:
        F = np.asarray(ex.features, dtype=np.float64)
        n += len(F)
        s1 = s1 + F.sum(axis=0)
        s2 = s2 + (F * F).sum(axis=0)
    mu = s1 / n
    return mu, _spread(np.sqrt(np.maximum(s2 / n - mu * mu, 0.0)), eps)


# ---------------------------------------------------------------------------
# inference


def proposal_scores(model: StudentModel, features: np.ndarray) -> np.ndarray:
    """Mean foreground probability over refinement branches, ``(R, C)``."""
    F = np.asarray(features, dtype=np.float64)
    acc = np.zeros((len(F), model.num_classes))
    for W, b in zip(model.W_ref, model.b_ref):
        acc += branch_forward(W, b, F)[:, :-1]
    return acc / len(model.W_ref)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.3) -> np.ndarray:
    """Greedy NMS; returns kept indices ordered by descending score.

    Equal scores are ordered by box coordinates (x1, y1, x2, y2) ascending.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))
    keep = []
    while len(order):
        i = order[0]
        keep.append(i)
        if len(order) == 1:
            break
        ov = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ov <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def nms_detections(dets: Sequence[Detection], iou_threshold: float = 0.3) -> list:
    if not dets:
        return []
    if len({d.cls for d in dets}) > 1:
        raise ValueError("nms expects detections of a single class")
    boxes = np.array([d.box.as_array() for d in dets])
    keep = nms(boxes, np.array([d.score for d in dets]), iou_threshold)
    return [dets[i] for i in keep]


def detect(model: StudentModel, image_id: str, features: np.ndarray, boxes: np.ndarray,
           score_floor: float = 1e-3, nms_iou: float = 0.3) -> list:
    """Class-wise NMS over proposal scores; detections sorted by descending score."""
    scores = proposal_scores(model, features)
    boxes = np.asarray(boxes, dtype=np.float64)
    out = []
    for j in range(model.num_classes):
        sel = np.flatnonzero(scores[:, j] > score_floor)
        if len(sel) == 0:
            continue
        keep = sel[nms(boxes[sel], scores[sel, j], nms_iou)]
        out.extend((float(scores[i, j]), j, i) for i in keep)
    out.sort(key=lambda t: (-t[0], t[1], tuple(boxes[t[2]])))
    return [Detection(image_id, Box(*boxes[i]), j, s) for s, j, i in out]


# ---------------------------------------------------------------------------
# persistence


def save_student(path, model: StudentModel):
    C, D = model.W_cls.shape
    K = len(model.W_ref)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(STUDENT_MAGIC)
        f.write(struct.pack("<III", C, D, K))
        for p in model.params():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_student(path) -> StudentModel:
    data = Path(path).read_bytes()
    if data[:8] != STUDENT_MAGIC:
        raise FormatError(f"{path}: not a student model file")
    if len(data) < 20:
        raise FormatError(f"{path}: truncated student model file")
    C, D, K = struct.unpack("<III", data[8:20])
    shapes = [(C, D), (C,), (C, D), (C,)] + [(C + 1, D), (C + 1,)] * K
    need = 20 + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != need:
        raise FormatError(f"{path}: truncated student model file")
    off, arrs = 20, []
    for s in shapes:
        cnt = int(np.prod(s))
        arrs.append(np.frombuffer(data, dtype="<f4", count=cnt, offset=off).reshape(s).astype(np.float64))
        off += 4 * cnt
    return StudentModel(arrs[0], arrs[1], arrs[2], arrs[3], arrs[4::2], arrs[5::2])

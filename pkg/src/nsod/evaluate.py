"""Evaluation metrics: IoU, VOC-style detection AP, CorLoc, classification AP,
top-1 mean accuracy and proposal recall.

Detection AP uses 11-point interpolation (recall thresholds 0, 0.1, ..., 1).
Classification AP is the non-interpolated mean of precision at each positive.
Values are fractions in [0, 1]; text output shows them x100.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .datamodel import Box, ClassCatalog, Detection, GroundTruth

logger = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    metric: str
    per_class: list  # value per class in catalog order, None when undefined
    classes: tuple
    split: str = ""
    config_digest: str = ""
    notes: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        vals = [v for v in self.per_class if v is not None]
        return float(np.mean(vals)) if vals else 0.0

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "split": self.split,
            "config_digest": self.config_digest,
            "classes": list(self.classes),
            "per_class": [None if v is None else float(v) for v in self.per_class],
            "mean": self.mean,
            "notes": list(self.notes),
        }

    def to_text(self) -> str:
        head = f"{self.metric} ({self.split})" if self.split else self.metric
        lines = [head]
        for name, v in zip(self.classes, self.per_class):
            lines.append(f"  {name:<20s} {'n/a' if v is None else f'{100 * v:6.1f}'}")
        lines.append(f"  {'mean':<20s} {100 * self.mean:6.1f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["class,value"]
        rows += [f"{n},{'' if v is None else repr(float(v))}" for n, v in zip(self.classes, self.per_class)]
        rows.append(f"mean,{self.mean!r}")
        return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# geometry


def iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` half-open boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


# ---------------------------------------------------------------------------
# detection


def voc_ap_11point(tp: Sequence[bool], n_gt: int) -> float:
    """11-point interpolated AP of a ranked list of TP/FP flags."""
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=np.float64)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    ap = 0.0
    for t in np.linspace(0, 1, 11):
        mask = recall >= t - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 11


def _ranked(dets: Sequence[Detection]) -> list:
    # score desc, then box coordinates, then image id
    return sorted(dets, key=lambda d: (-d.score, d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.image_id))


def match_detections(dets: Sequence[Detection], gt: Mapping[str, GroundTruth], cls: int,
                     iou_threshold: float = 0.5) -> list:
    """TP flags for ranked detections of one class; duplicates count as FP."""
    used = {}
    flags = []
    for d in _ranked(dets):
        g = gt.get(d.image_id)
        boxes = g.boxes_of(cls) if g is not None else np.zeros((0, 4))
        if len(boxes) == 0:
            flags.append(False)
            continue
        ov = iou_matrix(d.box.as_array(), boxes)[0]
        taken = used.setdefault(d.image_id, np.zeros(len(boxes), dtype=bool))
        best = int(np.argmax(ov))
        if ov[best] >= iou_threshold and not taken[best]:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def detection_map(detections: Sequence[Detection], gt: Mapping[str, GroundTruth], catalog: ClassCatalog,
                  iou_threshold: float = 0.5, split: str = "") -> MetricsReport:
    C = len(catalog)
    bad = {d.cls for d in detections if not 0 <= d.cls < C}
    if bad:
        raise ValueError(f"detections use classes outside the catalog: {sorted(bad)}")
    by_class = {j: [] for j in range(C)}
    for d in detections:
        if d.image_id in gt:
            by_class[d.cls].append(d)
    per_class, notes = [], []
    for j in range(C):
        n_gt = sum(len(g.boxes_of(j)) for g in gt.values())
        if n_gt == 0:
            per_class.append(None)
            notes.append(f"class {catalog.names[j]} has no ground truth; excluded from the mean")
            continue
        per_class.append(voc_ap_11point(match_detections(by_class[j], gt, j, iou_threshold), n_gt))
    return MetricsReport("detection mAP (11-point, IoU %.2f)" % iou_threshold, per_class, catalog.names, split,
                         notes=notes)


def top_detections(detections: Sequence[Detection]) -> dict:
    """Highest-scoring detection per (image, class)."""
    best = {}
    for d in _ranked(detections):
        best.setdefault((d.image_id, d.cls), d)
    return best


def corloc(detections: Sequence[Detection], gt: Mapping[str, GroundTruth], catalog: ClassCatalog,
           iou_threshold: float = 0.5, split: str = "") -> MetricsReport:
    """Fraction of images containing class j whose top detection for j localizes an instance of j.

    ``detections`` may hold everything a detector emitted; only the top one per
    (image, class) is used.
    """
    top = top_detections(detections)
    per_class = []
    for j in range(len(catalog)):
        hits = total = 0
        for image_id, g in gt.items():
            boxes = g.boxes_of(j)
            if len(boxes) == 0:
                continue
            total += 1
            d = top.get((image_id, j))
            if d is not None and iou_matrix(d.box.as_array(), boxes).max() >= iou_threshold:
                hits += 1
        per_class.append(hits / total if total else None)
    return MetricsReport("CorLoc", per_class, catalog.names, split)


# ---------------------------------------------------------------------------
# image-level


def classification_map(scores: Mapping[str, np.ndarray], labels: Mapping[str, np.ndarray],
                       catalog: ClassCatalog, split: str = "") -> MetricsReport:
    """Non-interpolated AP per class, ranking images by score (ties by image id)."""
    ids = sorted(labels)
    S = np.array([scores[i] for i in ids], dtype=np.float64)
    Y = np.array([labels[i] for i in ids], dtype=np.int64)
    per_class, notes = [], []
    for j in range(len(catalog)):
        pos = Y[:, j].sum()
        if pos == 0:
            logger.warning("class %s has no positive images; AP undefined", catalog.names[j])
            notes.append(f"class {catalog.names[j]} has no positive images; excluded from the mean")
            per_class.append(None)
            continue
        order = np.argsort(-S[:, j], kind="stable")
        hits = Y[order, j]
        ranks = np.flatnonzero(hits) + 1
        per_class.append(float(np.mean(np.arange(1, len(ranks) + 1) / ranks)))
    return MetricsReport("classification mAP", per_class, catalog.names, split, notes=notes)


def top1_macc(predictions: Mapping[str, int], labels: Mapping[str, np.ndarray], catalog: ClassCatalog,
              split: str = "") -> MetricsReport:
    """Per-class accuracy of top-1 predictions over the images containing that class.

    An image counts toward every class in its label set and is correct when
    the predicted class belongs to that set.
    """
    C = len(catalog)
    correct = np.zeros(C)
    counted = np.zeros(C)
    for image_id, y in labels.items():
        present = np.flatnonzero(y)
        if len(present) == 0:
            continue
        ok = y[predictions[image_id]] == 1
        counted[present] += 1
        correct[present] += ok
    per_class = [correct[j] / counted[j] if counted[j] else None for j in range(C)]
    return MetricsReport("top-1 mAcc", per_class, catalog.names, split)


def proposal_recall(proposals: Mapping[str, np.ndarray], gt: Mapping[str, GroundTruth],
                    iou_threshold: float = 0.5) -> float:
    """Fraction of GT instances covered by some proposal at IoU >= threshold."""
    hit = total = 0
    for image_id, g in gt.items():
        if not g.instances:
            continue
        gboxes = np.array([b.as_array() for b, _ in g.instances])
        total += len(gboxes)
        props = proposals.get(image_id)
        if props is None or len(props) == 0:
            continue
        hit += int((iou_matrix(gboxes, props).max(axis=1) >= iou_threshold).sum())
    return hit / total if total else 0.0


def labels_from_gt(gt: Mapping[str, GroundTruth], num_classes: int, ids: Optional[Sequence[str]] = None) -> dict:
    ids = gt.keys() if ids is None else ids
    return {i: gt[i].label_vector(num_classes) for i in ids}


def write_report(path, reports, extra: Optional[dict] = None):
    doc = {"reports": [r.to_json() for r in reports]}
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")

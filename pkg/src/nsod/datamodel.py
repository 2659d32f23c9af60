"""Shared domain types and on-disk formats.

Boxes use the half-open pixel convention ``[x1, x2) x [y1, y2)`` so the area
of a box is simply ``(x2 - x1) * (y2 - y1)``.

File formats
------------
manifest      JSON ``{classes: [...], images: [{id, path, width, height, split,
              support_label?, is_distractor?}]}``
ground truth  JSON lines ``{id, instances: [{box: [x1, y1, x2, y2], class: j}]}``
proposals     JSON lines ``{id, boxes: [[x1, y1, x2, y2], ...]}``
features      binary: ``b"NSODFEAT"``, uint32 LE rows, uint32 LE dim, then
              rows*dim float32 LE values, row-major
pseudo-labels JSON lines, one :class:`PseudoLabelRecord` per line
detections    JSON lines ``{id, box, class, score}``
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

SPLITS = ("support", "unlabeled", "test")
FEATURE_MAGIC = b"NSODFEAT"

_MANIFEST_IMAGE_KEYS = {"id", "path", "width", "height", "split", "support_label", "is_distractor"}
_GT_KEYS = {"instances", "boxes", "gt", "ground_truth", "bbox", "bboxes", "annotations"}


class NSODError(Exception):
    """Base class for errors raised by this package."""


class FormatError(NSODError, ValueError):
    """A file does not follow its documented format."""


class ManifestError(FormatError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box {coords}")
        if self.x1 < 0 or self.y1 < 0:
            raise ValueError(f"negative box coordinate {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list:
        return [_num(self.x1), _num(self.y1), _num(self.x2), _num(self.y2)]

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def within(self, width: float, height: float) -> bool:
        return self.x2 <= width and self.y2 <= height

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        if len(seq) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))


def _num(v):
    # keep integral coordinates integral in JSON output
    f = float(v)
    return int(f) if f.is_integer() else f


def validate_boxes(boxes: np.ndarray, width: Optional[float] = None,
                   height: Optional[float] = None) -> np.ndarray:
    """Check an ``(R, 4)`` box array against the Box invariants and return it as float64."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError(f"expected (R, 4) boxes, got shape {boxes.shape}")
    if not np.all(np.isfinite(boxes)):
        raise ValueError("non-finite box coordinates")
    if np.any(boxes[:, :2] < 0):
        raise ValueError("negative box coordinates")
    bad = (boxes[:, 0] >= boxes[:, 2]) | (boxes[:, 1] >= boxes[:, 3])
    if np.any(bad):
        raise ValueError(f"degenerate box at index {int(np.argmax(bad))}: {boxes[np.argmax(bad)].tolist()}")
    if width is not None and np.any(boxes[:, 2] > width):
        raise ValueError("box exceeds image width")
    if height is not None and np.any(boxes[:, 3] > height):
        raise ValueError("box exceeds image height")
    return boxes


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ValueError("a class catalog needs at least 2 classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int
    split: str
    support_label: Optional[int] = None
    is_distractor: bool = False

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"image {self.image_id!r}: unknown split {self.split!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id!r}: non-positive size")
        if self.split == "support" and self.support_label is None:
            raise ValueError(f"support image {self.image_id!r} has no support_label")
        if self.split != "support" and self.support_label is not None:
            raise ValueError(f"{self.split} image {self.image_id!r} must not carry a label")


@dataclass(frozen=True)
class ProposalSet:
    image_id: str
    boxes: np.ndarray  # (R, 4) float64

    def __post_init__(self):
        boxes = validate_boxes(self.boxes)
        if len(boxes) < 1:
            raise ValueError(f"image {self.image_id!r}: empty proposal set")
        boxes.setflags(write=False)
        object.__setattr__(self, "boxes", boxes)

    def __len__(self):
        return len(self.boxes)

    def __iter__(self) -> Iterator[Box]:
        return (Box(*b) for b in self.boxes)


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    instances: tuple = ()  # of (Box, class index)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple((b, int(c)) for b, c in self.instances))

    @property
    def classes(self) -> set:
        return {c for _, c in self.instances}

    def boxes_of(self, cls: int) -> np.ndarray:
        rows = [b.as_array() for b, c in self.instances if c == cls]
        return np.array(rows).reshape(-1, 4)

    def label_vector(self, num_classes: int) -> np.ndarray:
        y = np.zeros(num_classes, dtype=np.int64)
        for c in self.classes:
            y[c] = 1
        return y


@dataclass(frozen=True)
class PseudoLabelRecord:
    image_id: str
    sigma_S: np.ndarray
    q_hat: np.ndarray
    cway: int
    y_hat: np.ndarray
    sigma_A: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("sigma_S", "sigma_A", "q_hat"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.float64)
            if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
                raise ValueError(f"{self.image_id}: {name} entries must lie in [0, 1]")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "y_hat", np.asarray(self.y_hat, dtype=np.int64))
        object.__setattr__(self, "cway", int(self.cway))

    def to_json(self) -> dict:
        return {
            "id": self.image_id,
            "sigma_S": [float(v) for v in self.sigma_S],
            "sigma_A": None if self.sigma_A is None else [float(v) for v in self.sigma_A],
            "q_hat": [float(v) for v in self.q_hat],
            "cway": self.cway,
            "y_hat": [int(v) for v in self.y_hat],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PseudoLabelRecord":
        return cls(
            image_id=obj["id"],
            sigma_S=np.array(obj["sigma_S"], dtype=np.float64),
            sigma_A=None if obj.get("sigma_A") is None else np.array(obj["sigma_A"], dtype=np.float64),
            q_hat=np.array(obj["q_hat"], dtype=np.float64),
            cway=obj["cway"],
            y_hat=np.array(obj["y_hat"], dtype=np.int64),
        )


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    cls: int
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("non-finite detection score")

    def to_json(self) -> dict:
        return {"id": self.image_id, "box": self.box.as_list(), "class": int(self.cls), "score": float(self.score)}

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(obj["id"], Box.from_seq(obj["box"]), int(obj["class"]), float(obj["score"]))


# ---------------------------------------------------------------------------
# manifests


def read_manifest(path) -> tuple:
    """Load a manifest and return ``(ClassCatalog, [ImageRecord, ...])``.

    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict) or "classes" not in doc or "images" not in doc:
        raise ManifestError(f"{path}: manifest needs 'classes' and 'images' fields")
    try:
        catalog = ClassCatalog(tuple(doc["classes"]))
    except ValueError as e:
        raise ManifestError(f"{path}: {e}") from e
    images = doc["images"]
    if not images:
        raise ManifestError("manifest contains no records")

    root = path.parent
    records, seen = [], set()
    for n, entry in enumerate(images):
        where = f"{path}: images[{n}]"
        inline = _GT_KEYS & set(entry)
        if inline:
            raise ManifestError(f"{where}: ground truth must not appear inline (found {sorted(inline)})")
        unknown = set(entry) - _MANIFEST_IMAGE_KEYS
        if unknown:
            raise ManifestError(f"{where}: unknown fields {sorted(unknown)}")
        missing = {"id", "path", "width", "height", "split"} - set(entry)
        if missing:
            raise ManifestError(f"{where}: missing fields {sorted(missing)}")
        image_id = entry["id"]
        if image_id in seen:
            raise ManifestError(f"{where}: duplicate image id {image_id!r}")
        seen.add(image_id)
        label = entry.get("support_label")
        if label is not None and not (0 <= label < len(catalog)):
            raise ManifestError(f"{where}: image {image_id!r} support_label {label} outside [0, {len(catalog)})")
        try:
            rec = ImageRecord(
                image_id=image_id,
                path=str(root / entry["path"]),
                width=int(entry["width"]),
                height=int(entry["height"]),
                split=entry["split"],
                support_label=label,
                is_distractor=bool(entry.get("is_distractor", False)),
            )
        except ValueError as e:
            raise ManifestError(f"{where}: {e}") from e
        records.append(rec)
    return catalog, records


def write_manifest(path, catalog: ClassCatalog, records: Iterable[ImageRecord]):
    path = Path(path)
    images = []
    for r in records:
        entry = {
            "id": r.image_id,
            "path": os.path.relpath(r.path, path.parent),
            "width": r.width,
            "height": r.height,
            "split": r.split,
        }
        if r.support_label is not None:
            entry["support_label"] = r.support_label
        if r.is_distractor:
            entry["is_distractor"] = True
        images.append(entry)
    _write_text(path, json.dumps({"classes": list(catalog.names), "images": images}, indent=1) + "\n")


# ---------------------------------------------------------------------------
# JSON-lines files


def _write_text(path, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(text)


def _read_jsonl(path) -> Iterator[tuple]:
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: {e.msg}") from e


def _write_jsonl(path, objs: Iterable[dict]):
    _write_text(path, "".join(json.dumps(o, separators=(",", ":")) + "\n" for o in objs))


def read_ground_truth(path) -> dict:
    """Return ``{image_id: GroundTruth}``. Evaluation code only."""
    out = {}
    for lineno, obj in _read_jsonl(path):
        try:
            inst = [(Box.from_seq(i["box"]), int(i["class"])) for i in obj["instances"]]
            out[obj["id"]] = GroundTruth(obj["id"], tuple(inst))
        except (KeyError, ValueError, TypeError) as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
    return out


def write_ground_truth(path, gts: Iterable[GroundTruth]):
    _write_jsonl(path, (
        {"id": g.image_id, "instances": [{"box": b.as_list(), "class": c} for b, c in g.instances]}
        for g in gts
    ))


def read_proposals(path) -> dict:
    """Return ``{image_id: ProposalSet}``; also loads externally produced proposal files."""
    out = {}
    for lineno, obj in _read_jsonl(path):
        try:
            out[obj["id"]] = ProposalSet(obj["id"], np.array(obj["boxes"], dtype=np.float64).reshape(-1, 4))
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
    return out


def write_proposals(path, proposals: Iterable[ProposalSet]):
    _write_jsonl(path, (
        {"id": p.image_id, "boxes": [[_num(v) for v in b] for b in p.boxes]} for p in proposals
    ))


def read_pseudo_labels(path) -> list:
    return [PseudoLabelRecord.from_json(obj) for _, obj in _read_jsonl(path)]


def write_pseudo_labels(path, records: Iterable[PseudoLabelRecord]):
    _write_jsonl(path, (r.to_json() for r in records))


def read_detections(path) -> list:
    return [Detection.from_json(obj) for _, obj in _read_jsonl(path)]


def write_detections(path, detections: Iterable[Detection]):
    _write_jsonl(path, (d.to_json() for d in detections))


# ---------------------------------------------------------------------------
# binary feature matrices


def write_features(path, matrix) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"feature matrix must be R x D with R, D >= 1, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("feature matrix has non-finite entries")
    m32 = np.ascontiguousarray(m, dtype="<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", *m32.shape))
        f.write(m32.tobytes())


def read_features(path, dim: Optional[int] = None) -> np.ndarray:
    """Read a feature file as a float32 ``(rows, dim)`` array."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    rows, d = struct.unpack("<II", data[8:16])
    if dim is not None and d != dim:
        raise FormatError(f"{path}: dimension mismatch (file has {d}, expected {dim})")
    need = 16 + 4 * rows * d
    if len(data) != need:
        raise FormatError(f"{path}: truncated feature file ({len(data)} bytes, expected {need})")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, d).astype(np.float32)


# ---------------------------------------------------------------------------
# images


def load_image(path) -> np.ndarray:
    """Load an RGB PNG as a ``(H, W, 3)`` uint8 array."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path, pixels: np.ndarray):
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PNG")

"""Deterministic synthetic shapes corpus and a GT-independent proposal scheme.

Known classes are (color, shape) pairs drawn on noisy gray backgrounds, one to
a few per image. Support images show one large, centered instance on a clean
flat background, mimicking clean web-search results. Distractor images only
contain shapes from a disjoint (color, shape) palette.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datamodel import (
    Box,
    ClassCatalog,
    GroundTruth,
    ImageRecord,
    NSODError,
    ProposalSet,
    save_image,
    write_ground_truth,
    write_manifest,
)

KNOWN_CLASSES = (
    ("red", "circle"),
    ("green", "square"),
    ("blue", "triangle"),
    ("yellow", "diamond"),
    ("magenta", "cross"),
    ("cyan", "ring"),
    ("orange", "square"),
    ("white", "triangle"),
)

# mid-tone colors: every channel sits in a middle histogram bin, so none of
# them shares a color bin with the saturated known colors
UNKNOWN_COLORS = ("steel", "tan", "sage", "mauve", "khaki", "periwinkle")
UNKNOWN_CLASSES = tuple((c, s) for c in UNKNOWN_COLORS for s in ("star", "ring", "hbar"))

COLORS = {
    "red": (220, 30, 30),
    "green": (30, 200, 40),
    "blue": (30, 40, 220),
    "yellow": (230, 220, 30),
    "magenta": (210, 40, 210),
    "cyan": (30, 210, 220),
    "orange": (245, 140, 20),
    "white": (240, 240, 240),
    "steel": (80, 150, 170),
    "tan": (170, 120, 85),
    "sage": (110, 165, 95),
    "mauve": (155, 95, 150),
    "khaki": (170, 160, 95),
    "periwinkle": (100, 115, 175),
}

_SPLIT_CODES = {"support": 1, "unlabeled": 2, "test": 3, "distractor": 4}

# (width, height) ranges in pixels for clutter-scene instances
INSTANCE_SIZE = (20, 44)
MAX_OVERLAP = 0.3


class GenerationError(NSODError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    C: int = 5
    canvas: tuple = (128, 128)
    instances_per_image: tuple = (1, 3)
    n_unlabeled: int = 600
    n_test: int = 200
    k_support: int = 5
    distractor_count: int = 0
    noise_level: float = 0.15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))
        object.__setattr__(self, "instances_per_image", tuple(int(v) for v in self.instances_per_image))
        if not 2 <= self.C <= len(KNOWN_CLASSES):
            raise ValueError(f"C must be in [2, {len(KNOWN_CLASSES)}]")
        if len(self.canvas) != 2 or min(self.canvas) < 64:
            raise ValueError("canvas must be at least 64x64")
        lo, hi = self.instances_per_image
        if not 1 <= lo <= hi <= 5:
            raise ValueError("instances_per_image must be a range inside [1, 5]")
        if self.k_support < 1:
            raise ValueError("k_support must be >= 1")
        if min(self.n_unlabeled, self.n_test, self.distractor_count) < 0:
            raise ValueError("counts must be non-negative")
        if not 0 <= self.noise_level <= 1:
            raise ValueError("noise_level must be in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown corpus spec keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        d["instances_per_image"] = list(self.instances_per_image)
        return d

    def catalog(self) -> ClassCatalog:
        return ClassCatalog(tuple(f"{c}-{s}" for c, s in KNOWN_CLASSES[: self.C]))


@dataclass(frozen=True)
class ProposalScheme:
    scales: tuple = (20, 28, 38, 52, 72)
    stride: int = 14
    random_extra: int = 40
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if not self.scales or min(self.scales) < 1:
            raise ValueError("scales must be a non-empty list of positive sizes")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.random_extra < 0:
            raise ValueError("random_extra must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ProposalScheme":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown proposal scheme keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


# ---------------------------------------------------------------------------
# rasterization


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    """Boolean ``(h, w)`` mask of a shape filling a ``w x h`` box."""
    ys, xs = np.mgrid[0:h, 0:w]
    # normalized pixel-center coordinates in [-1, 1]
    u = (xs + 0.5) / w * 2 - 1
    v = (ys + 0.5) / h * 2 - 1
    if shape == "circle":
        m = u**2 + v**2 <= 1
    elif shape == "square":
        m = np.ones((h, w), dtype=bool)
    elif shape == "triangle":
        # apex at top center, base along the bottom edge
        m = np.abs(u) <= (v + 1) / 2
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1
    elif shape == "cross":
        m = (np.abs(u) <= 0.3) | (np.abs(v) <= 0.3)
    elif shape == "ring":
        r2 = u**2 + v**2
        m = (r2 <= 1) & (r2 >= 0.45**2)
    elif shape == "star":
        ang = np.arctan2(v, u)
        rad = np.sqrt(u**2 + v**2)
        m = rad <= 0.55 + 0.45 * np.cos(5 * ang) ** 2
    elif shape == "hbar":
        m = np.abs(v) <= 0.35
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _paint(canvas: np.ndarray, color, shape: str, x: int, y: int, w: int, h: int, rng) -> Box:
    mask = shape_mask(shape, w, h)
    jitter = rng.integers(-15, 16, size=3)
    rgb = np.clip(np.array(color) + jitter, 0, 255).astype(np.uint8)
    region = canvas[y:y + h, x:x + w]
    region[mask] = rgb
    ys, xs = np.nonzero(mask)
    return Box(x + int(xs.min()), y + int(ys.min()), x + int(xs.max()) + 1, y + int(ys.max()) + 1)


def _background(rng, width: int, height: int, noise_level: float) -> np.ndarray:
    base = rng.integers(90, 166)
    tint = rng.integers(-8, 9, size=3)
    amp = noise_level * 127.5
    noise = rng.uniform(-amp, amp, size=(height, width, 3))
    img = base + tint + noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _overlap_ok(box, placed) -> bool:
    for other in placed:
        ix = max(0, min(box[2], other[2]) - max(box[0], other[0]))
        iy = max(0, min(box[3], other[3]) - max(box[1], other[1]))
        smaller = min((box[2] - box[0]) * (box[3] - box[1]), (other[2] - other[0]) * (other[3] - other[1]))
        if ix * iy > MAX_OVERLAP * smaller:
            return False
    return True


def render_scene(rng, spec: CorpusSpec, palette, n_instances: int, image_id: str):
    """Draw ``n_instances`` shapes from ``palette`` on a noisy canvas.

    Returns ``(pixels, [(Box, palette index), ...])``.
    """
    width, height = spec.canvas
    img = _background(rng, width, height, spec.noise_level)
    placed, out = [], []
    lo, hi = INSTANCE_SIZE
    for n in range(n_instances):
        cls = int(rng.integers(len(palette)))
        color, shape = palette[cls]
        for _attempt in range(200):
            w = int(rng.integers(lo, hi + 1))
            aspect = rng.uniform(0.8, 1.25)
            h = int(np.clip(round(w * aspect), lo, hi))
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            cand = (x, y, x + w, y + h)
            if _overlap_ok(cand, placed):
                break
        else:
            raise GenerationError(
                f"{image_id}: could not place instance {n + 1}/{n_instances} "
                f"({color}-{shape}, last draw {w}x{h} at ({x}, {y})) on a {width}x{height} canvas"
            )
        placed.append(cand)
        out.append((_paint(img, COLORS[color], shape, x, y, w, h, rng), cls))
    return img, out


def render_support(rng, spec: CorpusSpec, cls: int):
    """One large centered instance of ``cls`` on a flat background."""
    width, height = spec.canvas
    img = np.full((height, width, 3), 128, dtype=np.uint8)
    color, shape = KNOWN_CLASSES[cls]
    frac = rng.uniform(0.6, 0.8)
    w = int(round(width * frac))
    h = int(round(height * frac * rng.uniform(0.9, 1.1)))
    h = min(h, height - 2)
    x = (width - w) // 2
    y = (height - h) // 2
    box = _paint(img, COLORS[color], shape, x, y, w, h, rng)
    return img, box


def _rng(seed: int, split: str, index: int):
    return np.random.default_rng([seed, _SPLIT_CODES[split], index])


# ---------------------------------------------------------------------------
# public generators


def generate_support(spec: CorpusSpec, out_dir) -> tuple:
    """Write ``k_support`` images per class under ``out_dir/images``.

    Returns ``(records, ground_truths)``; ground truth is one instance per image.
    """
    out_dir = Path(out_dir)
    records, gts = [], []
    for cls in range(spec.C):
        for n in range(spec.k_support):
            image_id = f"support_{cls:02d}_{n:03d}"
            img, box = render_support(_rng(spec.seed, "support", cls * 100000 + n), spec, cls)
            path = out_dir / "images" / f"{image_id}.png"
            save_image(path, img)
            records.append(ImageRecord(image_id, str(path), spec.canvas[0], spec.canvas[1], "support", support_label=cls))
            gts.append(GroundTruth(image_id, ((box, cls),)))
    return records, gts


def generate_dataset(spec: CorpusSpec, out_dir) -> tuple:
    """Generate the full corpus into ``out_dir``.

    Writes ``images/*.png``, ``manifest.json`` (no ground truth) and
    ``ground_truth.jsonl``. Returns ``(catalog, records, ground_truths)``.
    Identical specs give byte-identical outputs.
    """
    out_dir = Path(out_dir)
    catalog = spec.catalog()
    width, height = spec.canvas
    known = KNOWN_CLASSES[: spec.C]
    records, gts = generate_support(spec, out_dir)

    def scene(split, index, image_id, palette, distractor):
        rng = _rng(spec.seed, "distractor" if distractor else split, index)
        lo, hi = spec.instances_per_image
        n = int(rng.integers(lo, hi + 1))
        img, inst = render_scene(rng, spec, palette, n, image_id)
        path = out_dir / "images" / f"{image_id}.png"
        save_image(path, img)
        records.append(ImageRecord(image_id, str(path), width, height, split, is_distractor=distractor))
        gts.append(GroundTruth(image_id, () if distractor else tuple(inst)))

    for i in range(spec.n_unlabeled):
        scene("unlabeled", i, f"unl_{i:05d}", known, False)
    for i in range(spec.distractor_count):
        scene("unlabeled", i, f"dis_{i:05d}", UNKNOWN_CLASSES, True)
    for i in range(spec.n_test):
        scene("test", i, f"test_{i:05d}", known, False)

    write_manifest(out_dir / "manifest.json", catalog, records)
    write_ground_truth(out_dir / "ground_truth.jsonl", gts)
    (out_dir / "corpus_spec.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    return catalog, records, gts


def _positions(extent: int, size: int, stride: int) -> list:
    if size > extent:
        return []
    pos = list(range(0, extent - size + 1, stride))
    if pos[-1] != extent - size:
        pos.append(extent - size)
    return pos


def generate_proposals(image_id: str, width: int, height: int, scheme: ProposalScheme) -> ProposalSet:
    """Multi-scale square grid plus ``random_extra`` jittered boxes.

    A pure function of the image size and the scheme: ground truth is never
    consulted, and every image of the same size gets the same boxes.
    """
    too_big = [s for s in scheme.scales if s >= min(width, height)]
    if too_big:
        raise ValueError(f"proposal scales {too_big} do not fit inside a {width}x{height} image")
    boxes = []
    for s in scheme.scales:
        for y in _positions(height, s, scheme.stride):
            for x in _positions(width, s, scheme.stride):
                boxes.append((x, y, x + s, y + s))
    rng = np.random.default_rng([scheme.seed, width, height])
    lo, hi = min(scheme.scales), min(max(scheme.scales), width, height)
    for _ in range(scheme.random_extra):
        w = int(rng.integers(lo, hi + 1))
        h = int(np.clip(round(w * rng.uniform(0.7, 1.4)), 1, height))
        w = min(w, width)
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        boxes.append((x, y, x + w, y + h))
    assert boxes, "proposal scheme produced no boxes"
    return ProposalSet(image_id, np.array(boxes, dtype=np.float64))

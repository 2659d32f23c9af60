"""Hand-crafted region/image descriptor, cosine similarity and the support bank.

The descriptor resizes a patch to ``patch x patch`` pixels (bilinear, pixel
centers aligned), splits it into a ``grid x grid`` layout and concatenates,
per cell, chroma-weighted marginal R/G/B histograms and a magnitude-weighted
histogram of unsigned gradient orientations (taken from the strongest color
channel, as in color HOG). Cell entries are densities (mass per pixel), so
the vector length grows with how much of the patch the object fills.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .datamodel import ClassCatalog, ImageRecord, load_image, validate_boxes

FLAT_FILL = 1e-3


@dataclass(frozen=True)
class Featurizer:
    color_bins: int = 4
    orientation_bins: int = 8
    grid: int = 3
    patch: int = 32

    def __post_init__(self):
        if min(self.color_bins, self.orientation_bins, self.grid) < 1:
            raise ValueError("featurizer bins and grid must be positive")
        if self.patch < self.grid:
            raise ValueError("patch size must be at least the grid size")

    @property
    def dim(self) -> int:
        return self.grid * self.grid * (3 * self.color_bins + self.orientation_bins)

    @classmethod
    def from_dict(cls, d: dict) -> "Featurizer":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown featurizer keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    # -- descriptors -------------------------------------------------------

    def describe(self, patches: np.ndarray) -> np.ndarray:
        """Descriptors of ``(N, P, P, 3)`` patches already at the canonical size."""
        patches = np.asarray(patches, dtype=np.float64)
        n, p = patches.shape[0], self.patch
        assert patches.shape[1:] == (p, p, 3), patches.shape
        g = self.grid

        # cell index of every pixel, flattened row-major over the grid;
        # cells differ by at most one pixel per side when g does not divide P
        cy = np.arange(p) * g // p
        cell_id = (cy[:, None] * g + cy[None, :]).ravel()  # (P*P,)
        per_cell = np.bincount(cell_id, minlength=g * g).astype(np.float64)[None, :, None]

        cb = self.color_bins
        flat_px = patches.reshape(n, p * p, 3)
        # chroma weighting: achromatic pixels (gray background) add almost no color mass
        chroma = (flat_px.max(axis=2) - flat_px.min(axis=2)) / 255.0
        bins = np.minimum((flat_px * (cb / 256.0)).astype(np.int64), cb - 1)

        color = np.zeros((n, g * g, 3, cb))
        img_idx = np.repeat(np.arange(n), p * p)
        cells = np.tile(cell_id, n)
        base = img_idx * (g * g) + cells
        w = chroma.ravel()
        for ch in range(3):
            counts = np.bincount(base * cb + bins[:, :, ch].ravel(), weights=w, minlength=n * g * g * cb)
            color[:, :, ch, :] = counts.reshape(n, g * g, cb) / per_cell

        # per-pixel gradient of the color channel with the largest magnitude
        gx = np.zeros_like(patches)
        gy = np.zeros_like(patches)
        gx[:, :, 1:-1] = (patches[:, :, 2:] - patches[:, :, :-2]) / 2
        gy[:, 1:-1, :] = (patches[:, 2:, :] - patches[:, :-2, :]) / 2
        m2 = gx * gx + gy * gy
        strongest = m2.argmax(axis=3)[..., None]
        gx = np.take_along_axis(gx, strongest, axis=3)[..., 0]
        gy = np.take_along_axis(gy, strongest, axis=3)[..., 0]
        mag = np.hypot(gx, gy) / 255.0
        ob = self.orientation_bins
        theta = np.mod(np.arctan2(gy, gx), np.pi)
        obin = np.minimum((theta * (ob / np.pi)).astype(np.int64), ob - 1).reshape(n, p * p)
        orient = np.bincount(base * ob + obin.ravel(), weights=mag.reshape(-1), minlength=n * g * g * ob)
        orient = orient.reshape(n, g * g, ob) / per_cell

        feats = np.concatenate([color.reshape(n, g * g, 3 * cb), orient], axis=2).reshape(n, -1)
        # densities are kept unnormalized: a loose box dilutes the object's
        # color and edge mass, which is what lets a linear head localize.
        # A perfectly flat gray patch has no chroma and no gradient; give it a
        # small constant descriptor so it stays L2-normalizable
        flat = ~feats.any(axis=1)
        feats[flat] = FLAT_FILL
        return feats

    def extract_global(self, image: np.ndarray) -> np.ndarray:
        h, w = image.shape[:2]
        if h == 0 or w == 0:
            raise ValueError("empty image")
        return self.extract_regions(image, np.array([[0, 0, w, h]], dtype=np.float64))[0]

    def extract_region(self, image: np.ndarray, box) -> np.ndarray:
        b = np.asarray(box.as_array() if hasattr(box, "as_array") else box, dtype=np.float64)
        return self.extract_regions(image, b.reshape(1, 4))[0]

    def extract_regions(self, image: np.ndarray, boxes: np.ndarray) -> np.ndarray:
        """Descriptors for every box of an ``(R, 4)`` array, shape ``(R, D)``."""
        h, w = image.shape[:2]
        boxes = validate_boxes(boxes, w, h)
        if _kernel is not None:
            img = np.ascontiguousarray(image, dtype=np.float64)
            return _kernel(img, boxes, self.patch, self.grid, self.color_bins, self.orientation_bins, FLAT_FILL)
        return self.extract_regions_reference(image, boxes)

    def extract_regions_reference(self, image: np.ndarray, boxes: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Pure numpy path; the compiled kernel is checked against it."""
        h, w = image.shape[:2]
        boxes = validate_boxes(boxes, w, h)
        out = np.empty((len(boxes), self.dim))
        for start in range(0, len(boxes), chunk):
            sl = slice(start, start + chunk)
            out[sl] = self.describe(crop_resize(image, boxes[sl], self.patch))
        return out


def _axis_samples(lo: np.ndarray, hi: np.ndarray, size: int):
    """Bilinear source indices/weights along one axis for a batch of intervals."""
    extent = hi - lo
    t = (np.arange(size) + 0.5)[None, :] * (extent[:, None] / size) - 0.5 + lo[:, None]
    t = np.clip(t, lo[:, None], (hi - 1)[:, None])
    i0 = np.floor(t).astype(np.int64)
    i1 = np.minimum(i0 + 1, np.ceil(hi - 1).astype(np.int64)[:, None])
    frac = t - i0
    return i0, i1, frac


def crop_resize(image: np.ndarray, boxes: np.ndarray, size: int) -> np.ndarray:
    """Bilinear crop-and-resize of each box to ``size x size``; returns ``(R, size, size, 3)``.

    Sampling uses pixel centers, so a box that is already ``size x size`` is
    copied unchanged.
    """
    img = np.asarray(image, dtype=np.float64)
    x0, x1, fx = _axis_samples(boxes[:, 0], boxes[:, 2], size)
    y0, y1, fy = _axis_samples(boxes[:, 1], boxes[:, 3], size)
    # (R, S, 1) rows x (R, 1, S) columns
    Ia = img[y0[:, :, None], x0[:, None, :]]
    Ib = img[y0[:, :, None], x1[:, None, :]]
    Ic = img[y1[:, :, None], x0[:, None, :]]
    Id = img[y1[:, :, None], x1[:, None, :]]
    wx = fx[:, None, :, None]
    wy = fy[:, :, None, None]
    top = Ia * (1 - wx) + Ib * wx
    bot = Ic * (1 - wx) + Id * wx
    return top * (1 - wy) + bot * wy


try:
    from ._kernels import describe_boxes as _kernel
except ImportError:  # numba unavailable
    _kernel = None


def fit_scaling(rows: np.ndarray, eps: float = 1e-3):
    """Per-dimension mean and spread used to condition linear-head training.

    ``eps`` is relative to the average spread, so the result does not depend
    on the overall feature scale.
    """
    rows = np.asarray(rows, dtype=np.float64)
    return rows.mean(axis=0), _spread(rows.std(axis=0), eps)


def _spread(std: np.ndarray, eps: float) -> np.ndarray:
    return std + eps * std.mean() + 1e-12


def fold_scaling(W: np.ndarray, b: np.ndarray, mu: np.ndarray, sd: np.ndarray):
    """Weights acting on raw features equivalent to ``(W, b)`` on ``(x - mu) / sd``."""
    W_raw = W / sd
    return W_raw, b - W_raw @ mu


def unfold_scaling(W: np.ndarray, b: np.ndarray, mu: np.ndarray, sd: np.ndarray):
    """Inverse of :func:`fold_scaling`."""
    return W * sd, b + W @ mu


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("undefined cosine for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class SupportBank:
    """Global support features, ``features[j]`` is the ``k x D`` block of class j."""

    catalog: ClassCatalog
    features: np.ndarray  # (C, k, D)
    image_ids: tuple = ()

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 3 or f.shape[0] != len(self.catalog):
            raise ValueError(f"support features must be (C, k, D), got {f.shape}")
        f.setflags(write=False)
        object.__setattr__(self, "features", f)

    @property
    def k(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def rows(self) -> np.ndarray:
        """Class-major ``(C*k, D)`` matrix."""
        return self.features.reshape(-1, self.dim)

    @classmethod
    def from_rows(cls, catalog: ClassCatalog, rows: np.ndarray, image_ids: Sequence[str] = ()) -> "SupportBank":
        rows = np.asarray(rows, dtype=np.float64)
        c = len(catalog)
        if rows.shape[0] % c:
            raise ValueError(f"{rows.shape[0]} support rows do not split evenly over {c} classes")
        return cls(catalog, rows.reshape(c, rows.shape[0] // c, rows.shape[1]), tuple(image_ids))


def _l2n(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def build_support_bank(featurizer: Featurizer, records: Sequence[ImageRecord], catalog: ClassCatalog,
                       loader=load_image) -> SupportBank:
    by_class = {j: [] for j in range(len(catalog))}
    for r in records:
        if r.split != "support" or r.support_label is None:
            raise ValueError(f"{r.image_id}: not a labeled support image")
        by_class[r.support_label].append(r)
    empty = [catalog.names[j] for j, rs in by_class.items() if not rs]
    if empty:
        raise ValueError(f"classes with no support images: {empty}")
    sizes = {catalog.names[j]: len(rs) for j, rs in by_class.items()}
    if len(set(sizes.values())) != 1:
        raise ValueError(f"unequal support counts per class: {sizes}")

    blocks, ids = [], []
    for j in range(len(catalog)):
        rs = sorted(by_class[j], key=lambda r: r.image_id)
        blocks.append(np.stack([featurizer.extract_global(loader(r.path)) for r in rs]))
        ids.extend(r.image_id for r in rs)
    return SupportBank(catalog, _l2n(np.stack(blocks)), tuple(ids))

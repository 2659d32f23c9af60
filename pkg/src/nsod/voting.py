"""Region-to-image voting: similarity matrix, dual softmax, fusion and pseudo-labels."""

from __future__ import annotations

import numpy as np

from .features import SupportBank


def similarity_matrix(region_features: np.ndarray, bank: SupportBank) -> np.ndarray:
    """``s_ij`` = mean cosine between region i and the k support images of class j."""
    r = np.asarray(region_features, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != bank.dim:
        raise ValueError(f"region features {r.shape} do not match bank dimension {bank.dim}")
    norms = np.linalg.norm(r, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero region feature: cosine undefined")
    support = bank.features / np.linalg.norm(bank.features, axis=2, keepdims=True)
    # (R, D) x (C, k, D) -> (R, C, k)
    cos = np.einsum("rd,ckd->rck", r / norms, support)
    return np.clip(cos, -1.0, 1.0).mean(axis=2)


def _softmax(m: np.ndarray, axis: int) -> np.ndarray:
    z = m - m.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def dual_softmax(M: np.ndarray):
    """Row softmax (competition over classes) and column softmax (over regions)."""
    M = np.asarray(M, dtype=np.float64)
    return _softmax(M, axis=1), _softmax(M, axis=0)


def image_scores(M: np.ndarray) -> np.ndarray:
    """Sum over regions of the elementwise product of the two softmaxes."""
    cls, det = dual_softmax(M)
    return (cls * det).sum(axis=0)


def fuse_scores(sS, sA, weight: float = 0.5) -> np.ndarray:
    sS = np.asarray(sS, dtype=np.float64)
    sA = np.asarray(sA, dtype=np.float64)
    if sS.shape != sA.shape:
        raise ValueError(f"score length mismatch: {sS.shape} vs {sA.shape}")
    if weight == 0.5:
        # exact midpoint keeps the result inside [min, max] entrywise
        return (sS + sA) / 2
    return (1 - weight) * sS + weight * sA


def to_cway_label(scores) -> int:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return int(np.argmax(np.asarray(scores)))


def to_multiclass_label(q_hat, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(q_hat) > threshold).astype(np.int64)

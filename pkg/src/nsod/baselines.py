"""Comparison strategies that stand in for the label-propagation stages.

* NS-FT: a teacher trained on the support images only, predicting C-way labels on X.
* NS-NN: the class of the nearest support image (global features, cosine).
* NS-Base: a student trained on the support images alone.

NS-FT and NS-NN emit one-hot pseudo-labels in the same record format as the
main pipeline, so the student trainer and evaluation are shared.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .datamodel import ImageRecord, PseudoLabelRecord, load_image
from .features import Featurizer, SupportBank, fit_scaling
from .student import StudentParams, TrainingExample, train_student
from .teacher import TeacherParams, train_teacher


def _one_hot(j: int, C: int) -> np.ndarray:
    v = np.zeros(C, dtype=np.int64)
    v[j] = 1
    return v


def ns_ft_from_features(support_features, support_labels, unlabeled_ids: Sequence[str], unlabeled_features,
                        num_classes: int, params: TeacherParams = TeacherParams()) -> list:
    # standardize with statistics of G and X together: fit on the clean support
    # images alone, background noise in X lands far outside them and the
    # classifier collapses onto one class. No labels of X are used.
    scaling = fit_scaling(np.vstack([support_features, unlabeled_features]))
    teacher = train_teacher(support_features, support_labels, num_classes, params, scaling=scaling)
    probs = teacher.predict(unlabeled_features)
    out = []
    for image_id, p in zip(unlabeled_ids, probs):
        j = int(np.argmax(p))
        y = _one_hot(j, num_classes)
        out.append(PseudoLabelRecord(image_id, sigma_S=p, q_hat=y.astype(float), cway=j, y_hat=y))
    return out


def ns_nn_from_features(bank: SupportBank, unlabeled_ids: Sequence[str], unlabeled_features) -> list:
    X = np.asarray(unlabeled_features, dtype=np.float64)
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    support = bank.features / np.linalg.norm(bank.features, axis=2, keepdims=True)
    cos = np.einsum("nd,ckd->nck", X, support)  # (N, C, k)
    C = len(bank.catalog)
    out = []
    for image_id, c in zip(unlabeled_ids, cos):
        # class-major scan: first maximum is the lowest class, then the lowest support row
        j = int(np.argmax(c.reshape(-1))) // c.shape[1]
        best = np.clip(c.max(axis=1), -1, 1)
        y = _one_hot(j, C)
        out.append(PseudoLabelRecord(image_id, sigma_S=(best + 1) / 2, q_hat=y.astype(float), cway=j, y_hat=y))
    return out


def ns_ft(support: Sequence[ImageRecord], unlabeled: Sequence[ImageRecord], featurizer: Featurizer,
          num_classes: int, params: TeacherParams = TeacherParams(), loader=load_image) -> list:
    """C-way teacher trained on G only, used to label every image of X."""
    if not support:
        raise ValueError("NS-FT needs at least one support image")
    sf = np.stack([featurizer.extract_global(loader(r.path)) for r in support])
    uf = np.stack([featurizer.extract_global(loader(r.path)) for r in unlabeled])
    return ns_ft_from_features(sf, [r.support_label for r in support], [r.image_id for r in unlabeled], uf,
                               num_classes, params)


def ns_nn(bank: SupportBank, unlabeled: Sequence[ImageRecord], featurizer: Featurizer, loader=load_image) -> list:
    uf = np.stack([featurizer.extract_global(loader(r.path)) for r in unlabeled])
    return ns_nn_from_features(bank, [r.image_id for r in unlabeled], uf)


def ns_base(support_examples: Sequence[TrainingExample], num_classes: int,
            params: StudentParams = StudentParams()):
    """Student trained on the support set alone (one-hot labels, loss weight 1)."""
    if not support_examples:
        raise ValueError("NS-Base needs at least one support image")
    return train_student(list(support_examples), num_classes, params)

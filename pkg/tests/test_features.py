import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nsod.datamodel import ClassCatalog, ImageRecord, save_image
from nsod.features import (
    FLAT_FILL,
    Featurizer,
    build_support_bank,
    cosine,
    crop_resize,
    fit_scaling,
    fold_scaling,
    unfold_scaling,
)
from nsod.synthgen import CorpusSpec, render_support, shape_mask


def _img(rng, h=64, w=80):
    return rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8)


def test_default_dimension():
    f = Featurizer()
    assert f.dim == 180 == 9 * (3 * 4 + 8)
    assert Featurizer(grid=2, color_bins=2, orientation_bins=4).dim == 4 * 10


def test_global_deterministic_and_finite(rng):
    f = Featurizer()
    img = _img(rng)
    a, b = f.extract_global(img), f.extract_global(img)
    assert a.shape == (f.dim,)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_full_box_equals_global(rng):
    f = Featurizer()
    img = _img(rng, 50, 70)
    np.testing.assert_array_equal(f.extract_region(img, [0, 0, 70, 50]), f.extract_global(img))


def test_flip_keeps_color_block_on_one_cell_grid(rng):
    f = Featurizer(grid=1)
    img = _img(rng, 32, 32)
    a, b = f.extract_global(img), f.extract_global(img[:, ::-1])
    np.testing.assert_allclose(a[: 3 * f.color_bins], b[: 3 * f.color_bins], atol=1e-12)


def test_constant_image_is_valid():
    f = Featurizer()
    v = f.extract_global(np.full((40, 40, 3), 128, np.uint8))
    assert np.all(v == FLAT_FILL)
    assert np.linalg.norm(v) > 0


def test_non_constant_patches_are_nonzero(rng):
    f = Featurizer()
    for _ in range(20):
        img = np.full((32, 32, 3), int(rng.integers(256)), np.uint8)
        img[rng.integers(32), rng.integers(32)] = rng.integers(256, size=3)
        assert np.linalg.norm(f.extract_global(img)) > 0


def test_crop_resize_identity_at_canonical_size(rng):
    img = _img(rng, 40, 40).astype(float)
    out = crop_resize(img, np.array([[4.0, 3.0, 36.0, 35.0]]), 32)
    np.testing.assert_array_equal(out[0], img[3:35, 4:36])


def test_kernel_matches_numpy_reference(rng):
    f = Featurizer()
    img = _img(rng, 96, 112)
    boxes = []
    for _ in range(300):
        x1, y1 = rng.uniform(0, 100), rng.uniform(0, 85)
        boxes.append([x1, y1, rng.uniform(x1 + 1, 112), rng.uniform(y1 + 1, 96)])
    boxes = np.array(boxes)
    boxes[:50] = np.floor(boxes[:50])
    np.testing.assert_allclose(f.extract_regions(img, boxes), f.extract_regions_reference(img, boxes),
                               rtol=1e-9, atol=1e-12)


def test_random_boxes_finite(rng):
    f = Featurizer()
    img = _img(rng, 128, 128)
    x1 = rng.integers(0, 120, 1000)
    y1 = rng.integers(0, 120, 1000)
    boxes = np.stack([x1, y1, x1 + rng.integers(1, 129 - x1), y1 + rng.integers(1, 129 - y1)], 1).astype(float)
    out = f.extract_regions(img, boxes)
    assert out.shape == (1000, f.dim) and np.all(np.isfinite(out))


def test_degenerate_or_outside_box_rejected(rng):
    f = Featurizer()
    img = _img(rng, 32, 32)
    with pytest.raises(ValueError):
        f.extract_region(img, [5, 5, 5, 9])
    with pytest.raises(ValueError):
        f.extract_region(img, [0, 0, 33, 10])


def test_support_images_of_different_classes_are_dissimilar():
    f = Featurizer()
    spec = CorpusSpec()
    red, _ = render_support(np.random.default_rng(0), spec, 0)
    blue, _ = render_support(np.random.default_rng(0), spec, 2)
    assert cosine(f.extract_global(red), f.extract_global(blue)) < 0.9


def test_disjoint_boxes_over_distinct_shapes():
    f = Featurizer()
    img = np.full((64, 128, 3), 120, np.uint8)
    img[8:56, 8:56][shape_mask("circle", 48, 48)] = (220, 30, 30)
    img[8:56, 72:120][shape_mask("triangle", 48, 48)] = (30, 40, 220)
    a = f.extract_region(img, [4, 4, 60, 60])
    b = f.extract_region(img, [68, 4, 124, 60])
    assert cosine(a, b) < 0.99


def test_cosine_fixtures():
    assert cosine([1, 0], [0, 1]) == 0
    assert cosine([1, 1], [1, 0]) == pytest.approx(1 / np.sqrt(2), abs=1e-9)
    with pytest.raises(ValueError, match="undefined cosine"):
        cosine([0, 0], [1, 0])


vec = arrays(np.float64, 7, elements=st.floats(-100, 100)).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(vec, vec, st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_properties(u, v, a, b):
    c = cosine(u, v)
    assert -1 <= c <= 1
    assert c == pytest.approx(cosine(v, u), abs=1e-12)
    assert cosine(a * u, b * v) == pytest.approx(c, abs=1e-9)
    assert cosine(u, u) == pytest.approx(1.0, abs=1e-12)


def _support_records(tmp_path, k, C=5, order=None):
    spec = CorpusSpec(C=C)
    recs = []
    for j in range(C):
        for n in range(k):
            img, _ = render_support(np.random.default_rng([j, n]), spec, j)
            path = tmp_path / f"s{j}_{n}.png"
            save_image(path, img)
            recs.append(ImageRecord(f"s{j}_{n}", str(path), 128, 128, "support", support_label=j))
    return recs


def test_build_support_bank(tmp_path):
    f = Featurizer()
    cat = CorpusSpec().catalog()
    recs = _support_records(tmp_path, 5)
    bank = build_support_bank(f, recs, cat)
    assert bank.rows().shape == (25, f.dim) and bank.k == 5
    np.testing.assert_allclose(np.linalg.norm(bank.rows(), axis=1), 1, atol=1e-6)
    shuffled = build_support_bank(f, recs[::-1], cat)
    np.testing.assert_allclose(shuffled.features.mean(axis=1), bank.features.mean(axis=1), atol=1e-12)


def test_build_support_bank_errors(tmp_path):
    f = Featurizer()
    cat = ClassCatalog(("a", "b", "c"))
    recs = _support_records(tmp_path, 2, C=3)
    with pytest.raises(ValueError, match="no support images"):
        build_support_bank(f, [r for r in recs if r.support_label != 1], cat)
    with pytest.raises(ValueError, match="unequal"):
        build_support_bank(f, recs[1:], cat)


def test_scaling_fold_roundtrip(rng):
    X = rng.random((50, 6)) * np.array([1, 10, 0.01, 5, 2, 1e-4])
    mu, sd = fit_scaling(X)
    W, b = rng.standard_normal((3, 6)), rng.standard_normal(3)
    Wr, br = fold_scaling(W, b, mu, sd)
    np.testing.assert_allclose(X @ Wr.T + br, ((X - mu) / sd) @ W.T + b, atol=1e-9)
    W2, b2 = unfold_scaling(Wr, br, mu, sd)
    np.testing.assert_allclose(W2, W, atol=1e-12)
    np.testing.assert_allclose(b2, b, atol=1e-9)


def test_scaling_is_scale_free(rng):
    X = rng.random((40, 5))
    mu, sd = fit_scaling(X)
    mu2, sd2 = fit_scaling(1000 * X)
    np.testing.assert_allclose((X - mu) / sd, (1000 * X - mu2) / sd2, atol=1e-6)

"""Crops, resize, photometrics, multi-crop views."""

import math

import numpy as np
import pytest

from nvkit.augment import (
    AugmentSpec,
    MultiCropSpec,
    _rotate_hue,
    augment_view,
    bilinear_resize,
    color_jitter,
    denormalize,
    eval_spec,
    four_overlapping_crops,
    gaussian_blur,
    hflip,
    make_views,
    normalize,
    random_resized_crop,
    sample_crop_window,
)
from nvkit.errors import ContractError, DimensionError
from nvkit.rng import derive_rng


def _img(h, w, seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)


def _naive_bilinear(img, out_h, out_w):
    """Per-pixel half-pixel-center reference, no vectorization shared with the impl."""
    h, w, c = img.shape
    out = np.zeros((out_h, out_w, c), dtype=np.float64)
    for i in range(out_h):
        y = (i + 0.5) * h / out_h - 0.5
        y0 = min(max(int(math.floor(y)), 0), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = min(max(y - y0, 0.0), 1.0)
        for j in range(out_w):
            x = (j + 0.5) * w / out_w - 0.5
            x0 = min(max(int(math.floor(x)), 0), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = min(max(x - x0, 0.0), 1.0)
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


# -- resize ---------------------------------------------------------------------


def test_resize_identity_returns_copy():
    img = _img(6, 6)
    out = bilinear_resize(img, 6, 6)
    np.testing.assert_array_equal(out, img)
    assert out is not img


def test_resize_constant_image_stays_constant():
    img = np.full((5, 9, 3), 0.37, dtype=np.float32)
    for shape in ((3, 3), (10, 4), (1, 17)):
        np.testing.assert_allclose(bilinear_resize(img, *shape), 0.37, atol=1e-6)


def test_resize_matches_naive_loop():
    for (h, w, oh, ow) in ((2, 2, 4, 4), (5, 7, 3, 4), (8, 3, 5, 9)):
        img = _img(h, w, seed=h * 100 + w)
        np.testing.assert_allclose(
            bilinear_resize(img, oh, ow), _naive_bilinear(img, oh, ow), atol=1e-5
        )


# -- random resized crop ----------------------------------------------------------


def test_rrc_degenerate_spec_is_full_resize():
    spec = AugmentSpec(out_size=(16, 16), scale=(1.0, 1.0), ratio=(1.0, 1.0))
    img = _img(32, 32)
    out = random_resized_crop(img, spec, np.random.default_rng(0))
    np.testing.assert_allclose(out, bilinear_resize(img, 16, 16), atol=1e-6)


def test_rrc_output_shape_contract():
    img = _img(440, 640)
    out = random_resized_crop(img, AugmentSpec(), np.random.default_rng(1))
    assert out.shape == (224, 224, 3)


def test_crop_window_seeded_replay():
    # frozen oracle: window for this exact stream must never drift
    rng = derive_rng(0, "aug", 7)
    assert sample_crop_window(440, 640, AugmentSpec(), rng) == (32, 119, 335, 436)


def test_crop_windows_advance_with_rng():
    rng = derive_rng(0, "aug", 7)
    first = sample_crop_window(440, 640, AugmentSpec(), rng)
    second = sample_crop_window(440, 640, AugmentSpec(), rng)
    assert first != second


def test_crop_window_always_inside_image():
    spec = AugmentSpec(out_size=(8, 8), scale=(0.05, 1.0))
    rng = np.random.default_rng(2)
    for _ in range(200):
        top, left, ch, cw = sample_crop_window(21, 13, spec, rng)
        assert 0 <= top and top + ch <= 21
        assert 0 <= left and left + cw <= 13
        assert ch > 0 and cw > 0


# -- four overlapping crops ---------------------------------------------------------


def test_four_crops_are_bit_exact_windows():
    img = _img(440, 640)
    crops = four_overlapping_crops(img)
    assert len(crops) == 4
    offsets = [(0, 0), (0, 268), (184, 0), (184, 268)]  # (y, x), corner-anchored
    for crop, (y, x) in zip(crops, offsets):
        assert crop.shape == (256, 372, 3)
        np.testing.assert_array_equal(crop, img[y : y + 256, x : x + 372])


def test_four_crops_cover_every_pixel():
    hits = np.zeros((440, 640), dtype=np.int32)
    for y in (0, 184):
        for x in (0, 268):
            hits[y : y + 256, x : x + 372] += 1
    assert hits.min() >= 1


def test_four_crops_overlap_widths():
    left = np.zeros(640, dtype=bool)
    left[0:372] = True
    right = np.zeros(640, dtype=bool)
    right[268 : 268 + 372] = True
    assert int((left & right).sum()) == 104
    top = np.zeros(440, dtype=bool)
    top[0:256] = True
    bottom = np.zeros(440, dtype=bool)
    bottom[184 : 184 + 256] = True
    assert int((top & bottom).sum()) == 72


def test_four_crops_degenerate_input():
    img = _img(256, 372)
    for crop in four_overlapping_crops(img):
        np.testing.assert_array_equal(crop, img)


def test_four_crops_reject_small_image():
    with pytest.raises(DimensionError, match="smaller"):
        four_overlapping_crops(_img(255, 640))


# -- photometric ----------------------------------------------------------------


def test_color_jitter_stays_in_unit_range():
    img = _img(12, 12, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(20):
        out = color_jitter(img, rng)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.shape == img.shape


def test_color_jitter_zero_strengths_is_identity():
    img = _img(6, 6, seed=5)
    out = color_jitter(img, np.random.default_rng(6), strengths=(0.0, 0.0, 0.0, 0.0))
    np.testing.assert_array_equal(out, img)


def test_hue_rotation_full_turn_is_identity():
    img = _img(8, 8, seed=7)
    np.testing.assert_allclose(_rotate_hue(img, 2.0 * math.pi), img, atol=1e-5)
    np.testing.assert_allclose(_rotate_hue(img, 0.0), img, atol=1e-6)


def test_blur_keeps_constant_images():
    img = np.full((10, 10, 3), 0.6, dtype=np.float32)
    np.testing.assert_allclose(gaussian_blur(img, 1.3), 0.6, atol=1e-6)


def test_blur_reduces_noise_variance():
    img = _img(32, 32, seed=8)
    blurred = gaussian_blur(img, 2.0)
    assert blurred.var() < 0.5 * img.var()
    assert blurred.shape == img.shape


def test_blur_nonpositive_sigma_is_identity():
    img = _img(4, 4, seed=9)
    np.testing.assert_array_equal(gaussian_blur(img, 0.0), img)


def test_normalize_denormalize_inverse():
    img = _img(5, 5, seed=10)
    z = normalize(img, mean=0.5, std=0.5)
    assert abs(float(z[0, 0, 0]) - (img[0, 0, 0] - 0.5) / 0.5) < 1e-7
    np.testing.assert_allclose(denormalize(z, 0.5, 0.5), img, atol=1e-6)


def test_hflip_mirrors_columns():
    img = _img(3, 4, seed=11)
    np.testing.assert_array_equal(hflip(img), img[:, ::-1])


# -- composed views ----------------------------------------------------------------


def test_make_views_counts_and_shapes():
    spec = MultiCropSpec(
        global_spec=AugmentSpec(out_size=(32, 32)),
        local_spec=AugmentSpec(out_size=(16, 16), scale=(0.05, 0.4)),
        n_local=3,
    )
    views = make_views(_img(64, 64, seed=12), spec, derive_rng(0, "views", 0))
    assert len(views.global_views) == 2
    assert len(views.local_views) == 3
    assert len(views.all_views()) == 5
    for v in views.global_views:
        assert v.shape == (32, 32, 3)
    for v in views.local_views:
        assert v.shape == (16, 16, 3)


def test_make_views_deterministic_under_seed():
    spec = MultiCropSpec(
        global_spec=AugmentSpec(out_size=(16, 16)),
        local_spec=AugmentSpec(out_size=(8, 8), scale=(0.05, 0.4)),
        n_local=2,
    )
    img = _img(32, 32, seed=13)
    a = make_views(img, spec, derive_rng(5, "views", 9))
    b = make_views(img, spec, derive_rng(5, "views", 9))
    for va, vb in zip(a.all_views(), b.all_views()):
        np.testing.assert_array_equal(va, vb)


def test_normalized_view_statistics():
    # mean/std 0.5 normalization roughly centers uniform-noise images
    spec = AugmentSpec(out_size=(16, 16))
    means = []
    for i in range(100):
        view = augment_view(_img(24, 24, seed=100 + i), spec, derive_rng(1, "stats", i))
        means.append(float(view.mean()))
    assert abs(float(np.mean(means))) <= 0.5


def test_eval_spec_disables_photometrics():
    spec = eval_spec(out_size=(32, 32))
    assert spec.jitter_p == 0.0
    assert spec.blur_p == 0.0
    assert spec.scale == (0.08, 1.0)
    assert spec.ratio == (1.0, 1.6)


def test_augment_spec_validation():
    with pytest.raises(ContractError, match="scale"):
        AugmentSpec(scale=(0.0, 1.0))
    with pytest.raises(ContractError, match="scale"):
        AugmentSpec(scale=(0.5, 0.3))
    with pytest.raises(ContractError, match="size"):
        AugmentSpec(out_size=(0, 5))

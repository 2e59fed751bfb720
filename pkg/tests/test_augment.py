"""View augmentations: sampling distributions, elementary ops, gate behavior."""

import math

import numpy as np
import pytest
from scipy import stats

from dnc.augment import (
    AugmentDistribution,
    blur_kernel_size,
    center_crop,
    color_jitter,
    eval_sizes_for,
    gaussian_blur,
    grayscale,
    horizontal_flip,
    make_view,
    presets,
    random_resized_crop,
    resize,
    sample_area_aspect,
    sample_crop_box,
    shift_hue,
    solarize,
    view1_preset,
    view2_preset,
)
from dnc.errors import ConfigError


def _img(rng, h=20, w=16, c=3):
    return rng.uniform(0.0, 1.0, size=(h, w, c)).astype(np.float32)


# --- Sampling distributions -------------------------------------------------


def test_area_fraction_is_uniform():
    rng = np.random.default_rng(0)
    fracs = np.array([sample_area_aspect(rng)[0] for _ in range(4000)])
    stat = stats.kstest(fracs, stats.uniform(loc=0.08, scale=0.92).cdf)
    assert stat.pvalue > 0.01


def test_log_aspect_is_uniform():
    rng = np.random.default_rng(1)
    log_aspects = np.array([math.log(sample_area_aspect(rng)[1]) for _ in range(4000)])
    lo, hi = math.log(0.75), math.log(4.0 / 3.0)
    stat = stats.kstest(log_aspects, stats.uniform(loc=lo, scale=hi - lo).cdf)
    assert stat.pvalue > 0.01


def test_crop_box_respects_bounds():
    rng = np.random.default_rng(2)
    for _ in range(200):
        top, left, h, w = sample_crop_box((20, 16), (0.08, 1.0), (0.75, 4 / 3), rng)
        assert 0 <= top and top + h <= 20
        assert 0 <= left and left + w <= 16
        assert h >= 1 and w >= 1


def test_crop_box_fallback_on_impossible_aspect():
    # Aspect range far wider than the image can fit: the fallback box must
    # still be in bounds.
    rng = np.random.default_rng(3)
    for _ in range(50):
        top, left, h, w = sample_crop_box((8, 64), (0.9, 1.0), (0.05, 0.06), rng)
        assert 0 <= top and top + h <= 8
        assert 0 <= left and left + w <= 64


# --- Elementary ops ---------------------------------------------------------


def test_resize_identity_returns_equal_array(rng):
    x = _img(rng)
    np.testing.assert_array_equal(resize(x, (20, 16)), x)


def test_resize_shape_dtype_and_range(rng):
    y = resize(_img(rng), (9, 13))
    assert y.shape == (9, 13, 3)
    assert y.dtype == np.float32
    assert y.min() >= 0.0 and y.max() <= 1.0


def test_resize_preserves_constant_images():
    x = np.full((10, 10, 3), 0.37, dtype=np.float32)
    np.testing.assert_allclose(resize(x, (17, 5)), 0.37, atol=1e-4)


def test_horizontal_flip_mirrors_and_involutes(rng):
    x = _img(rng)
    y = horizontal_flip(x)
    np.testing.assert_array_equal(y[:, 0], x[:, -1])
    np.testing.assert_array_equal(horizontal_flip(y), x)


def test_grayscale_uses_luma_weights():
    x = np.zeros((1, 1, 3), dtype=np.float32)
    x[0, 0] = [1.0, 0.5, 0.25]
    y = grayscale(x)
    expected = 0.2989 * 1.0 + 0.5870 * 0.5 + 0.1140 * 0.25
    np.testing.assert_allclose(y[0, 0], expected, atol=1e-6)
    assert np.all(y[0, 0] == y[0, 0, 0])


def test_grayscale_single_channel_identity(rng):
    x = _img(rng, c=1)
    np.testing.assert_array_equal(grayscale(x), x)


def test_solarize_reflects_above_half():
    x = np.array([[[0.0, 0.25, 0.4999], [0.5, 0.75, 1.0]]], dtype=np.float32)
    y = solarize(x)
    np.testing.assert_allclose(y[0, 0], [0.0, 0.25, 0.4999], atol=1e-7)
    np.testing.assert_allclose(y[0, 1], [0.5, 0.25, 0.0], atol=1e-7)


def test_blur_kernel_size_oracle():
    # Kernel fraction 23/224 of the short side, rounded, forced odd, min 3.
    assert blur_kernel_size(224) == 23
    assert blur_kernel_size(32) == 3
    assert blur_kernel_size(64) == 7
    assert blur_kernel_size(8) == 3
    k = blur_kernel_size(97)
    assert k % 2 == 1 and k >= 3


def test_gaussian_blur_preserves_mean_roughly(rng):
    x = _img(rng, 16, 16)
    y = gaussian_blur(x, sigma=1.5)
    assert y.shape == x.shape
    np.testing.assert_allclose(y.mean(), x.mean(), atol=0.02)
    # Blur must reduce high-frequency energy.
    assert np.var(np.diff(y, axis=0)) < np.var(np.diff(x, axis=0))


def test_blur_sigma_zero_limit(rng):
    x = _img(rng, 12, 12)
    y = gaussian_blur(x, sigma=1e-4)
    np.testing.assert_allclose(y, x, atol=1e-3)


def test_hue_shift_full_cycle_is_identity(rng):
    x = _img(rng, 6, 6)
    np.testing.assert_allclose(shift_hue(x, 1.0), x, atol=1e-5)
    np.testing.assert_allclose(shift_hue(x, 0.0), x, atol=1e-6)


def test_hue_shift_preserves_value_channel(rng):
    x = _img(rng, 6, 6)
    y = shift_hue(x, 0.3)
    np.testing.assert_allclose(y.max(axis=2), x.max(axis=2), atol=1e-5)


def test_color_jitter_zero_strengths_is_identity(rng):
    x = _img(rng, 8, 8)
    y = color_jitter(x, 0.0, 0.0, 0.0, 0.0, rng=np.random.default_rng(0))
    np.testing.assert_allclose(y, x, atol=1e-6)


def test_color_jitter_stays_in_range(rng):
    x = _img(rng, 8, 8)
    for seed in range(10):
        y = color_jitter(x, 0.8, 0.8, 0.8, 0.5, rng=np.random.default_rng(seed))
        assert y.min() >= 0.0 and y.max() <= 1.0


def test_random_resized_crop_output_shape(rng):
    y = random_resized_crop(_img(rng), (11, 7), rng=np.random.default_rng(5))
    assert y.shape == (11, 7, 3)


# --- Composite views --------------------------------------------------------


def test_make_view_deterministic_under_seed(rng):
    x = _img(rng, 24, 24)
    dist = view1_preset((16, 16))
    a = make_view(x, dist, rng=np.random.default_rng(9))
    b = make_view(x, dist, rng=np.random.default_rng(9))
    c = make_view(x, dist, rng=np.random.default_rng(10))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_make_view_shape_range_dtype(rng):
    x = _img(rng, 24, 24)
    for dist in presets((12, 12)):
        y = make_view(x, dist, rng=np.random.default_rng(3))
        assert y.shape == (12, 12, 3)
        assert y.dtype == np.float32
        assert y.min() >= 0.0 and y.max() <= 1.0


def test_view_presets_differ_only_in_blur_and_solarize():
    v1, v2 = presets((32, 32))
    assert v1.blur_probability == 1.0 and v1.solarize_probability == 0.0
    assert v2.blur_probability == 0.1 and v2.solarize_probability == 0.2
    for field in ("crop_probability", "flip_probability", "jitter_probability",
                  "brightness", "contrast", "saturation", "hue",
                  "grayscale_probability", "crop_area_range"):
        assert getattr(v1, field) == getattr(v2, field)


def test_jitter_gate_defaults():
    v1 = view1_preset()
    assert (v1.brightness, v1.contrast, v1.saturation, v1.hue) == (0.4, 0.4, 0.2, 0.1)
    assert v1.jitter_probability == 0.8
    assert v1.grayscale_probability == 0.2
    assert v1.flip_probability == 0.5
    assert v1.crop_area_range == (0.08, 1.0)
    assert v1.crop_aspect_range == (0.75, 4.0 / 3.0)
    assert v1.blur_sigma_range == (0.1, 2.0)


def test_distribution_validation():
    with pytest.raises(ConfigError):
        AugmentDistribution(flip_probability=1.5).validate()
    with pytest.raises(ConfigError):
        AugmentDistribution(hue=0.7).validate()
    with pytest.raises(ConfigError):
        AugmentDistribution(crop_area_range=(0.0, 1.0)).validate()
    AugmentDistribution().validate()


# --- Deterministic eval view -------------------------------------------------


def test_center_crop_geometry():
    x = np.zeros((20, 30, 3), dtype=np.float32)
    x[8:12, 13:17] = 1.0  # block at the center
    y = center_crop(x, resize_short=10, crop=6)
    assert y.shape == (6, 6, 3)
    # The short side halves, so the center block lands mid-window.
    assert y[2:4, 2:4].mean() > 0.5


def test_center_crop_identity_when_sizes_match(rng):
    x = _img(rng, 14, 14)
    np.testing.assert_array_equal(center_crop(x, 14, 14), x)


def test_center_crop_validates(rng):
    with pytest.raises(ConfigError):
        center_crop(_img(rng), 0, 5)
    with pytest.raises(ConfigError):
        center_crop(_img(rng), 8, 9)  # crop larger than resized short side


def test_eval_sizes_margin():
    resize_short, crop = eval_sizes_for((224, 224))
    assert crop == 224
    assert resize_short == 256
    resize_short, crop = eval_sizes_for((24, 24))
    assert crop == 24 and resize_short == round(24 * 256 / 224)

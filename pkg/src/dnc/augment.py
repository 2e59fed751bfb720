"""Stochastic image views for contrastive training, plus the eval-time crop.

A view is produced by a fixed op order: random resized crop, horizontal
flip, color jitter, grayscale, gaussian blur, solarize. Each op fires with a
probability taken from an :class:`AugmentDistribution`; the two standard
presets differ only in blur and solarize probabilities.

All ops map float32 images in [0, 1] to float32 images in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .data import ensure_rng, validate_image
from .errors import ConfigError

GRAY_WEIGHTS = (0.2989, 0.5870, 0.1140)
BLUR_KERNEL_FRACTION = 23.0 / 224.0


@dataclass(frozen=True)
class AugmentDistribution:
    """Probabilities and strengths for one view distribution."""

    output_size: tuple = (32, 32)
    crop_probability: float = 1.0
    crop_area_range: tuple = (0.08, 1.0)
    crop_aspect_range: tuple = (3.0 / 4.0, 4.0 / 3.0)
    flip_probability: float = 0.5
    jitter_probability: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_probability: float = 0.2
    blur_probability: float = 1.0
    blur_sigma_range: tuple = (0.1, 2.0)
    blur_kernel_fraction: float = BLUR_KERNEL_FRACTION
    solarize_probability: float = 0.0

    def validate(self) -> None:
        for name in (
            "crop_probability",
            "flip_probability",
            "jitter_probability",
            "grayscale_probability",
            "blur_probability",
            "solarize_probability",
        ):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.hue <= 0.5:
            raise ConfigError(f"hue must be in [0, 0.5], got {self.hue}")
        lo, hi = self.crop_area_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"bad crop_area_range {self.crop_area_range}")
        lo, hi = self.crop_aspect_range
        if not 0.0 < lo <= hi:
            raise ConfigError(f"bad crop_aspect_range {self.crop_aspect_range}")
        lo, hi = self.blur_sigma_range
        if not 0.0 < lo <= hi:
            raise ConfigError(f"bad blur_sigma_range {self.blur_sigma_range}")
        oh, ow = self.output_size
        if oh < 1 or ow < 1:
            raise ConfigError(f"bad output_size {self.output_size}")


def view1_preset(output_size=(32, 32)) -> AugmentDistribution:
    """First view: blur always on, no solarization."""
    return AugmentDistribution(
        output_size=tuple(output_size), blur_probability=1.0, solarize_probability=0.0
    )


def view2_preset(output_size=(32, 32)) -> AugmentDistribution:
    """Second view: blur at 0.1, solarize at 0.2."""
    return AugmentDistribution(
        output_size=tuple(output_size), blur_probability=0.1, solarize_probability=0.2
    )


def presets(output_size=(32, 32)) -> tuple:
    return view1_preset(output_size), view2_preset(output_size)


# ---------------------------------------------------------------------------
# Elementary ops
# ---------------------------------------------------------------------------


def resize(x: np.ndarray, out_size) -> np.ndarray:
    """Cubic-spline resize to (out_h, out_w); values clipped back to [0, 1]."""
    h, w, _ = x.shape
    oh, ow = out_size
    if (h, w) == (oh, ow):
        return x.astype(np.float32, copy=True)
    factors = (oh / h, ow / w, 1.0)
    out = ndimage.zoom(
        x.astype(np.float64), factors, order=3, mode="reflect", grid_mode=True
    )
    if out.shape[:2] != (oh, ow):
        out = out[:oh, :ow]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_area_aspect(rng, area_range=(0.08, 1.0), aspect_range=(0.75, 4.0 / 3.0)):
    """Draw (area fraction, aspect ratio); aspect is log-uniform, width/height."""
    frac = rng.uniform(area_range[0], area_range[1])
    log_aspect = rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1]))
    return float(frac), float(math.exp(log_aspect))


def sample_crop_box(shape_hw, area_range, aspect_range, rng, max_tries: int = 10):
    """Sample (top, left, height, width) for a random resized crop.

    Retries until the box fits; after ``max_tries`` failures falls back to the
    largest centered box with the aspect ratio clamped to the feasible range.
    """
    h, w = shape_hw
    area = h * w
    for _ in range(max_tries):
        frac, aspect = sample_area_aspect(rng, area_range, aspect_range)
        target = frac * area
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < aspect_range[0]:
        cw = w
        ch = max(1, int(round(w / aspect_range[0])))
    elif in_ratio > aspect_range[1]:
        ch = h
        cw = max(1, int(round(h * aspect_range[1])))
    else:
        ch, cw = h, w
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(
    x: np.ndarray,
    out_size,
    area_range=(0.08, 1.0),
    aspect_range=(0.75, 4.0 / 3.0),
    rng=None,
) -> np.ndarray:
    rng = ensure_rng(rng)
    top, left, ch, cw = sample_crop_box(x.shape[:2], area_range, aspect_range, rng)
    return resize(x[top : top + ch, left : left + cw], out_size)


def horizontal_flip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[:, ::-1])


def grayscale(x: np.ndarray) -> np.ndarray:
    """Luma-weighted grayscale, replicated across channels. 1-channel: identity."""
    if x.shape[2] == 1:
        return x.astype(np.float32, copy=True)
    luma = (
        GRAY_WEIGHTS[0] * x[:, :, 0]
        + GRAY_WEIGHTS[1] * x[:, :, 1]
        + GRAY_WEIGHTS[2] * x[:, :, 2]
    )
    return np.repeat(luma[:, :, None], 3, axis=2).astype(np.float32)


def solarize(x: np.ndarray) -> np.ndarray:
    """Reflect values at the 0.5 threshold: x below 0.5 is kept, else 1 - x."""
    return np.where(x < 0.5, x, 1.0 - x).astype(np.float32)


def blur_kernel_size(min_side: int, fraction: float = BLUR_KERNEL_FRACTION) -> int:
    """Odd kernel width scaled to image size, never below 3."""
    k = int(np.rint(fraction * min_side))
    if k % 2 == 0:
        k += 1
    return max(3, k)


def gaussian_blur(x: np.ndarray, sigma: float, kernel_size: int | None = None) -> np.ndarray:
    """Separable blur with a sampled, normalized gaussian of fixed width."""
    if kernel_size is None:
        kernel_size = blur_kernel_size(min(x.shape[0], x.shape[1]))
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be odd and positive, got {kernel_size}")
    radius = (kernel_size - 1) // 2
    out = x.astype(np.float64)
    for axis in (0, 1):
        out = ndimage.gaussian_filter1d(
            out, sigma=sigma, axis=axis, mode="nearest", radius=radius
        )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _rgb_to_hsv(rgb: np.ndarray):
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    maxc = rgb.max(axis=2)
    minc = rgb.min(axis=2)
    delta = maxc - minc
    safe_delta = np.where(delta == 0.0, 1.0, delta)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta == 0.0, 0.0, (h / 6.0) % 1.0)
    s = np.where(maxc == 0.0, 0.0, delta / np.where(maxc == 0.0, 1.0, maxc))
    return h, s, maxc


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    idx = i.astype(np.int64) % 6
    conds = [idx == j for j in range(6)]
    r = np.select(conds, [v, q, p, p, t, v])
    g = np.select(conds, [t, v, v, q, p, p])
    b = np.select(conds, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=2)


def shift_hue(x: np.ndarray, delta: float) -> np.ndarray:
    if x.shape[2] == 1:
        return x.astype(np.float32, copy=True)
    h, s, v = _rgb_to_hsv(x.astype(np.float64))
    h = (h + delta) % 1.0
    return np.clip(_hsv_to_rgb(h, s, v), 0.0, 1.0).astype(np.float32)


def color_jitter(
    x: np.ndarray,
    brightness: float,
    contrast: float,
    saturation: float,
    hue: float,
    rng=None,
) -> np.ndarray:
    """Brightness, contrast, saturation, hue, in that fixed order.

    Each factor is uniform in [max(0, 1 - strength), 1 + strength]; the hue
    shift is uniform in [-hue, hue]. Strength 0 yields the exact identity.
    """
    rng = ensure_rng(rng)
    out = x.astype(np.float64)
    fb = rng.uniform(max(0.0, 1.0 - brightness), 1.0 + brightness)
    fc = rng.uniform(max(0.0, 1.0 - contrast), 1.0 + contrast)
    fs = rng.uniform(max(0.0, 1.0 - saturation), 1.0 + saturation)
    dh = rng.uniform(-hue, hue)

    out = np.clip(out * fb, 0.0, 1.0)
    gray = _luma(out)
    out = np.clip(fc * out + (1.0 - fc) * gray.mean(), 0.0, 1.0)
    if x.shape[2] == 3:
        gray = _luma(out)
        out = np.clip(fs * out + (1.0 - fs) * gray[:, :, None], 0.0, 1.0)
        if dh != 0.0:
            out = shift_hue(out.astype(np.float32), dh).astype(np.float64)
    return out.astype(np.float32)


def _luma(x: np.ndarray) -> np.ndarray:
    if x.shape[2] == 1:
        return x[:, :, 0]
    return (
        GRAY_WEIGHTS[0] * x[:, :, 0]
        + GRAY_WEIGHTS[1] * x[:, :, 1]
        + GRAY_WEIGHTS[2] * x[:, :, 2]
    )


# ---------------------------------------------------------------------------
# Composite pipelines
# ---------------------------------------------------------------------------


def make_view(x: np.ndarray, dist: AugmentDistribution, rng=None) -> np.ndarray:
    """Draw one stochastic view of ``x`` under ``dist``.

    The gate order is fixed (crop, flip, jitter, grayscale, blur, solarize)
    and each gate consumes exactly one uniform draw, so a seeded generator
    reproduces the same view.
    """
    dist.validate()
    validate_image(x)
    rng = ensure_rng(rng)
    if rng.uniform() < dist.crop_probability:
        out = random_resized_crop(
            x, dist.output_size, dist.crop_area_range, dist.crop_aspect_range, rng
        )
    else:
        out = resize(x, dist.output_size)
    if rng.uniform() < dist.flip_probability:
        out = horizontal_flip(out)
    if rng.uniform() < dist.jitter_probability:
        out = color_jitter(
            out, dist.brightness, dist.contrast, dist.saturation, dist.hue, rng
        )
    if rng.uniform() < dist.grayscale_probability:
        out = grayscale(out)
    if rng.uniform() < dist.blur_probability:
        sigma = rng.uniform(dist.blur_sigma_range[0], dist.blur_sigma_range[1])
        kernel = blur_kernel_size(min(out.shape[:2]), dist.blur_kernel_fraction)
        out = gaussian_blur(out, sigma, kernel)
    if rng.uniform() < dist.solarize_probability:
        out = solarize(out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def center_crop(x: np.ndarray, resize_short: int, crop: int) -> np.ndarray:
    """Deterministic eval view: scale the short side to ``resize_short``,
    then cut the centered ``crop`` x ``crop`` window."""
    if resize_short < 1 or crop < 1:
        raise ConfigError("resize_short and crop must be positive")
    if crop > resize_short:
        raise ConfigError(f"crop {crop} exceeds resized short side {resize_short}")
    h, w, _ = x.shape
    if h <= w:
        nh = resize_short
        nw = max(resize_short, int(round(w * resize_short / h)))
    else:
        nw = resize_short
        nh = max(resize_short, int(round(h * resize_short / w)))
    out = resize(x, (nh, nw))
    top = (nh - crop) // 2
    left = (nw - crop) // 2
    return np.ascontiguousarray(out[top : top + crop, left : left + crop])


def eval_sizes_for(image_hw, crop: int | None = None) -> tuple:
    """Default eval geometry for a given native size: crop = short side,
    resize_short = crop scaled by the standard 256/224 margin."""
    short = min(image_hw)
    crop = short if crop is None else crop
    return int(round(crop * 256.0 / 224.0)), crop


def scaled_distribution(dist: AugmentDistribution, output_size) -> AugmentDistribution:
    return replace(dist, output_size=tuple(output_size))

"""Image augmentation: crops, flips, color jitter, blur, normalization.

Everything operates on float32 [H, W, C] arrays in [0, 1] and is a pure
function of (image, rng state), so a derived per-record generator makes
any augmentation replayable. Multi-crop view construction for the
distillation trainer lives here too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ContractError, DimensionError


@dataclass
class AugmentSpec:
    """One view's augmentation stack."""

    out_size: Tuple[int, int] = (224, 224)  # (H, W)
    scale: Tuple[float, float] = (0.4, 1.0)  # crop area fraction
    ratio: Tuple[float, float] = (0.75, 4.0 / 3.0)  # aspect (W/H) range
    flip_p: float = 0.5
    jitter: Tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)  # b, c, s, hue
    jitter_p: float = 0.8
    blur_p: float = 0.5
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    mean: float = 0.5
    std: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.scale[0] <= self.scale[1] <= 1.0):
            raise ContractError(f"invalid crop scale range {self.scale}")
        if self.out_size[0] <= 0 or self.out_size[1] <= 0:
            raise ContractError(f"invalid output size {self.out_size}")


@dataclass
class MultiCropSpec:
    """Two global views plus n local views, as fed to the trainer."""

    global_spec: AugmentSpec = field(default_factory=AugmentSpec)
    local_spec: AugmentSpec = field(
        default_factory=lambda: AugmentSpec(out_size=(96, 96), scale=(0.05, 0.4))
    )
    n_local: int = 8


@dataclass
class ViewSet:
    global_views: List[np.ndarray]
    local_views: List[np.ndarray]

    def all_views(self) -> List[np.ndarray]:
        return list(self.global_views) + list(self.local_views)


def eval_spec(out_size=(224, 224)) -> AugmentSpec:
    """Evaluation-time crop: area 0.08-1.0, aspect 1.0-1.6, no photometrics."""
    return AugmentSpec(
        out_size=out_size, scale=(0.08, 1.0), ratio=(1.0, 1.6),
        flip_p=0.5, jitter_p=0.0, blur_p=0.0,
    )


# -- geometric ------------------------------------------------------------------


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [H,W,C] by bilinear interpolation with half-pixel centers."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def sample_crop_window(
    h: int, w: int, spec: AugmentSpec, rng: np.random.Generator
) -> Tuple[int, int, int, int]:
    """Pick (top, left, height, width): random area/aspect, 10 tries, center fallback."""
    area = h * w
    log_ratio = (math.log(spec.ratio[0]), math.log(spec.ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(spec.scale[0], spec.scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # center fallback with aspect clamped into range
    in_ratio = w / h
    if in_ratio < spec.ratio[0]:
        cw, ch = w, min(h, int(round(w / spec.ratio[0])))
    elif in_ratio > spec.ratio[1]:
        ch, cw = h, min(w, int(round(h * spec.ratio[1])))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    top, left, ch, cw = sample_crop_window(img.shape[0], img.shape[1], spec, rng)
    window = img[top : top + ch, left : left + cw]
    return bilinear_resize(window, *spec.out_size)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def four_overlapping_crops(
    img: np.ndarray, crop_w: int = 372, crop_h: int = 256
) -> List[np.ndarray]:
    """Four corner-anchored windows that jointly cover the whole frame.

    For the native 640x440 frame the offsets are (0,0), (268,0), (0,184),
    (268,184) in (x, y); other frame sizes use (W-crop_w, H-crop_h). The
    windows are views copied straight out of the input, never resampled.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h < crop_h or w < crop_w:
        raise DimensionError(f"image {w}x{h} smaller than crop {crop_w}x{crop_h}")
    xs = (0, w - crop_w)
    ys = (0, h - crop_h)
    return [img[y : y + crop_h, x : x + crop_w].copy() for y in ys for x in xs]


# -- photometric ------------------------------------------------------------------


def _grayscale(img: np.ndarray) -> np.ndarray:
    return img @ np.asarray([0.299, 0.587, 0.114], dtype=np.float32)


def color_jitter(
    img: np.ndarray,
    rng: np.random.Generator,
    strengths: Tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1),
) -> np.ndarray:
    """Brightness, contrast, saturation (factor 1±s) and hue rotation (±h turns)."""
    b, c, s, hue = strengths
    out = img.astype(np.float32)
    if b > 0:
        out = out * rng.uniform(1 - b, 1 + b)
    if c > 0:
        gray_mean = _grayscale(out).mean()
        out = (out - gray_mean) * rng.uniform(1 - c, 1 + c) + gray_mean
    if s > 0:
        gray = _grayscale(out)[..., None]
        out = gray + (out - gray) * rng.uniform(1 - s, 1 + s)
    if hue > 0:
        theta = rng.uniform(-hue, hue) * 2.0 * math.pi
        out = _rotate_hue(out, theta)
    return np.clip(out, 0.0, 1.0)


_RGB_TO_YIQ = np.asarray(
    [[0.299, 0.587, 0.114], [0.5959, -0.2746, -0.3213], [0.2115, -0.5227, 0.3112]],
    dtype=np.float32,
)
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ).astype(np.float32)


def _rotate_hue(img: np.ndarray, theta: float) -> np.ndarray:
    yiq = img @ _RGB_TO_YIQ.T
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rot = np.asarray([[1, 0, 0], [0, cos_t, -sin_t], [0, sin_t, cos_t]], dtype=np.float32)
    return (yiq @ rot.T) @ _YIQ_TO_RGB.T


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with reflect padding; kernel half-width ceil(3*sigma)."""
    if sigma <= 0:
        return img.astype(np.float32)
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float32)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = np.asarray(img, dtype=np.float32)
    padded = np.pad(out, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    out = np.einsum("k,khwc->hwc", kernel, np.stack([padded[i : i + out.shape[0]] for i in range(2 * radius + 1)]))
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    out = np.einsum("k,hkwc->hwc", kernel, np.stack([padded[:, i : i + out.shape[1]] for i in range(2 * radius + 1)], axis=1))
    return out


def normalize(img: np.ndarray, mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    return (np.asarray(img, dtype=np.float32) - np.float32(mean)) / np.float32(std)


def denormalize(img: np.ndarray, mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) * np.float32(std) + np.float32(mean)


# -- composed stacks ---------------------------------------------------------------


def augment_view(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Full train-time stack for one view; returns normalized [out_h,out_w,C]."""
    out = random_resized_crop(img, spec, rng)
    if rng.uniform() < spec.flip_p:
        out = hflip(out)
    if spec.jitter_p > 0 and rng.uniform() < spec.jitter_p:
        out = color_jitter(out, rng, spec.jitter)
    if spec.blur_p > 0 and rng.uniform() < spec.blur_p:
        out = gaussian_blur(out, float(rng.uniform(*spec.blur_sigma)))
    return normalize(out, spec.mean, spec.std)


def make_views(img: np.ndarray, spec: MultiCropSpec, rng: np.random.Generator) -> ViewSet:
    """2 global + n local independently augmented views of one image."""
    globals_ = [augment_view(img, spec.global_spec, rng) for _ in range(2)]
    locals_ = [augment_view(img, spec.local_spec, rng) for _ in range(spec.n_local)]
    return ViewSet(global_views=globals_, local_views=locals_)

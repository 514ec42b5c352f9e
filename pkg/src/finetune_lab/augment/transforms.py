"""Per-image transforms: crops, 3Aug, eval resize, normalization and random erasing.

Geometric and color transforms work on ``PIL.Image`` in 8-bit RGB. Normalization turns
an image into a float32 (channels, height, width) array; random erasing runs on that
normalized array.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np
from PIL import Image, ImageFilter, ImageOps

from finetune_lab.augment.policy import AugmentError

CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)
ERASE_AREA = (0.02, 0.33)
ERASE_ASPECT = (0.3, 3.3)
EVAL_RESIZE_RATIO = 1.14
SRC_PADDING = 4
_ATTEMPTS = 10


def to_pil(image: Image.Image | np.ndarray) -> Image.Image:
    if isinstance(image, Image.Image):
        return image.convert("RGB") if image.mode != "RGB" else image
    array = np.asarray(image)
    if array.dtype != np.uint8 or array.ndim != 3 or array.shape[2] != 3:
        raise AugmentError(f"expected uint8 (H, W, 3) image, got {array.dtype} {array.shape}")
    return Image.fromarray(array)


def sample_crop_box(
    width: int,
    height: int,
    scale: tuple[float, float],
    rng: np.random.Generator,
    ratio: tuple[float, float] = CROP_RATIO,
) -> tuple[int, int, int, int]:
    """Return ``(top, left, crop_h, crop_w)`` of a random resized crop.

    Area fraction is drawn uniformly from ``scale`` and aspect log-uniformly from
    ``ratio``. A rounded box is accepted only if it fits and its area fraction stays
    within ``scale``; after the retries a feasible integer box is chosen directly.
    """

    lo, hi = scale
    if not 0.0 < lo <= hi <= 1.0:
        raise AugmentError(f"crop scale bounds must satisfy 0 < lo <= hi <= 1, got {scale}")
    area = width * height
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(_ATTEMPTS):
        target_area = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height and lo * area <= w * h <= hi * area:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w

    return _fallback_box(width, height, lo, hi, rng, ratio)


def _fallback_box(
    width: int,
    height: int,
    lo: float,
    hi: float,
    rng: np.random.Generator,
    ratio: tuple[float, float],
) -> tuple[int, int, int, int]:
    """Pick an integer box whose area fraction lies in ``[lo, hi]`` at a random offset.

    Boxes with aspect inside ``ratio`` are preferred. When no integer box fits the
    bounds (``lo == hi`` with an unreachable area), the smallest box covering
    ``lo`` is used.
    """

    area = width * height
    fits: list[tuple[int, int]] = []
    for h in range(1, height + 1):
        w_lo = max(1, math.ceil(lo * area / h))
        w_hi = min(width, math.floor(hi * area / h))
        fits.extend((h, w) for w in range(w_lo, w_hi + 1))
    if fits:
        in_ratio = [(h, w) for h, w in fits if ratio[0] <= w / h <= ratio[1]]
        pool = in_ratio or fits
        h, w = pool[int(rng.integers(len(pool)))]
    else:
        covering = [(h, math.ceil(lo * area / h)) for h in range(1, height + 1)]
        h, w = min(((h, w) for h, w in covering if w <= width), key=lambda box: box[0] * box[1])
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def random_resized_crop(
    image: Image.Image | np.ndarray,
    scale_lo: float,
    scale_hi: float,
    out_size: int,
    rng: np.random.Generator,
) -> Image.Image:
    img = to_pil(image)
    top, left, h, w = sample_crop_box(img.width, img.height, (scale_lo, scale_hi), rng)
    return img.resize(
        (out_size, out_size), Image.Resampling.BILINEAR, box=(left, top, left + w, top + h)
    )


def resize_shorter(img: Image.Image, size: int) -> Image.Image:
    w, h = img.size
    scale = size / min(w, h)
    new = (max(size, int(round(w * scale))), max(size, int(round(h * scale))))
    if new == (w, h):
        return img
    return img.resize(new, Image.Resampling.BICUBIC)


def center_crop(img: Image.Image, size: int) -> Image.Image:
    left = (img.width - size) // 2
    top = (img.height - size) // 2
    return img.crop((left, top, left + size, top + size))


def simple_random_crop(
    image: Image.Image | np.ndarray, out_size: int, rng: np.random.Generator
) -> Image.Image:
    """Shorter side to ``out_size``, reflect-pad, then a random ``out_size`` square."""

    img = resize_shorter(to_pil(image), out_size)
    array = np.pad(
        np.asarray(img), ((SRC_PADDING, SRC_PADDING), (SRC_PADDING, SRC_PADDING), (0, 0)), mode="reflect"
    )
    top = int(rng.integers(0, array.shape[0] - out_size + 1))
    left = int(rng.integers(0, array.shape[1] - out_size + 1))
    return Image.fromarray(array[top : top + out_size, left : left + out_size].copy())


def three_augment(image: Image.Image | np.ndarray, rng: np.random.Generator) -> Image.Image:
    """One of grayscale, solarize or gaussian blur, chosen uniformly."""

    img = to_pil(image)
    choice = int(rng.integers(0, 3))
    if choice == 0:
        return ImageOps.grayscale(img).convert("RGB")
    if choice == 1:
        return ImageOps.solarize(img, threshold=128)
    radius = float(rng.uniform(0.1, 2.0))
    return img.filter(ImageFilter.GaussianBlur(radius=radius))


def eval_resize_crop(image: Image.Image | np.ndarray, out_size: int) -> Image.Image:
    """Shorter side to ``1.14 * out_size``, then a center ``out_size`` crop."""

    img = resize_shorter(to_pil(image), int(round(out_size * EVAL_RESIZE_RATIO)))
    return center_crop(img, out_size)


def normalize(
    image: Image.Image | np.ndarray, mean: Sequence[float], std: Sequence[float]
) -> np.ndarray:
    """8-bit RGB to float32 (3, H, W) with per-channel ``(x / 255 - mean) / std``."""

    array = np.asarray(to_pil(image), dtype=np.float32) / np.float32(255.0)
    mean_arr = np.asarray(mean, dtype=np.float32)
    std_arr = np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(((array - mean_arr) / std_arr).transpose(2, 0, 1))


def sample_erase_box(
    height: int, width: int, rng: np.random.Generator
) -> tuple[int, int, int, int]:
    """``(top, left, h, w)`` of an erase rectangle; the last attempt is clamped to fit."""

    area = height * width
    log_aspect = (math.log(ERASE_ASPECT[0]), math.log(ERASE_ASPECT[1]))
    h = w = 1
    for _ in range(_ATTEMPTS):
        target_area = area * rng.uniform(*ERASE_AREA)
        aspect = math.exp(rng.uniform(*log_aspect))
        h = int(round(math.sqrt(target_area * aspect)))
        w = int(round(math.sqrt(target_area / aspect)))
        if 0 < h < height and 0 < w < width:
            break
    h = min(max(h, 1), height)
    w = min(max(w, 1), width)
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def random_erase(image: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``prob`` replace one rectangle of a normalized (C, H, W) image
    with per-pixel standard normal values; otherwise return the input unchanged."""

    if not 0.0 <= prob <= 1.0:
        raise AugmentError(f"erase probability must lie in [0, 1], got {prob}")
    if prob == 0.0 or rng.random() >= prob:
        return image
    channels, height, width = image.shape
    top, left, h, w = sample_erase_box(height, width, rng)
    out = image.copy()
    out[:, top : top + h, left : left + w] = rng.standard_normal((channels, h, w)).astype(image.dtype)
    return out


__all__ = [
    "CROP_RATIO",
    "ERASE_AREA",
    "ERASE_ASPECT",
    "EVAL_RESIZE_RATIO",
    "center_crop",
    "eval_resize_crop",
    "normalize",
    "random_erase",
    "random_resized_crop",
    "resize_shorter",
    "sample_crop_box",
    "sample_erase_box",
    "simple_random_crop",
    "three_augment",
    "to_pil",
]

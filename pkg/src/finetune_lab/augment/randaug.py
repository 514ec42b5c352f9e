"""RandAugment over PIL images.

Every application picks ``n`` ops uniformly with replacement and runs each one at a
magnitude drawn from ``Normal(m, mstd)`` clipped to ``[0, 10]``. Magnitude-to-argument
mappings follow the widely used ImageNet RandAugment ranges (rotate up to 30 degrees,
shear up to 0.3, translate up to 45% of the side, enhance factors in [0.1, 1.9]).
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

from finetune_lab.augment.policy import AugmentError
from finetune_lab.augment.transforms import to_pil

MAX_LEVEL = 10.0
FILL = (128, 128, 128)
_RESAMPLE = Image.Resampling.BILINEAR


def _negate(value: float, rng: np.random.Generator) -> float:
    return -value if rng.random() > 0.5 else value


def _affine(img: Image.Image, matrix: tuple[float, ...]) -> Image.Image:
    return img.transform(img.size, Image.Transform.AFFINE, matrix, resample=_RESAMPLE, fillcolor=FILL)


def auto_contrast(img, level, rng):
    return ImageOps.autocontrast(img)


def equalize(img, level, rng):
    return ImageOps.equalize(img)


def invert(img, level, rng):
    return ImageOps.invert(img)


def rotate(img, level, rng):
    degrees = _negate(level / MAX_LEVEL * 30.0, rng)
    return img.rotate(degrees, resample=_RESAMPLE, fillcolor=FILL)


def posterize(img, level, rng):
    bits = int(level / MAX_LEVEL * 4)
    return ImageOps.posterize(img, bits)


def solarize(img, level, rng):
    return ImageOps.solarize(img, int(level / MAX_LEVEL * 256))


def solarize_add(img, level, rng, threshold: int = 128):
    add = int(level / MAX_LEVEL * 110)
    lut = [min(255, i + add) if i < threshold else i for i in range(256)]
    return img.point(lut * 3)


def _enhance(enhancer: type) -> Callable:
    def op(img, level, rng):
        return enhancer(img).enhance(level / MAX_LEVEL * 1.8 + 0.1)

    return op


color = _enhance(ImageEnhance.Color)
contrast = _enhance(ImageEnhance.Contrast)
brightness = _enhance(ImageEnhance.Brightness)
sharpness = _enhance(ImageEnhance.Sharpness)


def shear_x(img, level, rng):
    factor = _negate(level / MAX_LEVEL * 0.3, rng)
    return _affine(img, (1, factor, 0, 0, 1, 0))


def shear_y(img, level, rng):
    factor = _negate(level / MAX_LEVEL * 0.3, rng)
    return _affine(img, (1, 0, 0, factor, 1, 0))


def translate_x(img, level, rng):
    pixels = _negate(level / MAX_LEVEL * 0.45, rng) * img.size[0]
    return _affine(img, (1, 0, pixels, 0, 1, 0))


def translate_y(img, level, rng):
    pixels = _negate(level / MAX_LEVEL * 0.45, rng) * img.size[1]
    return _affine(img, (1, 0, 0, 0, 1, pixels))


RANDAUG_OPS: dict[str, Callable[[Image.Image, float, np.random.Generator], Image.Image]] = {
    "AutoContrast": auto_contrast,
    "Equalize": equalize,
    "Invert": invert,
    "Rotate": rotate,
    "Posterize": posterize,
    "Solarize": solarize,
    "SolarizeAdd": solarize_add,
    "Color": color,
    "Contrast": contrast,
    "Brightness": brightness,
    "Sharpness": sharpness,
    "ShearX": shear_x,
    "ShearY": shear_y,
    "TranslateXRel": translate_x,
    "TranslateYRel": translate_y,
}
_OP_NAMES = tuple(RANDAUG_OPS)


def sample_magnitude(m: float, mstd: float, rng: np.random.Generator) -> float:
    if mstd > 0:
        return float(np.clip(rng.normal(m, mstd), 0.0, MAX_LEVEL))
    return float(m)


def apply_op(image: Image.Image, name: str, magnitude: float, rng: np.random.Generator) -> Image.Image:
    try:
        op = RANDAUG_OPS[name]
    except KeyError:
        raise AugmentError(f"unknown RandAug op {name!r}") from None
    return op(image, magnitude, rng)


def randaug_apply(
    image: Image.Image | np.ndarray,
    m: float,
    n: int,
    mstd: float,
    rng: np.random.Generator,
) -> Image.Image | np.ndarray:
    """Apply ``n`` random ops; returns the same container type it was given."""

    if not 0.0 <= m <= MAX_LEVEL:
        raise AugmentError(f"RandAug magnitude must lie in [0, 10], got {m}")
    if n < 0:
        raise AugmentError(f"RandAug op count must be non-negative, got {n}")
    if n == 0:
        return image
    as_array = isinstance(image, np.ndarray)
    img = to_pil(image)
    for _ in range(n):
        name = _OP_NAMES[int(rng.integers(0, len(_OP_NAMES)))]
        img = apply_op(img, name, sample_magnitude(m, mstd, rng), rng)
    return np.asarray(img, dtype=np.uint8).copy() if as_array else img


__all__ = ["MAX_LEVEL", "RANDAUG_OPS", "apply_op", "randaug_apply", "sample_magnitude"]

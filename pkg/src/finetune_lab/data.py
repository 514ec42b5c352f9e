"""Datasets: class-folder images and a deterministic synthetic texture generator.

Images are kept as 8-bit RGB arrays shaped (height, width, 3); conversion to float and
normalization happen in :mod:`finetune_lab.augment`.
"""

from __future__ import annotations

import io
import logging
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image, UnidentifiedImageError
from tenacity import (
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from finetune_lab.utils import FinetuneLabError, derive_rng

logger = logging.getLogger(__name__)

Split = Literal["train", "val"]

_SPLIT_KEYS = {"train": 0, "val": 1}
_SHUFFLE_STREAM = "shuffle"
IMAGE_SUFFIXES = frozenset({".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".tif", ".tiff", ".webp"})


class DatasetError(FinetuneLabError):
    """Dataset could not be built: empty class folder, bad image, bad arguments."""

    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """In-memory labelled images, read-only after construction."""

    images: list[np.ndarray]
    labels: np.ndarray
    num_classes: int
    split: Split = "train"
    class_names: tuple[str, ...] = ()
    sources: tuple[str, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> tuple[np.ndarray, int]:
        return self.images[index], int(self.labels[index])

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        for i in range(len(self)):
            yield self[i]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def order(self, epoch: int, seed: int) -> np.ndarray:
        """Sample visiting order for one epoch, a pure function of (epoch, seed, size)."""

        return derive_rng(_SHUFFLE_STREAM, seed, epoch).permutation(len(self))

    def select(self, indices) -> Dataset:
        indices = [int(i) for i in indices]
        return Dataset(
            images=[self.images[i] for i in indices],
            labels=self.labels[indices].copy() if indices else self.labels[:0].copy(),
            num_classes=self.num_classes,
            split=self.split,
            class_names=self.class_names,
            sources=tuple(self.sources[i] for i in indices) if self.sources else (),
        )

    def subset(self, per_class: int) -> Dataset:
        """First ``per_class`` samples of every class, in dataset order."""

        if per_class <= 0:
            raise DatasetError(f"per_class must be positive, got {per_class}")
        picked: list[int] = []
        taken = np.zeros(self.num_classes, dtype=np.int64)
        for i, label in enumerate(self.labels):
            if taken[label] < per_class:
                picked.append(i)
                taken[label] += 1
        return self.select(picked)

    def repeat(self, times: int) -> Dataset:
        return self.select(list(range(len(self))) * times)


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    retry=retry_if_exception_type((TimeoutError, InterruptedError, BlockingIOError)),
    reraise=True,
)
def _read_bytes(path: Path) -> bytes:
    """Read a file, retrying transient I/O failures (network mounts, interrupted reads)."""
    return path.read_bytes()


def decode_image(path: str | Path, out_size: int | None = None) -> np.ndarray:
    """Decode one image as 8-bit RGB, optionally resizing its shorter side to ``out_size``."""

    path = Path(path)
    payload = _read_bytes(path)
    try:
        with Image.open(io.BytesIO(payload)) as img:
            img = img.convert("RGB")
            if out_size is not None:
                w, h = img.size
                scale = out_size / min(w, h)
                size = (max(out_size, round(w * scale)), max(out_size, round(h * scale)))
                img = img.resize(size, Image.Resampling.BICUBIC)
            return np.asarray(img, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc


def load_folder(
    root: str | Path,
    out_size: int,
    *,
    split: Split = "train",
    strict: bool = False,
) -> Dataset:
    """Load ``root/<class>/<image>`` with classes ranked by sorted directory name.

    Undecodable files are skipped with a warning, or raise when ``strict`` is set.
    """

    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not class_dirs:
        raise DatasetError(f"dataset root {root} has no class directories")

    images: list[np.ndarray] = []
    labels: list[int] = []
    sources: list[str] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(
            (p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
            key=lambda p: p.name,
        )
        loaded = 0
        for path in files:
            try:
                image = decode_image(path, out_size)
            except DatasetError:
                if strict:
                    raise
                logger.warning("image_skipped", extra={"path": str(path)})
                continue
            images.append(image)
            labels.append(label)
            sources.append(str(path))
            loaded += 1
        if loaded == 0:
            raise DatasetError(f"class directory {class_dir} contains no decodable images")

    logger.info(
        "folder_dataset_loaded",
        extra={"root": str(root), "classes": len(class_dirs), "samples": len(images)},
    )
    return Dataset(
        images=images,
        labels=np.asarray(labels, dtype=np.int64),
        num_classes=len(class_dirs),
        split=split,
        class_names=tuple(p.name for p in class_dirs),
        sources=tuple(sources),
    )


# Synthetic textures. The class is a grating orientation, evenly spaced over half a
# turn. Period and phase per channel, background color, low-frequency blotches and
# pixel noise are drawn per sample independently of the class.
_TEXTURE_PERIOD = (4.0, 8.0)
_TEXTURE_COMPONENTS = 3
_TEXTURE_STD = 0.04
_ORIENTATION_JITTER = np.deg2rad(3.0)
_BLOTCH_COMPONENTS = 4
_BLOTCH_MAX_FREQ = 1.0 / 20.0
_BLOTCH_STD = 0.1
_BACKGROUND = (0.3, 0.7)
_NOISE_STD = 0.015


def _waves(y, x, freq, angle, phase, std: float) -> np.ndarray:
    """Sum of plane waves over the last axis of the (channel, wave) parameter arrays."""

    proj = np.cos(angle)[..., None, None] * x + np.sin(angle)[..., None, None] * y
    waves = np.sin(2 * np.pi * freq[..., None, None] * proj + phase[..., None, None])
    return std * np.sqrt(2.0 / freq.shape[-1]) * waves.sum(axis=1)


def _render(rng: np.random.Generator, label: int, num_classes: int, image_size: int) -> np.ndarray:
    shape = (3, _TEXTURE_COMPONENTS)
    y, x = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")

    orientation = np.pi * label / num_classes
    texture = _waves(
        y,
        x,
        1.0 / rng.uniform(*_TEXTURE_PERIOD, size=shape),
        orientation + rng.uniform(-_ORIENTATION_JITTER, _ORIENTATION_JITTER, size=shape),
        rng.uniform(0.0, 2 * np.pi, size=shape),
        _TEXTURE_STD,
    )
    shape = (3, _BLOTCH_COMPONENTS)
    blotches = _waves(
        y,
        x,
        rng.uniform(0.0, _BLOTCH_MAX_FREQ, size=shape),
        rng.uniform(0.0, 2 * np.pi, size=shape),
        rng.uniform(0.0, 2 * np.pi, size=shape),
        _BLOTCH_STD,
    )
    background = rng.uniform(*_BACKGROUND, size=3)

    image = background[:, None, None] + blotches + texture
    image = image + rng.normal(0.0, _NOISE_STD, size=image.shape)
    return np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def synth_dataset(
    num_classes: int,
    n_per_class: int,
    image_size: int,
    seed: int,
    *,
    split: Split = "train",
) -> Dataset:
    """Oriented grating textures under class-independent color, blotch and noise nuisance.

    Every image is drawn from its own stream keyed by (seed, split, class, index), so
    splits never share samples and the result does not depend on generation order.
    """

    if num_classes <= 0 or n_per_class <= 0 or image_size <= 0:
        raise DatasetError(
            "num_classes, n_per_class and image_size must be positive, got"
            f" {num_classes}, {n_per_class}, {image_size}"
        )
    split_key = _SPLIT_KEYS[split]
    images: list[np.ndarray] = []
    labels: list[int] = []
    for label in range(num_classes):
        for index in range(n_per_class):
            rng = derive_rng("synth", seed, split_key, label, index)
            images.append(_render(rng, label, num_classes, image_size))
            labels.append(label)

    logger.debug(
        "synthetic_dataset_built",
        extra={"split": split, "classes": num_classes, "samples": len(images)},
    )
    return Dataset(
        images=images,
        labels=np.asarray(labels, dtype=np.int64),
        num_classes=num_classes,
        split=split,
        class_names=tuple(f"class_{i}" for i in range(num_classes)),
    )


__all__ = [
    "Dataset",
    "DatasetError",
    "decode_image",
    "load_folder",
    "synth_dataset",
]

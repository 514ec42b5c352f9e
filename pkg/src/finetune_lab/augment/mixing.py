"""Label smoothing and batch-level Mixup / CutMix on soft targets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from finetune_lab.augment.policy import AugmentError, AugPolicy

MixMode = Literal["none", "mixup", "cutmix"]


@dataclass(frozen=True, eq=False)
class MixedBatch:
    """Collated images with their (possibly mixed) soft targets."""

    images: np.ndarray
    soft_targets: np.ndarray
    lambda_used: float = 1.0
    mode: MixMode = "none"
    box: tuple[int, int, int, int] | None = None


def smooth_targets(labels, num_classes: int, eps: float) -> np.ndarray:
    """``(1 - eps) * one_hot + eps / num_classes`` as float64 rows."""

    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if not 0.0 <= eps < 1.0:
        raise AugmentError(f"smoothing eps must lie in [0, 1), got {eps}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)]
        raise AugmentError(f"labels {bad.tolist()} outside [0, {num_classes})")
    targets = np.full((labels.size, num_classes), eps / num_classes, dtype=np.float64)
    targets[np.arange(labels.size), labels] += 1.0 - eps
    return targets


def _permutation(batch: int, rng: np.random.Generator, perm) -> np.ndarray:
    if perm is None:
        return rng.permutation(batch)
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(batch)):
        raise AugmentError(f"perm must be a permutation of range({batch})")
    return perm


def mixup_batch(
    images: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    *,
    lam: float | None = None,
    perm=None,
) -> MixedBatch:
    """Blend every sample with a permuted partner by ``lam ~ Beta(alpha, alpha)``.

    ``alpha == 0`` (and no forced ``lam``) returns the batch unchanged with ``lam = 1``.
    """

    if alpha < 0:
        raise AugmentError(f"mixup alpha must be non-negative, got {alpha}")
    if lam is None and alpha == 0:
        return MixedBatch(images, targets, 1.0, "none")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    index = _permutation(len(images), rng, perm)
    weight = np.asarray(lam, dtype=images.dtype)
    mixed = weight * images + (np.asarray(1.0, dtype=images.dtype) - weight) * images[index]
    soft = lam * targets + (1.0 - lam) * targets[index]
    return MixedBatch(mixed, soft, float(lam), "mixup")


def rand_box(
    height: int, width: int, lam: float, rng: np.random.Generator
) -> tuple[int, int, int, int]:
    """``(y1, y2, x1, x2)`` of a box with side ratio ``sqrt(1 - lam)``, clipped to the image."""

    cut = np.sqrt(1.0 - lam)
    cut_h, cut_w = int(height * cut), int(width * cut)
    cy, cx = int(rng.integers(0, height)), int(rng.integers(0, width))
    y1, y2 = np.clip([cy - cut_h // 2, cy + cut_h // 2], 0, height)
    x1, x2 = np.clip([cx - cut_w // 2, cx + cut_w // 2], 0, width)
    return int(y1), int(y2), int(x1), int(x2)


def cutmix_batch(
    images: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    *,
    lam: float | None = None,
    box: tuple[int, int, int, int] | None = None,
    perm=None,
) -> MixedBatch:
    """Paste a box from a permuted partner; targets mix by the exact kept-pixel fraction."""

    if alpha < 0:
        raise AugmentError(f"cutmix alpha must be non-negative, got {alpha}")
    if lam is None and box is None and alpha == 0:
        return MixedBatch(images, targets, 1.0, "none")
    height, width = images.shape[-2:]
    if box is None:
        if lam is None:
            lam = float(rng.beta(alpha, alpha))
        box = rand_box(height, width, lam, rng)
    y1, y2, x1, x2 = box
    if not (0 <= y1 <= y2 <= height and 0 <= x1 <= x2 <= width):
        raise AugmentError(f"box {box} outside a {height}x{width} image")
    index = _permutation(len(images), rng, perm)
    mixed = images.copy()
    mixed[..., y1:y2, x1:x2] = images[index][..., y1:y2, x1:x2]
    lam_used = 1.0 - (y2 - y1) * (x2 - x1) / float(height * width)
    soft = lam_used * targets + (1.0 - lam_used) * targets[index]
    return MixedBatch(mixed, soft, lam_used, "cutmix", (y1, y2, x1, x2))


def mix_batch(
    images: np.ndarray, targets: np.ndarray, policy: AugPolicy, rng: np.random.Generator
) -> MixedBatch:
    """Mixup or CutMix per batch; a fair coin picks one when both are enabled."""

    use_mixup = policy.mixup_alpha > 0
    use_cutmix = policy.cutmix_alpha > 0
    if use_mixup and use_cutmix:
        use_mixup = rng.random() < 0.5
        use_cutmix = not use_mixup
    if use_mixup:
        return mixup_batch(images, targets, policy.mixup_alpha, rng)
    if use_cutmix:
        return cutmix_batch(images, targets, policy.cutmix_alpha, rng)
    return MixedBatch(images, targets, 1.0, "none")


__all__ = [
    "MixedBatch",
    "cutmix_batch",
    "mix_batch",
    "mixup_batch",
    "rand_box",
    "smooth_targets",
]

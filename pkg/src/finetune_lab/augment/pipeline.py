"""Per-sample train/eval pipelines and the threaded, deterministic batch loader.

Every sample draws from the ``"sample"`` stream keyed by ``(seed, epoch, sample_index)``,
and batch-level mixing from the ``"mix"`` stream keyed by ``(seed, epoch, batch_index)``. Batches
are therefore identical for any worker count or completion order.
"""

from __future__ import annotations

import logging
from collections import deque
from collections.abc import Iterator
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from finetune_lab.augment.mixing import MixedBatch, mix_batch, smooth_targets
from finetune_lab.augment.policy import AugPolicy
from finetune_lab.augment.randaug import randaug_apply
from finetune_lab.augment.transforms import (
    eval_resize_crop,
    normalize,
    random_erase,
    random_resized_crop,
    simple_random_crop,
    three_augment,
)
from finetune_lab.data import Dataset
from finetune_lab.utils import derive_rng

logger = logging.getLogger(__name__)

MIX_STREAM = "mix"
SAMPLE_STREAM = "sample"


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return derive_rng(SAMPLE_STREAM, seed, epoch, index)


def train_transform(
    image: np.ndarray, policy: AugPolicy, out_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Crop, per-image augmentation, normalization and erasing for one training image."""

    if policy.policy_kind == "3aug+src":
        img = simple_random_crop(image, out_size, rng)
    else:
        img = random_resized_crop(image, policy.crop_scale_lo, policy.crop_scale_hi, out_size, rng)
    if policy.policy_kind == "randaug+rrc":
        img = randaug_apply(img, policy.randaug_m, policy.randaug_n, policy.randaug_mstd, rng)
    else:
        img = three_augment(img, rng)
    array = normalize(img, policy.mean, policy.std)
    return random_erase(array, policy.erase_prob, rng)


def eval_transform(image: np.ndarray, policy: AugPolicy, out_size: int) -> np.ndarray:
    """Resize to 1.14x, center crop, normalize; draws no random numbers."""

    return normalize(eval_resize_crop(image, out_size), policy.mean, policy.std)


@dataclass(frozen=True, eq=False)
class Batch:
    """A collated, mixed training batch and the dataset rows it came from."""

    index: int
    indices: np.ndarray
    labels: np.ndarray
    mixed: MixedBatch

    @property
    def images(self) -> np.ndarray:
        return self.mixed.images

    @property
    def soft_targets(self) -> np.ndarray:
        return self.mixed.soft_targets

    def __len__(self) -> int:
        return len(self.indices)


class BatchLoader:
    """Iterate one epoch of augmented batches.

    ``workers`` threads transform samples while at most ``prefetch`` batches are in
    flight; mixing runs on the consuming thread after collation. ``workers == 0``
    transforms synchronously.
    """

    def __init__(
        self,
        dataset: Dataset,
        policy: AugPolicy,
        out_size: int,
        batch_size: int,
        *,
        seed: int,
        epoch: int,
        workers: int = 0,
        prefetch: int = 4,
        drop_last: bool = False,
    ) -> None:
        if batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        self.dataset = dataset
        self.policy = policy
        self.out_size = out_size
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.workers = workers
        self.prefetch = max(1, prefetch)
        order = dataset.order(epoch, seed)
        stop = len(order) - len(order) % batch_size if drop_last else len(order)
        self._chunks = [order[i : i + batch_size] for i in range(0, stop, batch_size)]

    def __len__(self) -> int:
        return len(self._chunks)

    def _collate(self, indices: np.ndarray) -> np.ndarray:
        images = [
            train_transform(
                self.dataset.images[i], self.policy, self.out_size, sample_rng(self.seed, self.epoch, int(i))
            )
            for i in indices
        ]
        return np.stack(images)

    def _finish(self, batch_index: int, indices: np.ndarray, images: np.ndarray) -> Batch:
        labels = self.dataset.labels[indices]
        targets = smooth_targets(labels, self.dataset.num_classes, self.policy.smoothing_eps)
        rng = derive_rng(MIX_STREAM, self.seed, self.epoch, batch_index)
        mixed = mix_batch(images, targets, self.policy, rng)
        return Batch(index=batch_index, indices=indices, labels=labels, mixed=mixed)

    def __iter__(self) -> Iterator[Batch]:
        if self.workers <= 0:
            for b, indices in enumerate(self._chunks):
                yield self._finish(b, indices, self._collate(indices))
            return

        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="augment") as pool:
            pending: deque[tuple[int, Future]] = deque()
            chunks = iter(enumerate(self._chunks))
            try:
                for _ in range(self.prefetch):
                    item = next(chunks, None)
                    if item is None:
                        break
                    pending.append((item[0], pool.submit(self._collate, item[1])))
                while pending:
                    b, future = pending.popleft()
                    images = future.result()
                    item = next(chunks, None)
                    if item is not None:
                        pending.append((item[0], pool.submit(self._collate, item[1])))
                    yield self._finish(b, self._chunks[b], images)
            finally:
                for _, future in pending:
                    future.cancel()


def eval_arrays(
    dataset: Dataset, policy: AugPolicy, out_size: int, *, workers: int = 0
) -> np.ndarray:
    """Eval-transformed images of a whole dataset, stacked in dataset order."""

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="eval-transform") as pool:
            images = list(pool.map(lambda img: eval_transform(img, policy, out_size), dataset.images))
    else:
        images = [eval_transform(img, policy, out_size) for img in dataset.images]
    if not images:
        return np.zeros((0, 3, out_size, out_size), dtype=np.float32)
    return np.stack(images)


__all__ = [
    "Batch",
    "BatchLoader",
    "MIX_STREAM",
    "SAMPLE_STREAM",
    "eval_arrays",
    "eval_transform",
    "sample_rng",
    "train_transform",
]

"""Input pipeline: crops, RandAug / 3Aug, random erasing, label smoothing, Mixup, CutMix."""

from finetune_lab.augment.mixing import (
    MixedBatch,
    cutmix_batch,
    mix_batch,
    mixup_batch,
    rand_box,
    smooth_targets,
)
from finetune_lab.augment.pipeline import (
    Batch,
    BatchLoader,
    eval_arrays,
    eval_transform,
    sample_rng,
    train_transform,
)
from finetune_lab.augment.policy import AugmentError, AugPolicy
from finetune_lab.augment.randaug import RANDAUG_OPS, randaug_apply
from finetune_lab.augment.transforms import (
    normalize,
    random_erase,
    random_resized_crop,
    sample_crop_box,
    simple_random_crop,
    three_augment,
)

__all__ = [
    "RANDAUG_OPS",
    "AugPolicy",
    "AugmentError",
    "Batch",
    "BatchLoader",
    "MixedBatch",
    "cutmix_batch",
    "eval_arrays",
    "eval_transform",
    "mix_batch",
    "mixup_batch",
    "normalize",
    "rand_box",
    "randaug_apply",
    "random_erase",
    "random_resized_crop",
    "sample_crop_box",
    "sample_rng",
    "simple_random_crop",
    "smooth_targets",
    "three_augment",
    "train_transform",
]

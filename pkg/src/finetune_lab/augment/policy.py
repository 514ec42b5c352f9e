from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from finetune_lab.utils import FinetuneLabError

PolicyKind = Literal["randaug+rrc", "3aug+rrc", "3aug+src"]

# CLIP image statistics; any per-channel values may be configured.
DEFAULT_MEAN = (0.48145466, 0.4578275, 0.40821073)
DEFAULT_STD = (0.26862954, 0.26130258, 0.27577711)


class AugmentError(FinetuneLabError):
    """Invalid augmentation arguments (bad labels, scale bounds, probabilities)."""

    pass


class AugPolicy(BaseModel):
    """Every augmentation hyperparameter of a run.

    Attributes
    ----------
    randaug_m, randaug_n, randaug_mstd:
        RandAug magnitude (0-10), ops per image and magnitude jitter std.
    mixup_alpha, cutmix_alpha:
        Beta parameters; 0 disables the corresponding batch mix.
    erase_prob:
        Probability of erasing one rectangle per image (pixel mode).
    crop_scale_lo, crop_scale_hi:
        Area-fraction bounds of the random resized crop.
    smoothing_eps:
        Label smoothing mass spread uniformly over classes.
    policy_kind:
        Which per-image pipeline runs: RandAug or 3Aug, after RRC or SRC.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    randaug_m: float = Field(default=9.0, ge=0.0, le=10.0)
    randaug_n: int = Field(default=2, ge=0)
    randaug_mstd: float = Field(default=0.5, ge=0.0)
    mixup_alpha: float = Field(default=0.8, ge=0.0)
    cutmix_alpha: float = Field(default=1.0, ge=0.0)
    erase_prob: float = Field(default=0.25, ge=0.0, le=1.0)
    erase_mode: Literal["pixel"] = "pixel"
    crop_scale_lo: float = Field(default=0.08, gt=0.0, le=1.0)
    crop_scale_hi: float = Field(default=1.0, gt=0.0, le=1.0)
    smoothing_eps: float = Field(default=0.1, ge=0.0, lt=1.0)
    policy_kind: PolicyKind = "randaug+rrc"
    mean: tuple[float, float, float] = DEFAULT_MEAN
    std: tuple[float, float, float] = DEFAULT_STD

    @model_validator(mode="after")
    def _check_bounds(self) -> AugPolicy:
        if self.crop_scale_lo > self.crop_scale_hi:
            raise ValueError(
                f"crop_scale_lo {self.crop_scale_lo} exceeds crop_scale_hi {self.crop_scale_hi}"
            )
        if any(s <= 0 for s in self.std):
            raise ValueError("normalization std must be positive")
        return self

    @property
    def mixing_enabled(self) -> bool:
        return self.mixup_alpha > 0 or self.cutmix_alpha > 0

    @classmethod
    def disabled(cls, **overrides) -> AugPolicy:
        """Policy with every stochastic augmentation switched off."""

        base = dict(
            randaug_n=0,
            mixup_alpha=0.0,
            cutmix_alpha=0.0,
            erase_prob=0.0,
            crop_scale_lo=1.0,
            crop_scale_hi=1.0,
            smoothing_eps=0.0,
        )
        base.update(overrides)
        return cls(**base)

"""Run configuration: flat ``key = value`` files, named presets and validation.

Keys follow the row names of the usual fine-tuning config tables (``base_learning_rate``,
``layer_wise_lr_decay``, ``warmup_epochs``, ``training_epochs``, ``ema``, ...). A file may
start from a preset with ``preset = <name>``; later keys override it.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from pathlib import Path
from types import MappingProxyType
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from finetune_lab.augment import AugPolicy
from finetune_lab.model import ViTConfig
from finetune_lab.optim import TrainConfig
from finetune_lab.utils import FinetuneLabError, stable_hash

logger = logging.getLogger(__name__)


class RunConfigError(FinetuneLabError):
    """Config file or overrides could not be parsed or validated."""

    pass


class RunConfig(BaseModel):
    """Every knob of one fine-tuning run, flat and table-shaped."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    # optimizer and schedule
    optimizer: Literal["adamw"] = "adamw"
    base_learning_rate: float = Field(default=6e-4, gt=0.0)
    layer_wise_lr_decay: float = Field(default=0.6, gt=0.0, le=1.0)
    weight_decay: float = Field(default=0.05, ge=0.0)
    optimizer_momentum: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    batch_size: int = Field(default=2048, gt=0)
    accum_steps: int = Field(default=1, ge=1)
    learning_rate_schedule: Literal["cosine"] = "cosine"
    min_learning_rate: float = Field(default=1e-6, ge=0.0)
    warmup_epochs: int = Field(default=10, ge=0)
    training_epochs: int = Field(default=50, ge=0)
    ema: float = Field(default=0.9998, ge=0.0, lt=1.0)
    freeze_layers: int = Field(default=0, ge=0)

    # augmentation and regularization
    augmentation: Literal["randaug+rrc", "3aug+rrc", "3aug+src"] = "randaug+rrc"
    randaug_m: float = Field(default=9.0, ge=0.0, le=10.0)
    randaug_n: int = Field(default=2, ge=0)
    randaug_mstd: float = Field(default=0.5, ge=0.0)
    crop_ratio: float = Field(default=0.08, gt=0.0, le=1.0)
    crop_ratio_max: float = Field(default=1.0, gt=0.0, le=1.0)
    label_smoothing: float = Field(default=0.1, ge=0.0, lt=1.0)
    mixup: float = Field(default=0.0, ge=0.0)
    cutmix: float = Field(default=0.0, ge=0.0)
    drop_path: float = Field(default=0.0, ge=0.0, lt=1.0)
    random_erase: float = Field(default=0.25, ge=0.0, le=1.0)
    random_erase_mode: Literal["pixel"] = "pixel"
    random_seed: int = Field(default=0, ge=0)

    # architecture
    position_encoding: Literal["learnable-absolute"] = "learnable-absolute"
    layer_scale: bool = False
    relative_position_bias: bool = False
    image_size: int = Field(default=32, gt=0)
    patch_size: int = Field(default=4, gt=0)
    embed_dim: int = Field(default=64, gt=0)
    depth: int = Field(default=4, ge=0)
    num_heads: int = Field(default=4, gt=0)
    mlp_ratio: float = Field(default=4.0, gt=0.0)
    pretrained_backbone: str | None = None

    # data and outputs
    dataset: Literal["synthetic", "folder"] = "synthetic"
    dataset_root: str | None = None
    num_classes: int = Field(default=10, gt=1)
    train_per_class: int = Field(default=500, gt=0)
    val_per_class: int = Field(default=100, gt=0)
    train_subset_per_class: int | None = Field(default=None, gt=0)
    dataset_seed: int = Field(default=0, ge=0)
    output_dir: str | None = None
    checkpoint_every: int = Field(default=1, ge=1)

    @field_validator("optimizer_momentum", mode="before")
    @classmethod
    def _split_pair(cls, v: Any) -> Any:
        if isinstance(v, str):
            return tuple(part.strip() for part in v.replace(";", ",").split(",") if part.strip())
        return v

    @field_validator("pretrained_backbone", "dataset_root", "output_dir", "train_subset_per_class", mode="before")
    @classmethod
    def _none_strings(cls, v: Any) -> Any:
        if isinstance(v, str) and v.strip().lower() in ("", "none", "null"):
            return None
        return v

    @model_validator(mode="after")
    def _check_components(self) -> RunConfig:
        if self.dataset == "folder" and not self.dataset_root:
            raise ValueError("dataset = folder requires dataset_root")
        if self.freeze_layers > self.depth:
            raise ValueError(f"freeze_layers {self.freeze_layers} exceeds depth {self.depth}")
        self.vit_config()
        self.train_config()
        self.aug_policy()
        return self

    @property
    def tuned_layers(self) -> int:
        return self.depth - self.freeze_layers

    def vit_config(self) -> ViTConfig:
        return ViTConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            dim=self.embed_dim,
            depth=self.depth,
            heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            num_classes=self.num_classes,
            use_rpe=self.relative_position_bias,
            use_layerscale=self.layer_scale,
            drop_path_rate=self.drop_path,
            pe_kind=self.position_encoding,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_learning_rate,
            llrd_decay=self.layer_wise_lr_decay,
            weight_decay=self.weight_decay,
            beta1=self.optimizer_momentum[0],
            beta2=self.optimizer_momentum[1],
            adam_eps=self.adam_eps,
            batch_size=self.batch_size,
            warmup_epochs=self.warmup_epochs,
            total_epochs=self.training_epochs,
            ema_momentum=self.ema,
            freeze_k=self.freeze_layers,
            min_lr=min(self.min_learning_rate, self.base_learning_rate),
            seed=self.random_seed,
            accum_steps=self.accum_steps,
        )

    def aug_policy(self) -> AugPolicy:
        return AugPolicy(
            randaug_m=self.randaug_m,
            randaug_n=self.randaug_n,
            randaug_mstd=self.randaug_mstd,
            mixup_alpha=self.mixup,
            cutmix_alpha=self.cutmix,
            erase_prob=self.random_erase,
            erase_mode=self.random_erase_mode,
            crop_scale_lo=self.crop_ratio,
            crop_scale_hi=self.crop_ratio_max,
            smoothing_eps=self.label_smoothing,
            policy_kind=self.augmentation,
        )

    def config_hash(self) -> str:
        """Hash of every setting that affects results (the output location does not)."""

        return stable_hash(self.model_dump(exclude={"output_dir"}))

    def to_text(self) -> str:
        lines = []
        for key, value in self.model_dump().items():
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_TABLE_COMMON: dict[str, Any] = {
    "optimizer": "adamw",
    "weight_decay": 0.05,
    "optimizer_momentum": (0.9, 0.999),
    "batch_size": 2048,
    "learning_rate_schedule": "cosine",
    "augmentation": "randaug+rrc",
    "randaug_m": 9.0,
    "randaug_n": 2,
    "randaug_mstd": 0.5,
    "label_smoothing": 0.1,
    "drop_path": 0.0,
    "random_erase": 0.25,
    "random_erase_mode": "pixel",
    "random_seed": 0,
    "layer_scale": False,
    "position_encoding": "learnable-absolute",
}

PRESETS: Mapping[str, Mapping[str, Any]] = MappingProxyType(
    {
        "baseline": MappingProxyType(
            {
                **_TABLE_COMMON,
                "base_learning_rate": 1e-3,
                "layer_wise_lr_decay": 1.0,
                "warmup_epochs": 20,
                "training_epochs": 100,
                "mixup": 0.8,
                "cutmix": 1.0,
                "ema": 0.0,
            }
        ),
        "recipe-base": MappingProxyType(
            {
                **_TABLE_COMMON,
                "base_learning_rate": 6e-4,
                "layer_wise_lr_decay": 0.6,
                "warmup_epochs": 10,
                "training_epochs": 50,
                "mixup": 0.0,
                "cutmix": 0.0,
                "ema": 0.9998,
            }
        ),
        "recipe-large": MappingProxyType(
            {
                **_TABLE_COMMON,
                "base_learning_rate": 4e-4,
                "layer_wise_lr_decay": 0.65,
                "warmup_epochs": 5,
                "training_epochs": 30,
                "mixup": 0.0,
                "cutmix": 0.0,
                "ema": 0.9998,
            }
        ),
    }
)


def parse_config_text(text: str, *, source: str = "<text>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""

    values: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise RunConfigError(f"{source}:{line_no}: expected 'key = value', got {raw.strip()!r}")
        if key in values:
            raise RunConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    """``["key=value", ...]`` from the command line into a dict."""

    overrides: dict[str, str] = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise RunConfigError(f"override must look like key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        key = ".".join(str(p) for p in error["loc"]) or "config"
        parts.append(f"{key}: {error['msg']}")
    return "; ".join(parts)


def resolve_config(
    values: Mapping[str, Any],
    *,
    preset: str | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Layer preset < ``values`` < ``overrides`` and validate the result.

    A ``preset`` key inside ``values`` selects the base unless ``preset`` is given.
    """

    merged = dict(values)
    file_preset = merged.pop("preset", None)
    name = preset or file_preset
    base: dict[str, Any] = {}
    if name:
        if name not in PRESETS:
            raise RunConfigError(f"preset: unknown preset {name!r}; choose from {sorted(PRESETS)}")
        base = dict(PRESETS[name])
    base.update(merged)
    base.update(overrides or {})
    try:
        return RunConfig.model_validate(base)
    except ValidationError as exc:
        raise RunConfigError(_format_validation_error(exc)) from exc


def load_run_config(
    path: str | Path | None,
    *,
    preset: str | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise RunConfigError(f"cannot read config {path}: {exc}") from exc
        values = parse_config_text(text, source=str(path))
    config = resolve_config(values, preset=preset, overrides=overrides)
    logger.debug("run_config_resolved", extra={"config_hash": config.config_hash()})
    return config


__all__ = [
    "PRESETS",
    "RunConfig",
    "RunConfigError",
    "load_run_config",
    "parse_config_text",
    "parse_overrides",
    "resolve_config",
]

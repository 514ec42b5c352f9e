"""AdamW with layer-wise learning-rate decay, warmup + cosine schedule, freezing and EMA."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterator, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from finetune_lab.autodiff import Tensor
from finetune_lab.model import Model
from finetune_lab.utils import FinetuneLabError

logger = logging.getLogger(__name__)

T = TypeVar("T")


class OptimizerError(FinetuneLabError):
    """Invalid optimizer input: untagged parameter, missing gradient, state drift."""

    pass


class NonFiniteGradientError(OptimizerError):
    """A gradient contained NaN or infinity; the step was aborted before any update."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name}")


class TrainConfig(BaseModel):
    """Optimizer and schedule hyperparameters of a run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    base_lr: float = Field(default=6e-4, gt=0.0)
    llrd_decay: float = Field(default=0.6, gt=0.0, le=1.0)
    weight_decay: float = Field(default=0.05, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    batch_size: int = Field(default=2048, gt=0)
    warmup_epochs: int = Field(default=10, ge=0)
    total_epochs: int = Field(default=50, ge=0)
    ema_momentum: float = Field(default=0.9998, ge=0.0, lt=1.0)
    freeze_k: int = Field(default=0, ge=0)
    min_lr: float = Field(default=1e-6, ge=0.0)
    seed: int = Field(default=0, ge=0)
    accum_steps: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_schedule(self) -> TrainConfig:
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be smaller than"
                f" total_epochs ({self.total_epochs})"
            )
        if self.min_lr > self.base_lr:
            raise ValueError(f"min_lr {self.min_lr} exceeds base_lr {self.base_lr}")
        return self


@dataclass
class ParamGroup:
    names: list[str]
    layer_index: int
    lr_multiplier: float
    wd_enabled: bool
    frozen: bool


@dataclass
class ParamGroups:
    """Parameters grouped by (layer index, weight-decay flag) plus the Adam constants."""

    groups: list[ParamGroup]
    depth: int
    llrd_decay: float
    weight_decay: float
    beta1: float
    beta2: float
    eps: float
    _by_name: dict[str, ParamGroup] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._by_name = {name: g for g in self.groups for name in g.names}

    def group_of(self, name: str) -> ParamGroup:
        return self._by_name[name]

    def multiplier(self, layer_index: int) -> float:
        return lr_multiplier(layer_index, self.depth, self.llrd_decay)

    def trainable_names(self) -> list[str]:
        return [name for g in self.groups if not g.frozen for name in g.names]

    def frozen_names(self) -> list[str]:
        return [name for g in self.groups if g.frozen for name in g.names]


def lr_multiplier(layer_index: int, depth: int, decay: float) -> float:
    """``decay ** (depth + 1 - layer_index)``; the head (depth + 1) gets exactly 1."""

    return float(decay ** (depth + 1 - layer_index))


def build_param_groups(model: Model, cfg: TrainConfig) -> ParamGroups:
    """Group parameters for LLRD, weight-decay exemption and bottom-up freezing.

    ``freeze_k`` freezes blocks 1..k; the patch embedding and position table freeze
    with block 1, the backbone's final norm with block ``depth``. The head never
    freezes.
    """

    depth = model.config.depth
    if cfg.freeze_k > depth:
        raise OptimizerError(f"freeze_k {cfg.freeze_k} exceeds model depth {depth}")

    grouped: dict[tuple[int, bool], list[str]] = {}
    for name in model.parameters:
        layer = model.layer_index.get(name)
        if layer is None:
            raise OptimizerError(f"parameter {name} has no layer index")
        if not 0 <= layer <= depth + 1:
            raise OptimizerError(f"parameter {name} has layer index {layer} outside [0, {depth + 1}]")
        grouped.setdefault((layer, name not in model.decay_exempt), []).append(name)

    groups = [
        ParamGroup(
            names=names,
            layer_index=layer,
            lr_multiplier=lr_multiplier(layer, depth, cfg.llrd_decay),
            wd_enabled=wd,
            frozen=cfg.freeze_k >= 1 and layer <= cfg.freeze_k,
        )
        for (layer, wd), names in sorted(grouped.items(), key=lambda kv: (kv[0][0], not kv[0][1]))
    ]
    return ParamGroups(
        groups=groups,
        depth=depth,
        llrd_decay=cfg.llrd_decay,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
    )


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Base rate at optimizer step ``step`` before the group multiplier.

    Linear warmup from 0 over ``warmup_epochs * steps_per_epoch`` steps, then cosine
    from ``base_lr`` to ``min_lr``; steps at or beyond the end return ``min_lr``.
    """

    if step < 0:
        raise OptimizerError(f"step must be non-negative, got {step}")
    if steps_per_epoch <= 0:
        raise OptimizerError(f"steps_per_epoch must be positive, got {steps_per_epoch}")
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if step >= total:
        return cfg.min_lr
    if step < warmup:
        return cfg.base_lr * step / warmup
    if step == warmup:
        return cfg.base_lr
    progress = (step - warmup) / (total - warmup)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptState:
    """Adam moments of trainable parameters, step count and optional EMA shadow."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    shadow: dict[str, np.ndarray] | None = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {"opt.step": np.asarray([self.step], dtype=np.int64)}
        state.update({f"m.{k}": a for k, a in self.m.items()})
        state.update({f"v.{k}": a for k, a in self.v.items()})
        if self.shadow is not None:
            state.update({f"ema.{k}": a for k, a in self.shadow.items()})
        return state

    @classmethod
    def from_state_dict(cls, state: Mapping[str, np.ndarray]) -> OptState:
        def section(prefix: str) -> dict[str, np.ndarray]:
            return {k[len(prefix) :]: np.array(a) for k, a in state.items() if k.startswith(prefix)}

        if "opt.step" not in state:
            raise OptimizerError("optimizer state lacks opt.step")
        shadow = section("ema.")
        return cls(
            m=section("m."),
            v=section("v."),
            step=int(np.asarray(state["opt.step"]).reshape(-1)[0]),
            shadow=shadow or None,
        )


def init_opt_state(model: Model, groups: ParamGroups, cfg: TrainConfig) -> OptState:
    """Zero moments for trainable parameters; EMA shadow copies every parameter."""

    trainable = groups.trainable_names()
    params = model.parameters
    shadow = None
    if cfg.ema_momentum > 0:
        shadow = {name: p.data.copy() for name, p in params.items()}
    return OptState(
        m={name: np.zeros_like(params[name].data) for name in trainable},
        v={name: np.zeros_like(params[name].data) for name in trainable},
        shadow=shadow,
    )


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    groups: ParamGroups,
    state: OptState,
    lr_base: float,
) -> OptState:
    """One bias-corrected Adam step with decoupled decay, in place.

    Per unfrozen group at rate ``lr = lr_base * multiplier``: ``p *= 1 - lr * wd`` when
    decay is enabled, then ``p -= lr * m_hat / (sqrt(v_hat) + eps)``. All gradients are
    checked before anything is modified.
    """

    trainable = [g for g in groups.groups if not g.frozen]
    for group in trainable:
        for name in group.names:
            grad = grads.get(name)
            if grad is None:
                raise OptimizerError(f"missing gradient for trainable parameter {name}")
            if grad.shape != params[name].shape:
                raise OptimizerError(
                    f"gradient for {name} has shape {grad.shape}, expected {params[name].shape}"
                )
            if not np.all(np.isfinite(grad)):
                raise NonFiniteGradientError(name)

    state.step += 1
    t = state.step
    b1, b2, eps, wd = groups.beta1, groups.beta2, groups.eps, groups.weight_decay
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for group in trainable:
        lr = lr_base * group.lr_multiplier
        for name in group.names:
            p = params[name].data
            g = grads[name]
            m = state.m[name]
            v = state.v[name]
            if group.wd_enabled and wd > 0:
                p *= 1.0 - lr * wd
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return state


def ema_update(state: OptState, params: Mapping[str, Tensor], m: float) -> OptState:
    """``shadow <- m * shadow + (1 - m) * params``, written as ``shadow += (1 - m)(p - shadow)``."""

    if state.shadow is None:
        raise OptimizerError("EMA shadow is not initialized")
    if set(state.shadow) != set(params):
        raise OptimizerError("EMA shadow and parameters have different names")
    for name, shadow in state.shadow.items():
        p = params[name].data
        if shadow.shape != p.shape:
            raise OptimizerError(f"EMA shadow for {name} has shape {shadow.shape}, parameter {p.shape}")
        if m == 0.0:
            shadow[...] = p
        else:
            shadow += (1.0 - m) * (p - shadow)
    return state


@contextmanager
def ema_weights(model: Model, state: OptState) -> Iterator[Model]:
    """Swap the EMA shadow into ``model`` and restore the raw weights on exit."""

    if state.shadow is None:
        raise OptimizerError("EMA shadow is not initialized")
    if model.ema_active:
        raise OptimizerError("EMA weights are already swapped in")
    raw = {name: p.data for name, p in model.parameters.items()}
    model.ema_active = True
    try:
        for name, p in model.parameters.items():
            p.data = state.shadow[name].copy()
        yield model
    finally:
        for name, p in model.parameters.items():
            p.data = raw[name]
        model.ema_active = False


def with_ema_weights(model: Model, state: OptState, f: Callable[[Model], T]) -> T:
    with ema_weights(model, state):
        return f(model)


def trainable_names(groups: ParamGroups) -> list[str]:
    return groups.trainable_names()


__all__ = [
    "NonFiniteGradientError",
    "OptState",
    "OptimizerError",
    "ParamGroup",
    "ParamGroups",
    "TrainConfig",
    "adamw_step",
    "build_param_groups",
    "ema_update",
    "ema_weights",
    "init_opt_state",
    "lr_at",
    "lr_multiplier",
    "trainable_names",
    "with_ema_weights",
]

"""Vanilla Vision Transformer with a pooled LayerNorm + FC classification head.

Layout (pre-norm blocks, no class token)::

    patches -> linear embed + learnable absolute position table      layer 0
    block_i: x + DP(LS1 * attn(LN1(x)))  then  x + DP(LS2 * mlp(LN2(x)))   layer i
    final backbone LayerNorm                                          layer depth
    mean over tokens -> head LayerNorm -> head FC                     layer depth + 1

Optional relative position bias (one zero-initialized table per block, indexed by
2-D token offset) and LayerScale (unit-initialized per-channel factors) leave the
function computed at initialization unchanged.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator, Mapping
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from finetune_lab.autodiff import Tensor
from finetune_lab.autodiff import functional as F
from finetune_lab.utils import FinetuneLabError, checksum_arrays

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]

_INIT_STD = 0.02
_HEAD_INIT_STD = 0.01


class ModelConfigError(FinetuneLabError):
    """Invalid architecture description or incompatible weights."""

    pass


class ModelInputError(FinetuneLabError):
    """Images passed to forward() do not match the configured geometry."""

    pass


class ViTConfig(BaseModel):
    """Architecture description."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = Field(default=32, gt=0)
    patch_size: int = Field(default=4, gt=0)
    in_channels: int = Field(default=3, gt=0)
    dim: int = Field(default=64, gt=0)
    depth: int = Field(default=4, ge=0)
    heads: int = Field(default=4, gt=0)
    mlp_ratio: float = Field(default=4.0, gt=0)
    num_classes: int = Field(default=10, gt=1)
    use_rpe: bool = False
    use_layerscale: bool = False
    drop_path_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    pe_kind: Literal["learnable-absolute"] = "learnable-absolute"

    @model_validator(mode="after")
    def _check_divisibility(self) -> ViTConfig:
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.dim * self.mlp_ratio)))

    @property
    def patch_features(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size


def relative_position_index(grid: int) -> np.ndarray:
    """(N, N) index into a ``(2g-1)**2`` table for every pair of grid tokens."""

    coords = np.stack(np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij"))
    coords = coords.reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (grid - 1)
    return (rel[0] * (2 * grid - 1) + rel[1]).astype(np.int64)


class Model:
    """Named parameter set of a ViT, each parameter tagged with its layer index."""

    def __init__(
        self,
        config: ViTConfig,
        parameters: dict[str, Tensor],
        layer_index: dict[str, int],
        decay_exempt: set[str],
    ) -> None:
        self.config = config
        self.parameters = parameters
        self.layer_index = layer_index
        self.decay_exempt = decay_exempt
        self.rpe_index = relative_position_index(config.grid) if config.use_rpe else None
        self.ema_active = False

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.parameters.values())).dtype

    @property
    def num_layers(self) -> int:
        """Number of layer-index groups: embed, blocks, head."""

        return self.config.depth + 2

    @property
    def rpe_tables(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.parameters.items() if n.endswith("attn.rpe_table")}

    @property
    def layerscale_factors(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.parameters.items() if n.endswith((".ls1", ".ls2"))}

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.parameters.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], *, strict: bool = True) -> None:
        """Copy arrays into parameters by name, keeping each parameter's dtype."""

        if strict:
            missing = sorted(set(self.parameters) - set(state))
            unexpected = sorted(set(state) - set(self.parameters))
            if missing or unexpected:
                raise ModelConfigError(
                    f"state mismatch: missing={missing} unexpected={unexpected}"
                )
        for name, array in state.items():
            if name not in self.parameters:
                continue
            param = self.parameters[name]
            if tuple(array.shape) != param.shape:
                raise ModelConfigError(
                    f"parameter {name}: expected shape {param.shape}, got {tuple(array.shape)}"
                )
            param.data = np.array(array, dtype=param.dtype, copy=True)

    def astype(self, dtype: np.dtype | type) -> Model:
        """Return a copy of the model with every parameter cast to ``dtype``."""

        params = {
            name: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=name)
            for name, p in self.parameters.items()
        }
        return Model(self.config, params, dict(self.layer_index), set(self.decay_exempt))

    def checksum(self, *, prefix: str | None = None, exclude_prefix: str | None = None) -> str:
        """SHA-256 over the raw bytes of the selected parameters."""

        return checksum_arrays(
            (name, p.data)
            for name, p in self.parameters.items()
            if (prefix is None or name.startswith(prefix))
            and (exclude_prefix is None or not name.startswith(exclude_prefix))
        )

    def __call__(self, images, mode: Mode = "eval", step_rng=None) -> Tensor:
        return forward(self, images, mode=mode, step_rng=step_rng)


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""

    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return values * std


def build(config: ViTConfig | Mapping, init_seed: int, *, dtype: type = np.float32) -> Model:
    """Deterministically initialize a model for ``config`` from ``init_seed``."""

    if not isinstance(config, ViTConfig):
        try:
            config = ViTConfig.model_validate(config)
        except ValidationError as exc:
            raise ModelConfigError(f"invalid model config: {exc}") from exc

    rng = np.random.default_rng(init_seed)
    params: dict[str, Tensor] = {}
    layer_index: dict[str, int] = {}
    exempt: set[str] = set()
    d, hidden = config.dim, config.mlp_hidden

    def add(name: str, value: np.ndarray, layer: int, *, decay: bool) -> None:
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
        layer_index[name] = layer
        if not decay:
            exempt.add(name)

    add("patch_embed.weight", _trunc_normal(rng, (config.patch_features, d), _INIT_STD), 0, decay=True)
    add("patch_embed.bias", np.zeros(d), 0, decay=False)
    add("pos_embed", _trunc_normal(rng, (config.num_patches, d), _INIT_STD), 0, decay=False)

    table_size = (2 * config.grid - 1) ** 2
    for i in range(config.depth):
        layer = i + 1
        prefix = f"blocks.{i}"
        add(f"{prefix}.norm1.weight", np.ones(d), layer, decay=False)
        add(f"{prefix}.norm1.bias", np.zeros(d), layer, decay=False)
        add(f"{prefix}.attn.qkv.weight", _trunc_normal(rng, (d, 3 * d), _INIT_STD), layer, decay=True)
        add(f"{prefix}.attn.qkv.bias", np.zeros(3 * d), layer, decay=False)
        if config.use_rpe:
            add(f"{prefix}.attn.rpe_table", np.zeros((config.heads, table_size)), layer, decay=False)
        add(f"{prefix}.attn.proj.weight", _trunc_normal(rng, (d, d), _INIT_STD), layer, decay=True)
        add(f"{prefix}.attn.proj.bias", np.zeros(d), layer, decay=False)
        if config.use_layerscale:
            add(f"{prefix}.ls1", np.ones(d), layer, decay=False)
        add(f"{prefix}.norm2.weight", np.ones(d), layer, decay=False)
        add(f"{prefix}.norm2.bias", np.zeros(d), layer, decay=False)
        add(f"{prefix}.mlp.fc1.weight", _trunc_normal(rng, (d, hidden), _INIT_STD), layer, decay=True)
        add(f"{prefix}.mlp.fc1.bias", np.zeros(hidden), layer, decay=False)
        add(f"{prefix}.mlp.fc2.weight", _trunc_normal(rng, (hidden, d), _INIT_STD), layer, decay=True)
        add(f"{prefix}.mlp.fc2.bias", np.zeros(d), layer, decay=False)
        if config.use_layerscale:
            add(f"{prefix}.ls2", np.ones(d), layer, decay=False)

    top = max(config.depth, 0)
    add("norm.weight", np.ones(d), top, decay=False)
    add("norm.bias", np.zeros(d), top, decay=False)

    head = config.depth + 1
    add("head.norm.weight", np.ones(d), head, decay=False)
    add("head.norm.bias", np.zeros(d), head, decay=False)
    add("head.fc.weight", _trunc_normal(rng, (d, config.num_classes), _HEAD_INIT_STD), head, decay=True)
    add("head.fc.bias", np.zeros(config.num_classes), head, decay=False)

    model = Model(config, params, layer_index, exempt)
    logger.debug(
        "model_built",
        extra={"parameters": model.num_parameters(), "depth": config.depth, "dim": d},
    )
    return model


def drop_path(x: Tensor, rate: float, mode: Mode, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth on a residual branch of shape (batch, ...).

    In train mode each sample keeps its branch with probability ``1 - rate`` and kept
    branches are scaled by ``1 / (1 - rate)``; eval mode is the identity.
    """

    if not 0.0 <= rate < 1.0:
        raise ModelConfigError(f"drop path rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ModelConfigError("drop path in train mode needs a random generator")
    keep = 1.0 - rate
    batch = x.shape[0]
    mask = (rng.random(batch) < keep).astype(x.dtype) / np.asarray(keep, dtype=x.dtype)
    mask = mask.reshape((batch,) + (1,) * (x.ndim - 1))
    return F.mul(x, Tensor(mask))


def _as_image_tensor(model: Model, images) -> Tensor:
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    cfg = model.config
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if data.ndim != 4 or tuple(data.shape[1:]) != expected:
        raise ModelInputError(
            f"images must be shaped (batch, {expected[0]}, {expected[1]}, {expected[2]}),"
            f" got {tuple(data.shape)}"
        )
    if isinstance(images, Tensor) and images.dtype == model.dtype:
        return images
    return Tensor(data.astype(model.dtype))


def patchify(model: Model, images: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, num_patches, C * p * p) as reshape + transpose."""

    cfg = model.config
    b, c, p, g = images.shape[0], cfg.in_channels, cfg.patch_size, cfg.grid
    x = F.reshape(images, (b, c, g, p, g, p))
    x = F.transpose(x, (0, 2, 4, 1, 3, 5))
    return F.reshape(x, (b, g * g, c * p * p))


def _attention(model: Model, prefix: str, x: Tensor) -> Tensor:
    cfg = model.config
    params = model.parameters
    b, n, d = x.shape
    qkv = F.linear(x, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = F.reshape(qkv, (b, n, 3, cfg.heads, cfg.head_dim))
    qkv = F.transpose(qkv, (2, 0, 3, 1, 4))
    q, k, v = F.getitem(qkv, 0), F.getitem(qkv, 1), F.getitem(qkv, 2)
    bias = None
    if cfg.use_rpe:
        bias = F.gather(params[f"{prefix}.rpe_table"], model.rpe_index)
    out = F.scaled_dot_product_attention(q, k, v, bias)
    out = F.reshape(F.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return F.linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def _mlp(model: Model, prefix: str, x: Tensor) -> Tensor:
    params = model.parameters
    h = F.gelu(F.linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return F.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def _residual(
    model: Model, x: Tensor, branch: Tensor, scale: str, mode: Mode, rng
) -> Tensor:
    if model.config.use_layerscale:
        branch = F.mul(branch, model.parameters[scale])
    branch = drop_path(branch, model.config.drop_path_rate, mode, rng)
    return F.add(x, branch)


def backbone(model: Model, images, mode: Mode = "eval", step_rng=None) -> Tensor:
    """Token features (B, N, dim) after the backbone's final LayerNorm."""

    if mode == "train" and step_rng is None:
        raise ModelInputError("train mode needs a step_rng")
    params = model.parameters
    rng = step_rng
    if rng is not None and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    x = _as_image_tensor(model, images)
    x = F.linear(patchify(model, x), params["patch_embed.weight"], params["patch_embed.bias"])
    x = F.add(x, params["pos_embed"])
    for i in range(model.config.depth):
        prefix = f"blocks.{i}"
        h = F.layer_norm_affine(x, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"])
        x = _residual(model, x, _attention(model, f"{prefix}.attn", h), f"{prefix}.ls1", mode, rng)
        h = F.layer_norm_affine(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"])
        x = _residual(model, x, _mlp(model, f"{prefix}.mlp", h), f"{prefix}.ls2", mode, rng)
    return F.layer_norm_affine(x, params["norm.weight"], params["norm.bias"])


def classify_tokens(model: Model, tokens: Tensor) -> Tensor:
    """Average-pool token features, then head LayerNorm and FC."""

    params = model.parameters
    pooled = F.mean(tokens, axis=1)
    pooled = F.layer_norm_affine(pooled, params["head.norm.weight"], params["head.norm.bias"])
    return F.linear(pooled, params["head.fc.weight"], params["head.fc.bias"])


def forward(model: Model, images, mode: Mode = "eval", step_rng=None) -> Tensor:
    """Logits (batch, num_classes). Eval mode never draws random numbers; train mode
    requires ``step_rng``.
    """

    if mode not in ("train", "eval"):
        raise ModelInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    return classify_tokens(model, backbone(model, images, mode, step_rng))


def load_backbone(model: Model, path: str | Path) -> int:
    """Initialize every non-head parameter from an archive; the head stays fresh.

    Returns the number of parameters loaded.
    """

    from finetune_lab.archive import read_archive

    state = read_archive(path)
    backbone_state = {
        name: array
        for name, array in state.items()
        if name in model.parameters and not name.startswith("head.")
    }
    missing = sorted(
        n for n in model.parameters if not n.startswith("head.") and n not in backbone_state
    )
    if missing:
        raise ModelConfigError(f"archive {path} lacks backbone parameters: {missing}")
    model.load_state_dict(backbone_state, strict=False)
    logger.info("backbone_loaded", extra={"path": str(path), "parameters": len(backbone_state)})
    return len(backbone_state)


__all__ = [
    "Model",
    "ModelConfigError",
    "ModelInputError",
    "ViTConfig",
    "backbone",
    "build",
    "classify_tokens",
    "drop_path",
    "forward",
    "load_backbone",
    "patchify",
    "relative_position_index",
]

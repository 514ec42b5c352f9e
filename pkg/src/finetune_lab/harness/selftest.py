"""Fast invariant checks and the finite-difference gradient check behind the CLI."""

from __future__ import annotations

import logging
import math
import tempfile
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from finetune_lab.archive import read_archive, write_archive
from finetune_lab.augment import cutmix_batch, sample_crop_box, smooth_targets
from finetune_lab.autodiff import GradCheckError, Tensor, check_gradients
from finetune_lab.autodiff import functional as F
from finetune_lab.model import Model, ViTConfig, build, forward
from finetune_lab.optim import (
    OptState,
    ParamGroup,
    ParamGroups,
    TrainConfig,
    adamw_step,
    ema_update,
    lr_at,
    lr_multiplier,
    with_ema_weights,
)
from finetune_lab.utils import FinetuneLabError

logger = logging.getLogger(__name__)

GRAD_RTOL = 1e-4
GRAD_SEEDS = 20


class SelfTestError(FinetuneLabError):
    """An invariant did not hold."""

    pass


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'ok  ' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise SelfTestError(message)


# --- gradient checks -------------------------------------------------------------


def _projection(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.standard_normal(shape)


def _kernel_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], dict[str, np.ndarray]]]:
    """One scalar-valued projection per kernel; fixed projections make every output coordinate count."""

    def project(out_shape: tuple[int, ...]) -> Callable[[Tensor], Tensor]:
        weights = _projection(rng, out_shape)
        return lambda out: F.sum(F.mul(out, weights))

    p_bcast = project((3, 4))
    p_mm = project((2, 3, 5))
    p_act = project((4, 6))
    p_sum = project((4,))
    p_reshape = project((6, 4))
    p_transpose = project((4, 3, 2))
    p_slice = project((3, 2))
    p_gather = project((2, 4, 4))
    logits_targets = rng.dirichlet(np.ones(5), size=4)
    gather_index = rng.integers(0, 9, size=(4, 4))

    return {
        "add": (lambda a, b: p_bcast(F.add(a, b)), {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}),
        "mul": (lambda a, b: p_bcast(F.mul(a, b)), {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 1))}),
        "matmul": (
            lambda a, b: p_mm(F.matmul(a, b)),
            {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((4, 5))},
        ),
        "gelu": (lambda x: p_act(F.gelu(x)), {"x": rng.standard_normal((4, 6))}),
        "layernorm": (lambda x: p_act(F.layernorm(x)), {"x": rng.standard_normal((4, 6))}),
        "softmax": (lambda x: p_act(F.softmax(x, axis=-1)), {"x": rng.standard_normal((4, 6))}),
        "sum": (lambda x: p_sum(F.sum(x, axis=1)), {"x": rng.standard_normal((4, 6))}),
        "mean": (lambda x: p_sum(F.mean(x, axis=(1, 2))), {"x": rng.standard_normal((4, 2, 3))}),
        "reshape": (lambda x: p_reshape(F.reshape(x, (6, 4))), {"x": rng.standard_normal((4, 6))}),
        "transpose": (lambda x: p_transpose(F.transpose(x, (2, 0, 1))), {"x": rng.standard_normal((3, 2, 4))}),
        "getitem": (
            lambda x: p_slice(F.getitem(x, (slice(None), slice(1, 3)))),
            {"x": rng.standard_normal((3, 5))},
        ),
        "gather": (lambda t: p_gather(F.gather(t, gather_index)), {"t": rng.standard_normal((2, 9))}),
        "cross_entropy": (lambda x: F.cross_entropy(x, logits_targets), {"x": rng.standard_normal((4, 5))}),
    }


def tiny_vit_config() -> ViTConfig:
    return ViTConfig(
        image_size=8,
        patch_size=4,
        dim=8,
        depth=2,
        heads=2,
        num_classes=3,
        use_rpe=True,
        use_layerscale=True,
    )


def _vit_case(seed: int) -> tuple[Callable[..., Tensor], dict[str, np.ndarray]]:
    """Full loss of a tiny float64 ViT as a function of every parameter."""

    rng = np.random.default_rng(seed)
    template = build(tiny_vit_config(), init_seed=seed, dtype=np.float64)
    images = rng.standard_normal((2, 3, 8, 8))
    targets = rng.dirichlet(np.ones(3), size=2)
    inputs = {name: 0.5 * rng.standard_normal(p.shape) for name, p in template.parameters.items()}

    def loss(**params: Tensor) -> Tensor:
        model = Model(template.config, params, template.layer_index, template.decay_exempt)
        return F.cross_entropy(forward(model, images, "eval"), targets)

    return loss, inputs


def grad_check(seeds: int = GRAD_SEEDS, *, rtol: float = GRAD_RTOL, max_coords: int = 6) -> list[CheckResult]:
    """Worst relative error per kernel and for the tiny ViT over ``seeds`` random draws."""

    worst: dict[str, float] = {}
    for seed in range(seeds):
        cases = _kernel_cases(np.random.default_rng(seed))
        cases["vit"] = _vit_case(seed)
        for name, (f, inputs) in cases.items():
            errors = check_gradients(f, inputs, max_coords=max_coords, seed=seed)
            worst[name] = max(worst.get(name, 0.0), *errors.values())
    results = [
        CheckResult(name, error < rtol, f"worst relative error {error:.2e} over {seeds} seeds")
        for name, error in worst.items()
    ]
    logger.info("grad_check_finished", extra={"worst": worst})
    return results


# --- invariant suite -------------------------------------------------------------


def _check_llrd() -> str:
    depth, decay = 12, 0.6
    for layer in range(depth + 2):
        _require(lr_multiplier(layer, depth, decay) == decay ** (depth + 1 - layer), f"multiplier of layer {layer}")
    for layer in range(depth + 1):
        ratio = lr_multiplier(layer, depth, decay) / lr_multiplier(layer + 1, depth, decay)
        _require(math.isclose(ratio, decay, rel_tol=1e-12), f"ratio between layers {layer} and {layer + 1}")
    _require(lr_multiplier(depth + 1, depth, decay) == 1.0, "head multiplier is not 1")
    return "multipliers d^(depth+1-l) for depth 12, d 0.6"


def _check_schedule() -> str:
    cfg = TrainConfig(base_lr=6e-4, min_lr=1e-6, warmup_epochs=10, total_epochs=50)
    spe = 7
    _require(lr_at(0, spe, cfg) == 0.0, "lr(0) != 0")
    _require(lr_at(10 * spe, spe, cfg) == cfg.base_lr, "lr(end of warmup) != base_lr")
    _require(lr_at(50 * spe, spe, cfg) == cfg.min_lr, "lr(end) != min_lr")
    mid = lr_at(30 * spe, spe, cfg)
    _require(abs(mid - (cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr))) < 1e-12, "cosine midpoint")
    return "warmup start, warmup end, midpoint and final step"


def _scalar_groups(lr_wd: float, b1: float, b2: float, eps: float) -> ParamGroups:
    group = ParamGroup(names=["w"], layer_index=1, lr_multiplier=1.0, wd_enabled=True, frozen=False)
    return ParamGroups([group], depth=0, llrd_decay=1.0, weight_decay=lr_wd, beta1=b1, beta2=b2, eps=eps)


def _check_adamw() -> str:
    lr, wd, b1, b2, eps = 1e-3, 0.05, 0.9, 0.999, 1e-8
    p0, g = 0.7, 0.3
    groups = _scalar_groups(wd, b1, b2, eps)
    params = {"w": Tensor(np.array([p0]))}
    state = OptState(m={"w": np.zeros(1)}, v={"w": np.zeros(1)})
    adamw_step(params, {"w": np.array([g])}, groups, state, lr)

    m = (1 - b1) * g
    v = (1 - b2) * g * g
    expected = p0 * (1 - lr * wd) - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
    _require(abs(float(params["w"].data[0]) - expected) < 1e-12, "one-step AdamW update")

    params = {"w": Tensor(np.array([p0]))}
    state = OptState(m={"w": np.zeros(1)}, v={"w": np.zeros(1)})
    for _ in range(3):
        before = float(params["w"].data[0])
        adamw_step(params, {"w": np.zeros(1)}, groups, state, lr)
        _require(abs(float(params["w"].data[0]) - before * (1 - lr * wd)) < 1e-15, "zero-grad decay factor")
    return "bias-corrected step and decoupled decay on a scalar"


def _check_ema() -> str:
    m, steps = 0.9998, 1000
    s0, p = 0.25, 1.5
    params = {"w": Tensor(np.array([p]))}
    state = OptState(m={}, v={}, shadow={"w": np.array([s0])})
    for _ in range(steps):
        ema_update(state, params, m)
    expected = m**steps * s0 + (1 - m**steps) * p
    _require(abs(float(state.shadow["w"][0]) - expected) < 1e-6, "EMA closed form after 1000 updates")

    model = build(tiny_vit_config(), init_seed=0, dtype=np.float64)
    before = model.checksum()
    shadow = {name: t.data + 1.0 for name, t in model.parameters.items()}
    inside = with_ema_weights(model, OptState(m={}, v={}, shadow=shadow), lambda mdl: mdl.checksum())
    _require(inside != before, "EMA weights were not swapped in")
    _require(model.checksum() == before, "raw weights not restored bit-exactly")
    return "closed form at m=0.9998 and bit-exact restore"


def _check_archive() -> str:
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(5),
        "c": np.arange(4, dtype=np.int64),
    }
    with tempfile.TemporaryDirectory() as tmp:
        path = write_archive(Path(tmp) / "roundtrip.ftra", tensors)
        loaded = read_archive(path)
    _require(list(loaded) == list(tensors), "archive names or order changed")
    for name, array in tensors.items():
        _require(loaded[name].dtype == array.dtype and np.array_equal(loaded[name], array), f"tensor {name} changed")
    return "names, order, dtypes and bytes preserved"


def _check_label_math() -> str:
    rng = np.random.default_rng(0)
    targets = smooth_targets(rng.integers(0, 10, size=64), 10, 0.1)
    _require(np.all(np.abs(targets.sum(axis=1) - 1.0) <= 1e-12), "smoothed targets do not sum to 1")

    images = rng.standard_normal((8, 3, 16, 16)).astype(np.float32)
    onehot = smooth_targets(np.arange(8) % 4, 4, 0.0)
    for _ in range(50):
        mixed = cutmix_batch(images, onehot, 1.0, rng)
        y1, y2, x1, x2 = mixed.box
        pasted = (y2 - y1) * (x2 - x1) / (16 * 16)
        _require(mixed.lambda_used == 1.0 - pasted, "CutMix lambda differs from the pasted fraction")

    for _ in range(2000):
        _, _, h, w = sample_crop_box(40, 30, (0.08, 1.0), rng)
        _require(0.08 <= h * w / 1200 <= 1.0, "crop area fraction outside [0.08, 1]")
    return "smoothing sums, CutMix lambda, crop area bounds"


INVARIANTS: dict[str, Callable[[], str]] = {
    "llrd": _check_llrd,
    "schedule": _check_schedule,
    "adamw": _check_adamw,
    "ema": _check_ema,
    "archive": _check_archive,
    "label_math": _check_label_math,
}


def run_selftest(report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """Run the invariant suite in order and stop at the first failure."""

    results = []
    for name, check in INVARIANTS.items():
        try:
            result = CheckResult(name, True, check())
        except (SelfTestError, GradCheckError) as exc:
            result = CheckResult(name, False, str(exc))
        results.append(result)
        if report is not None:
            report(result)
        if not result.passed:
            logger.error("selftest_failed", extra={"check": name, "detail": result.detail})
            break
    return results


__all__ = [
    "CheckResult",
    "INVARIANTS",
    "SelfTestError",
    "grad_check",
    "run_selftest",
    "tiny_vit_config",
]

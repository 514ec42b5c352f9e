"""Epoch loop: augment, forward, soft-target cross-entropy, backward, AdamW + LLRD, EMA.

Raw and EMA weights are both validated after every epoch. Checkpoints hold the full
training state; because every random stream is keyed by (seed, epoch, index), resuming
from a checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np

from finetune_lab.archive import read_archive, write_archive
from finetune_lab.augment import AugPolicy, BatchLoader, eval_arrays
from finetune_lab.autodiff import Tensor, backward, no_grad
from finetune_lab.autodiff import functional as F
from finetune_lab.context import reset_epoch, set_epoch
from finetune_lab.data import Dataset
from finetune_lab.model import Model, forward
from finetune_lab.optim import (
    OptState,
    ParamGroups,
    TrainConfig,
    adamw_step,
    build_param_groups,
    ema_update,
    ema_weights,
    init_opt_state,
    lr_at,
)
from finetune_lab.utils import FinetuneLabError, derive_rng

logger = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "train_loss", "val_acc_raw", "val_acc_ema", "lr")
DROP_PATH_STREAM = "drop_path"
EVAL_BATCH_SIZE = 256


class TrainingDivergedError(FinetuneLabError):
    """Loss or logits became non-finite."""

    def __init__(self, message: str, *, epoch: int | None = None, step: int | None = None):
        self.epoch = epoch
        self.step = step
        where = "" if epoch is None else f" (epoch {epoch}, step {step})"
        super().__init__(message + where)


class EmptyDatasetError(FinetuneLabError):
    """Training or evaluation was asked to run on zero samples."""

    pass


class CheckpointError(FinetuneLabError):
    """Checkpoint is incomplete or belongs to a different configuration."""

    pass


@dataclass(frozen=True)
class MetricRecord:
    epoch: int
    train_loss: float
    val_acc_raw: float
    val_acc_ema: float
    lr: float
    train_acc: float = float("nan")

    def __post_init__(self) -> None:
        for name in ("val_acc_raw", "val_acc_ema"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def csv_row(self) -> list[str]:
        return [
            str(self.epoch),
            f"{self.train_loss:.8f}",
            f"{self.val_acc_raw:.6f}",
            f"{self.val_acc_ema:.6f}",
            f"{self.lr:.8e}",
        ]

    def as_array(self) -> np.ndarray:
        return np.asarray(
            [self.epoch, self.train_loss, self.val_acc_raw, self.val_acc_ema, self.lr, self.train_acc],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, row: np.ndarray) -> MetricRecord:
        epoch, loss, raw, ema, lr, acc = (float(x) for x in row)
        return cls(int(epoch), loss, raw, ema, lr, acc)


MetricSink = Callable[[MetricRecord], None]


class CsvMetricSink:
    """Write one CSV row per epoch, flushed immediately so partial runs stay readable."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle: TextIO = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(CSV_HEADER)
        self._handle.flush()

    def __call__(self, record: MetricRecord) -> None:
        self._writer.writerow(record.csv_row())
        self._handle.flush()

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> CsvMetricSink:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def read_metrics_csv(path: str | Path) -> list[MetricRecord]:
    """Parse a metrics CSV written by :class:`CsvMetricSink`."""

    path = Path(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        records = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{line_no}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                epoch, loss, raw, ema, lr = int(row[0]), *(float(x) for x in row[1:])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
            records.append(MetricRecord(epoch, loss, raw, ema, lr))
    return records


@dataclass
class FitResult:
    records: list[MetricRecord] = field(default_factory=list)
    state: OptState | None = None
    groups: ParamGroups | None = None

    def _best(self, attr: str) -> tuple[float, int]:
        if not self.records:
            return float("nan"), -1
        best = max(self.records, key=lambda r: (getattr(r, attr), -r.epoch))
        return getattr(best, attr), best.epoch

    @property
    def best_val_acc_raw(self) -> float:
        return self._best("val_acc_raw")[0]

    @property
    def best_epoch_raw(self) -> int:
        return self._best("val_acc_raw")[1]

    @property
    def best_val_acc_ema(self) -> float:
        return self._best("val_acc_ema")[0]

    @property
    def best_epoch_ema(self) -> int:
        return self._best("val_acc_ema")[1]

    def summary(self) -> str:
        if not self.records:
            return "epochs=0 best_acc_raw=nan best_acc_ema=nan"
        return (
            f"epochs={len(self.records)}"
            f" best_acc_raw={self.best_val_acc_raw:.4f}@{self.best_epoch_raw}"
            f" best_acc_ema={self.best_val_acc_ema:.4f}@{self.best_epoch_ema}"
        )


def loss(logits: Tensor, soft_targets) -> Tensor:
    """Mean over the batch of ``-<target, log_softmax(logits)>``."""

    if not np.all(np.isfinite(logits.data)):
        raise TrainingDivergedError("non-finite logits")
    return F.cross_entropy(logits, soft_targets)


def _accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    hits = 0
    with no_grad():
        for start in range(0, len(labels), EVAL_BATCH_SIZE):
            logits = forward(model, images[start : start + EVAL_BATCH_SIZE], "eval")
            hits += int((logits.data.argmax(axis=1) == labels[start : start + EVAL_BATCH_SIZE]).sum())
    return hits / len(labels)


def evaluate(
    model: Model,
    dataset: Dataset,
    use_ema: bool = False,
    *,
    state: OptState | None = None,
    policy: AugPolicy | None = None,
    images: np.ndarray | None = None,
    workers: int = 0,
) -> float:
    """Top-1 accuracy under the eval transform, with raw or EMA weights.

    ``images`` may carry precomputed eval-transformed inputs for ``dataset``.
    """

    if len(dataset) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    if images is None:
        images = eval_arrays(dataset, policy or AugPolicy(), model.config.image_size, workers=workers)
    if not use_ema:
        return _accuracy(model, images, dataset.labels)
    if state is None:
        raise FinetuneLabError("EMA evaluation needs the optimizer state holding the shadow")
    with ema_weights(model, state):
        return _accuracy(model, images, dataset.labels)


@dataclass
class Checkpoint:
    """Everything needed to continue a run: weights, moments, shadow and progress."""

    params: dict[str, np.ndarray]
    state: OptState
    epoch: int
    seed: int
    config_hash: str
    history: list[MetricRecord]

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {f"param.{k}": v for k, v in self.params.items()}
        arrays.update(self.state.state_dict())
        arrays["meta.epoch"] = np.asarray([self.epoch], dtype=np.int64)
        arrays["meta.seed"] = np.asarray([self.seed], dtype=np.int64)
        arrays["meta.config_hash"] = np.frombuffer(self.config_hash.encode("ascii"), dtype=np.uint8)
        arrays["meta.history"] = (
            np.stack([r.as_array() for r in self.history])
            if self.history
            else np.zeros((0, 6), dtype=np.float64)
        )
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> Checkpoint:
        required = ("meta.epoch", "meta.seed", "meta.config_hash", "meta.history", "opt.step")
        missing = [k for k in required if k not in arrays]
        if missing:
            raise CheckpointError(f"checkpoint lacks {missing}")
        return cls(
            params={k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")},
            state=OptState.from_state_dict(arrays),
            epoch=int(arrays["meta.epoch"][0]),
            seed=int(arrays["meta.seed"][0]),
            config_hash=arrays["meta.config_hash"].tobytes().decode("ascii"),
            history=[MetricRecord.from_array(row) for row in arrays["meta.history"]],
        )

    def save(self, path: str | Path) -> Path:
        return write_archive(path, self.to_arrays())

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_arrays(read_archive(path))


def _set_trainable(model: Model, groups: ParamGroups) -> None:
    trainable = set(groups.trainable_names())
    for name, p in model.parameters.items():
        p.requires_grad = name in trainable
        p.zero_grad()


def fit(
    model: Model,
    datasets: tuple[Dataset, Dataset],
    train_cfg: TrainConfig,
    aug_policy: AugPolicy,
    sink: MetricSink | None = None,
    *,
    workers: int = 0,
    prefetch: int = 4,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 1,
    resume_from: str | Path | None = None,
    config_hash: str = "",
    stop_after_epoch: int | None = None,
) -> FitResult:
    """Fine-tune ``model`` in place and return one :class:`MetricRecord` per epoch.

    ``stop_after_epoch`` ends the run early after that many epochs in total (used to
    interrupt and resume); checkpoints are written every ``checkpoint_every`` epochs
    and after the last one.
    """

    train, val = datasets
    if train_cfg.total_epochs == 0:
        logger.info("fit_skipped", extra={"reason": "total_epochs is 0"})
        return FitResult()
    if len(train) == 0 or len(val) == 0:
        raise EmptyDatasetError(f"train has {len(train)} samples, val has {len(val)}")

    groups = build_param_groups(model, train_cfg)
    state = init_opt_state(model, groups, train_cfg)
    records: list[MetricRecord] = []
    start_epoch = 0
    if resume_from is not None:
        ckpt = Checkpoint.load(resume_from)
        if config_hash and ckpt.config_hash != config_hash:
            raise CheckpointError(
                f"checkpoint {resume_from} was written for config {ckpt.config_hash[:12]},"
                f" not {config_hash[:12]}"
            )
        model.load_state_dict(ckpt.params)
        state = ckpt.state
        start_epoch = ckpt.epoch
        records = list(ckpt.history)
        logger.info("fit_resumed", extra={"path": str(resume_from), "epoch": start_epoch})
    if sink is not None:
        for record in records:
            sink(record)

    _set_trainable(model, groups)
    trainable = groups.trainable_names()
    image_size = model.config.image_size
    micro_size = max(1, train_cfg.batch_size // train_cfg.accum_steps)
    micro_per_epoch = math.ceil(len(train) / micro_size)
    steps_per_epoch = math.ceil(micro_per_epoch / train_cfg.accum_steps)
    val_images = eval_arrays(val, aug_policy, image_size, workers=workers)
    end_epoch = train_cfg.total_epochs if stop_after_epoch is None else min(stop_after_epoch, train_cfg.total_epochs)

    logger.info(
        "fit_started",
        extra={
            "train_samples": len(train),
            "val_samples": len(val),
            "steps_per_epoch": steps_per_epoch,
            "trainable_parameters": sum(model.parameters[n].size for n in trainable),
            "start_epoch": start_epoch,
        },
    )

    for epoch in range(start_epoch, end_epoch):
        token = set_epoch(epoch)
        try:
            record = _train_epoch(
                model, train, val, val_images, train_cfg, aug_policy, groups, state,
                epoch=epoch, micro_size=micro_size, steps_per_epoch=steps_per_epoch,
                workers=workers, prefetch=prefetch,
            )
            records.append(record)
            if sink is not None:
                sink(record)
            logger.info(
                "epoch_complete",
                extra={
                    "train_loss": record.train_loss,
                    "train_acc": record.train_acc,
                    "val_acc_raw": record.val_acc_raw,
                    "val_acc_ema": record.val_acc_ema,
                    "lr": record.lr,
                },
            )
            done = epoch + 1
            if checkpoint_path is not None and (done % checkpoint_every == 0 or done == end_epoch):
                Checkpoint(
                    params=model.state_dict(),
                    state=state,
                    epoch=done,
                    seed=train_cfg.seed,
                    config_hash=config_hash,
                    history=records,
                ).save(checkpoint_path)
        finally:
            reset_epoch(token)

    for p in model.parameters.values():
        p.zero_grad()
    result = FitResult(records=records, state=state, groups=groups)
    logger.info("fit_finished", extra={"summary": result.summary()})
    return result


def _train_epoch(
    model: Model,
    train: Dataset,
    val: Dataset,
    val_images: np.ndarray,
    cfg: TrainConfig,
    policy: AugPolicy,
    groups: ParamGroups,
    state: OptState,
    *,
    epoch: int,
    micro_size: int,
    steps_per_epoch: int,
    workers: int,
    prefetch: int,
) -> MetricRecord:
    params = model.parameters
    trainable = groups.trainable_names()
    loader = BatchLoader(
        train, policy, model.config.image_size, micro_size,
        seed=cfg.seed, epoch=epoch, workers=workers, prefetch=prefetch,
    )
    loss_sum = 0.0
    hits = 0
    seen = 0
    pending = 0
    pending_weight = 0.0
    lr = lr_at(state.step, steps_per_epoch, cfg)
    last = len(loader) - 1

    for batch in loader:
        step_rng = derive_rng(DROP_PATH_STREAM, cfg.seed, epoch, batch.index)
        logits = forward(model, batch.images, "train", step_rng)
        value = loss(logits, batch.soft_targets)
        if not np.isfinite(value.item()):
            raise TrainingDivergedError("non-finite loss", epoch=epoch, step=state.step)
        # gradients are weighted per sample across uneven micro-batches
        weight = len(batch) / micro_size
        if trainable:
            backward(value if weight == 1.0 else value * weight)
        loss_sum += value.item() * len(batch)
        hits += int((logits.data.argmax(axis=1) == batch.soft_targets.argmax(axis=1)).sum())
        seen += len(batch)
        pending += 1
        pending_weight += weight

        if pending == cfg.accum_steps or batch.index == last:
            lr = lr_at(state.step, steps_per_epoch, cfg)
            if trainable:
                grads = {name: params[name].grad / pending_weight for name in trainable}
                adamw_step(params, grads, groups, state, lr)
                for name in trainable:
                    params[name].zero_grad()
            else:
                state.step += 1
            if state.shadow is not None:
                ema_update(state, params, cfg.ema_momentum)
            pending = 0
            pending_weight = 0.0

    raw = _accuracy(model, val_images, val.labels)
    if state.shadow is not None:
        with ema_weights(model, state):
            ema = _accuracy(model, val_images, val.labels)
    else:
        ema = raw
    return MetricRecord(
        epoch=epoch,
        train_loss=loss_sum / seen,
        val_acc_raw=raw,
        val_acc_ema=ema,
        lr=lr,
        train_acc=hits / seen,
    )


__all__ = [
    "CSV_HEADER",
    "Checkpoint",
    "CheckpointError",
    "CsvMetricSink",
    "EmptyDatasetError",
    "FitResult",
    "MetricRecord",
    "MetricSink",
    "TrainingDivergedError",
    "evaluate",
    "fit",
    "loss",
    "read_metrics_csv",
]

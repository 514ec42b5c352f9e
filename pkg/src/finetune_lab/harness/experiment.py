"""Single runs: build data and model from a :class:`RunConfig`, fit, write artifacts."""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from finetune_lab.augment.transforms import EVAL_RESIZE_RATIO
from finetune_lab.config import get_settings
from finetune_lab.context import reset_run_id, set_run_id
from finetune_lab.data import Dataset, load_folder, synth_dataset
from finetune_lab.harness.runconfig import RunConfig
from finetune_lab.model import build, load_backbone
from finetune_lab.trainer import CsvMetricSink, FitResult, fit

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.ftra"
SUMMARY_FILE = "summary.json"


@dataclass(frozen=True)
class RunSummary:
    output_dir: Path
    config_hash: str
    epochs: int
    tuned_layers: int
    best_val_acc_raw: float
    best_epoch_raw: int
    best_val_acc_ema: float
    best_epoch_ema: int
    train_acc: tuple[float, ...] = ()

    def line(self) -> str:
        if self.epochs == 0:
            return f"{self.output_dir}: epochs=0 best_acc_raw=nan best_acc_ema=nan"
        return (
            f"{self.output_dir}: epochs={self.epochs}"
            f" best_acc_raw={self.best_val_acc_raw:.4f}@{self.best_epoch_raw}"
            f" best_acc_ema={self.best_val_acc_ema:.4f}@{self.best_epoch_ema}"
        )


def _finite_or_none(value: float) -> float | None:
    return None if math.isnan(value) else value


def resolve_output_dir(config: RunConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    return get_settings().output_root / f"run-{config.config_hash()[:12]}"


def load_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    """Train and validation splits for ``config`` (synthetic textures or class folders)."""

    if config.dataset == "synthetic":
        train = synth_dataset(
            config.num_classes, config.train_per_class, config.image_size, config.dataset_seed, split="train"
        )
        val = synth_dataset(
            config.num_classes, config.val_per_class, config.image_size, config.dataset_seed, split="val"
        )
    else:
        root = Path(config.dataset_root or "")
        source_size = math.ceil(config.image_size * EVAL_RESIZE_RATIO)
        train = load_folder(root / "train", source_size, split="train")
        val = load_folder(root / "val", source_size, split="val")
    if config.train_subset_per_class is not None:
        train = train.subset(config.train_subset_per_class)
    return train, val


def run_experiment(
    config: RunConfig,
    *,
    workers: int | None = None,
    prefetch: int | None = None,
    resume: bool = False,
) -> RunSummary:
    """Fit one configuration and write ``metrics.csv``, ``checkpoint.ftra`` and ``summary.json``.

    With ``resume`` an existing checkpoint in the output directory is continued.
    """

    settings = get_settings()
    workers = settings.workers if workers is None else workers
    prefetch = settings.prefetch if prefetch is None else prefetch
    config_hash = config.config_hash()
    out = resolve_output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / CHECKPOINT_FILE

    token = set_run_id(config_hash[:12])
    try:
        logger.info("run_started", extra={"output_dir": str(out), "seed": config.random_seed})
        train, val = load_datasets(config)
        model = build(config.vit_config(), init_seed=config.random_seed)
        if config.pretrained_backbone:
            load_backbone(model, config.pretrained_backbone)

        resume_from = checkpoint if resume and checkpoint.exists() else None
        with CsvMetricSink(out / METRICS_FILE) as sink:
            result = fit(
                model,
                (train, val),
                config.train_config(),
                config.aug_policy(),
                sink,
                workers=workers,
                prefetch=prefetch,
                checkpoint_path=checkpoint,
                checkpoint_every=config.checkpoint_every,
                resume_from=resume_from,
                config_hash=config_hash,
            )
        summary = _summarize(config, config_hash, out, result)
        _write_summary(out / SUMMARY_FILE, config, summary)
        logger.info("run_finished", extra={"summary": summary.line()})
        return summary
    finally:
        reset_run_id(token)


def _summarize(config: RunConfig, config_hash: str, out: Path, result: FitResult) -> RunSummary:
    return RunSummary(
        output_dir=out,
        config_hash=config_hash,
        epochs=len(result.records),
        tuned_layers=config.tuned_layers,
        best_val_acc_raw=result.best_val_acc_raw,
        best_epoch_raw=result.best_epoch_raw,
        best_val_acc_ema=result.best_val_acc_ema,
        best_epoch_ema=result.best_epoch_ema,
        train_acc=tuple(r.train_acc for r in result.records),
    )


def _write_summary(path: Path, config: RunConfig, summary: RunSummary) -> None:
    payload: dict[str, Any] = {
        "config": config.model_dump(mode="json"),
        "config_hash": summary.config_hash,
        "epochs": summary.epochs,
        "tuned_layers": summary.tuned_layers,
        "best_val_acc_raw": _finite_or_none(summary.best_val_acc_raw),
        "best_epoch_raw": summary.best_epoch_raw,
        "best_val_acc_ema": _finite_or_none(summary.best_val_acc_ema),
        "best_epoch_ema": summary.best_epoch_ema,
        "train_acc": [_finite_or_none(a) for a in summary.train_acc],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_summary(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class SeedReport:
    runs: list[RunSummary]

    def _stats(self, attr: str) -> tuple[float, float]:
        values = [getattr(r, attr) for r in self.runs if not math.isnan(getattr(r, attr))]
        if not values:
            return float("nan"), float("nan")
        spread = statistics.pstdev(values) if len(values) > 1 else 0.0
        return statistics.fmean(values), spread

    def line(self) -> str:
        raw_mean, raw_std = self._stats("best_val_acc_raw")
        ema_mean, ema_std = self._stats("best_val_acc_ema")
        return (
            f"seeds={len(self.runs)}"
            f" best_acc_raw={raw_mean:.4f}+-{raw_std:.4f}"
            f" best_acc_ema={ema_mean:.4f}+-{ema_std:.4f}"
        )


def run_seeds(config: RunConfig, seeds: list[int], **kwargs: Any) -> SeedReport:
    """Repeat ``config`` once per seed under ``<output>/seed-<s>``."""

    if not seeds:
        raise ValueError("at least one seed is required")
    root = resolve_output_dir(config)
    runs = []
    for seed in seeds:
        seeded = config.model_copy(update={"random_seed": seed, "output_dir": str(root / f"seed-{seed}")})
        runs.append(run_experiment(seeded, **kwargs))
    report = SeedReport(runs)
    logger.info("seeds_finished", extra={"summary": report.line()})
    return report


__all__ = [
    "CHECKPOINT_FILE",
    "METRICS_FILE",
    "SUMMARY_FILE",
    "RunSummary",
    "SeedReport",
    "load_datasets",
    "read_summary",
    "resolve_output_dir",
    "run_experiment",
    "run_seeds",
]

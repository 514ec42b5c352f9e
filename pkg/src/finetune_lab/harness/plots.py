"""Epoch-accuracy curves, overlays and the tuned-layers curve of a freeze sweep."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from finetune_lab.harness.experiment import SUMMARY_FILE, read_summary  # noqa: E402
from finetune_lab.trainer import MetricRecord, read_metrics_csv  # noqa: E402
from finetune_lab.utils import FinetuneLabError  # noqa: E402

logger = logging.getLogger(__name__)

OVERLAY_FILE = "overlay.png"
PARTIAL_FILE = "partial_finetuning.png"


class PlotError(FinetuneLabError):
    """Metrics input was malformed or empty; nothing was written."""

    pass


def load_series(path: str | Path) -> list[MetricRecord]:
    path = Path(path)
    try:
        records = read_metrics_csv(path)
    except (OSError, ValueError) as exc:
        raise PlotError(f"cannot read metrics {path}: {exc}") from exc
    if not records:
        raise PlotError(f"{path} holds no epochs")
    return records


def _label(path: Path) -> str:
    return path.parent.name if path.stem == "metrics" and path.parent.name else path.stem


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_run(records: Sequence[MetricRecord], out_path: str | Path, *, title: str = "") -> Path:
    """Validation accuracy per epoch with and without EMA."""

    epochs = [r.epoch for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [100.0 * r.val_acc_ema for r in records], label="w/ EMA")
    ax.plot(epochs, [100.0 * r.val_acc_raw for r in records], label="w/o EMA")
    ax.set_xlabel("epoch")
    ax.set_ylabel("val top-1 (%)")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, Path(out_path))


def plot_overlay(series: dict[str, Sequence[MetricRecord]], out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, records in series.items():
        epochs = [r.epoch for r in records]
        (line,) = ax.plot(epochs, [100.0 * r.val_acc_ema for r in records], label=f"{name} (EMA)")
        ax.plot(
            epochs,
            [100.0 * r.val_acc_raw for r in records],
            linestyle="--",
            color=line.get_color(),
            label=f"{name} (raw)",
        )
    ax.set_xlabel("epoch")
    ax.set_ylabel("val top-1 (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    return _save(fig, Path(out_path))


def plot_partial(points: Sequence[tuple[int, float]], out_path: str | Path) -> Path:
    """Best accuracy against the number of tuned blocks; 0 is linear probing."""

    ordered = sorted(points)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([k for k, _ in ordered], [100.0 * acc for _, acc in ordered], marker="o")
    ax.set_xlabel("tuned layers")
    ax.set_ylabel("best val top-1 (%)")
    ax.set_xticks([k for k, _ in ordered])
    ax.grid(alpha=0.3)
    return _save(fig, Path(out_path))


def _partial_points(paths: Sequence[Path], series: dict[str, list[MetricRecord]]) -> list[tuple[int, float]]:
    points = []
    for path, records in zip(paths, series.values()):
        summary_path = path.parent / SUMMARY_FILE
        try:
            tuned = int(read_summary(summary_path)["tuned_layers"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise PlotError(f"cannot read tuned_layers from {summary_path}: {exc}") from exc
        points.append((tuned, max(max(r.val_acc_ema, r.val_acc_raw) for r in records)))
    return points


def emit_curves(
    csv_paths: Sequence[str | Path],
    out_dir: str | Path,
    *,
    partial: bool = False,
) -> list[Path]:
    """One plot per metrics file plus an overlay (and the partial fine-tuning curve).

    Every input is read and validated before the first file is written.
    """

    if not csv_paths:
        raise PlotError("at least one metrics file is required")
    paths = [Path(p) for p in csv_paths]
    series: dict[str, list[MetricRecord]] = {}
    for path in paths:
        name = _label(path)
        unique = name
        suffix = 1
        while unique in series:
            suffix += 1
            unique = f"{name}-{suffix}"
        series[unique] = load_series(path)
    points = _partial_points(paths, series) if partial else []

    out = Path(out_dir)
    written = [plot_run(records, out / f"{name}.png", title=name) for name, records in series.items()]
    written.append(plot_overlay(series, out / OVERLAY_FILE))
    if partial:
        written.append(plot_partial(points, out / PARTIAL_FILE))
    logger.info("plots_written", extra={"files": [str(p) for p in written]})
    return written


__all__ = [
    "OVERLAY_FILE",
    "PARTIAL_FILE",
    "PlotError",
    "emit_curves",
    "load_series",
    "plot_overlay",
    "plot_partial",
    "plot_run",
]

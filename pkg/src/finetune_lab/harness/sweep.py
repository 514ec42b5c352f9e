"""Grid sweeps: one run per point of a cartesian product, aggregated into a table.

A sweep file uses the run-config syntax plus three special keys::

    preset = recipe-base          # or: base = runs/toy.cfg
    training_epochs = 20          # plain keys override every cell
    axis.base_learning_rate = 1e-4, 3e-4, 6e-4
    axis.layer_wise_lr_decay = 0.5, 0.6, 0.7
    skip = base_learning_rate=1e-4 layer_wise_lr_decay=0.7

Points run in lexicographic order over the axes as declared (first axis slowest).
"""

from __future__ import annotations

import csv
import itertools
import logging
from collections.abc import Iterator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from finetune_lab.config import get_settings
from finetune_lab.harness.experiment import RunSummary, run_experiment
from finetune_lab.harness.runconfig import (
    PRESETS,
    RunConfig,
    RunConfigError,
    parse_config_text,
    resolve_config,
)
from finetune_lab.utils import FinetuneLabError, format_table, stable_hash

logger = logging.getLogger(__name__)

TABLE_FILE = "table.csv"
SKIPPED = "---"
FAILED = "failed"


@dataclass(frozen=True)
class SweepSpec:
    """Base config values, cell overrides, ordered axes and sparse-grid holes."""

    base: dict[str, str] = field(default_factory=dict)
    preset: str | None = None
    overrides: dict[str, str] = field(default_factory=dict)
    axes: list[tuple[str, list[str]]] = field(default_factory=list)
    skips: list[dict[str, str]] = field(default_factory=list)

    @property
    def size(self) -> int:
        size = 1
        for _, values in self.axes:
            size *= len(values)
        return size

    def points(self) -> Iterator[dict[str, str]]:
        keys = [key for key, _ in self.axes]
        for combo in itertools.product(*(values for _, values in self.axes)):
            yield dict(zip(keys, combo))

    def is_skipped(self, point: dict[str, str]) -> bool:
        return any(all(point.get(k) == v for k, v in skip.items()) for skip in self.skips)

    def cell_config(self, point: dict[str, str], output_dir: Path) -> RunConfig:
        overrides = {**self.overrides, **point, "output_dir": str(output_dir)}
        return resolve_config(self.base, preset=self.preset, overrides=overrides)


def parse_sweep_text(text: str, *, source: str = "<text>", base_dir: Path | None = None) -> SweepSpec:
    base: dict[str, str] = {}
    preset: str | None = None
    overrides: dict[str, str] = {}
    axes: list[tuple[str, list[str]]] = []
    skips: list[dict[str, str]] = []
    fields = set(RunConfig.model_fields)

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{line_no}"
        if not sep or not key:
            raise RunConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key == "skip":
            skips.append(_parse_skip(value, where))
        elif key == "base":
            path = Path(value)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            try:
                base = parse_config_text(path.read_text(encoding="utf-8"), source=str(path))
            except OSError as exc:
                raise RunConfigError(f"{where}: cannot read base config {path}: {exc}") from exc
        elif key == "preset":
            if value not in PRESETS:
                raise RunConfigError(f"{where}: unknown preset {value!r}; choose from {sorted(PRESETS)}")
            preset = value
        elif key.startswith("axis."):
            name = key[len("axis.") :]
            if name not in fields:
                raise RunConfigError(f"{where}: unknown axis key {name!r}")
            if any(name == existing for existing, _ in axes):
                raise RunConfigError(f"{where}: axis {name!r} declared twice")
            points = [v.strip() for v in value.split(",") if v.strip()]
            if not points:
                raise RunConfigError(f"{where}: axis {name!r} has no values")
            axes.append((name, points))
        else:
            if key not in fields:
                raise RunConfigError(f"{where}: unknown key {key!r}")
            if key in overrides:
                raise RunConfigError(f"{where}: duplicate key {key!r}")
            overrides[key] = value

    axis_names = {name for name, _ in axes}
    for skip in skips:
        unknown = sorted(set(skip) - axis_names)
        if unknown:
            raise RunConfigError(f"{source}: skip refers to keys that are not axes: {unknown}")
    return SweepSpec(base=base, preset=preset, overrides=overrides, axes=axes, skips=skips)


def _parse_skip(value: str, where: str) -> dict[str, str]:
    skip: dict[str, str] = {}
    for token in value.split():
        key, sep, item = token.partition("=")
        if not sep or not key:
            raise RunConfigError(f"{where}: skip entries look like key=value, got {token!r}")
        skip[key] = item
    if not skip:
        raise RunConfigError(f"{where}: empty skip line")
    return skip


def load_sweep(path: str | Path) -> SweepSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RunConfigError(f"cannot read sweep spec {path}: {exc}") from exc
    return parse_sweep_text(text, source=str(path), base_dir=path.parent)


@dataclass(frozen=True)
class CellResult:
    index: int
    point: dict[str, str]
    status: Literal["ok", "failed", "skipped"]
    summary: RunSummary | None = None
    error: str | None = None

    @property
    def cell_text(self) -> str:
        if self.status == "skipped":
            return SKIPPED
        if self.status == "failed" or self.summary is None:
            return FAILED
        if self.summary.epochs == 0:
            return "nan"
        return f"{100.0 * self.summary.best_val_acc_ema:.1f}"


@dataclass(frozen=True)
class SweepResult:
    spec: SweepSpec
    cells: list[CellResult]
    output_root: Path

    @property
    def runs(self) -> int:
        return sum(1 for c in self.cells if c.status != "skipped")

    @property
    def failures(self) -> int:
        return sum(1 for c in self.cells if c.status == "failed")

    def table_rows(self) -> list[list[str]]:
        """Rows of the aggregated table; each cell is the best EMA accuracy in percent.

        No axis gives 1x1, one axis a single row, two axes a matrix (first axis down,
        second across); more axes fall back to one row per point.
        """

        axes = self.spec.axes
        if not axes:
            return [["best_val_acc_ema"], [self.cells[0].cell_text]]
        if len(axes) == 1:
            key, values = axes[0]
            return [[key, *values], ["best_val_acc_ema", *(c.cell_text for c in self.cells)]]
        if len(axes) == 2:
            (row_key, row_values), (col_key, col_values) = axes
            rows = [[f"{row_key} \\ {col_key}", *col_values]]
            for r, row_value in enumerate(row_values):
                chunk = self.cells[r * len(col_values) : (r + 1) * len(col_values)]
                rows.append([row_value, *(c.cell_text for c in chunk)])
            return rows
        rows = [[*(k for k, _ in axes), "best_val_acc_ema"]]
        rows.extend([*(c.point[k] for k, _ in axes), c.cell_text] for c in self.cells)
        return rows

    def text(self) -> str:
        return format_table(self.table_rows())


def _run_cell(spec: SweepSpec, index: int, point: dict[str, str], cell_dir: Path, workers: int | None) -> CellResult:
    cell_dir.mkdir(parents=True, exist_ok=True)
    try:
        config = spec.cell_config(point, cell_dir)
        summary = run_experiment(config, workers=workers)
    except FinetuneLabError as exc:
        logger.warning("sweep_cell_failed", extra={"cell": index, "point": point, "error": str(exc)})
        return CellResult(index, point, "failed", error=str(exc))
    except Exception as exc:
        logger.exception("sweep_cell_crashed", extra={"cell": index, "point": point})
        return CellResult(index, point, "failed", error=f"{type(exc).__name__}: {exc}")
    logger.info("sweep_cell_finished", extra={"cell": index, "point": point, "summary": summary.line()})
    return CellResult(index, point, "ok", summary=summary)


def run_sweep(
    spec: SweepSpec,
    output_root: str | Path | None = None,
    *,
    jobs: int = 1,
    workers: int | None = None,
) -> SweepResult:
    """Run every non-skipped grid point into ``cell-NNN/`` and write ``table.csv``.

    Failed cells are recorded and the sweep continues. ``jobs > 1`` runs cells in
    separate processes; results are ordered by grid position either way.
    """

    if output_root is None:
        output_root = get_settings().output_root / f"sweep-{stable_hash({'spec': repr(spec)})[:12]}"
    root = Path(output_root)
    root.mkdir(parents=True, exist_ok=True)
    logger.info("sweep_started", extra={"points": spec.size, "output_root": str(root), "jobs": jobs})

    tasks = []
    cells: dict[int, CellResult] = {}
    for index, point in enumerate(spec.points()):
        if spec.is_skipped(point):
            cells[index] = CellResult(index, point, "skipped")
        else:
            tasks.append((index, point, root / f"cell-{index:03d}"))

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, spec, i, p, d, workers) for i, p, d in tasks]
            for future in futures:
                result = future.result()
                cells[result.index] = result
    else:
        for i, p, d in tasks:
            cells[i] = _run_cell(spec, i, p, d, workers)

    result = SweepResult(spec=spec, cells=[cells[i] for i in sorted(cells)], output_root=root)
    with (root / TABLE_FILE).open("w", newline="", encoding="utf-8") as handle:
        csv.writer(handle, lineterminator="\n").writerows(result.table_rows())
    logger.info("sweep_finished", extra={"runs": result.runs, "failures": result.failures})
    return result


__all__ = [
    "CellResult",
    "SweepResult",
    "SweepSpec",
    "TABLE_FILE",
    "load_sweep",
    "parse_sweep_text",
    "run_sweep",
]

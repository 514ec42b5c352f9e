"""Command-line verbs: run, sweep, plot, grad-check, selftest."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Annotated

import typer

from finetune_lab.harness.runconfig import PRESETS, RunConfigError, load_run_config, parse_overrides
from finetune_lab.utils import FinetuneLabError

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="finetune-lab",
    help="Fine-tune toy Vision Transformers and sweep the recipe's knobs.",
    no_args_is_help=True,
    add_completion=False,
)


def _fail(exc: FinetuneLabError) -> typer.Exit:
    typer.echo(f"error: {exc}", err=True)
    return typer.Exit(code=1)


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise RunConfigError(f"--seeds must be comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise RunConfigError("--seeds needs at least one seed")
    return seeds


@app.command()
def run(
    config: Annotated[Path | None, typer.Argument(help="key = value config file.")] = None,
    preset: Annotated[str | None, typer.Option(help=f"Base preset: {', '.join(PRESETS)}.")] = None,
    seed: Annotated[int | None, typer.Option(help="Overrides random_seed.")] = None,
    seeds: Annotated[str | None, typer.Option(help="Comma-separated seeds; reports mean and std.")] = None,
    out: Annotated[Path | None, typer.Option(help="Output directory (overrides output_dir).")] = None,
    workers: Annotated[int | None, typer.Option(help="Augmentation threads.")] = None,
    resume: Annotated[bool, typer.Option(help="Continue from the checkpoint in the output directory.")] = False,
    set_: Annotated[list[str] | None, typer.Option("--set", help="Extra key=value override.")] = None,
) -> None:
    """Fine-tune once and write metrics.csv, checkpoint.ftra and summary.json."""

    from finetune_lab.harness.experiment import run_experiment, run_seeds

    try:
        overrides: dict[str, object] = parse_overrides(set_)
        if seed is not None:
            overrides["random_seed"] = seed
        if out is not None:
            overrides["output_dir"] = str(out)
        if config is None and preset is None:
            raise RunConfigError("give a config file, --preset, or both")
        run_config = load_run_config(config, preset=preset, overrides=overrides)
        if seeds is not None:
            report = run_seeds(run_config, _parse_seeds(seeds), workers=workers, resume=resume)
            for summary in report.runs:
                typer.echo(summary.line())
            typer.echo(report.line())
        else:
            typer.echo(run_experiment(run_config, workers=workers, resume=resume).line())
    except FinetuneLabError as exc:
        raise _fail(exc) from exc


@app.command()
def sweep(
    spec: Annotated[Path, typer.Argument(help="Sweep spec file.")],
    out: Annotated[Path | None, typer.Option(help="Output root for cell-NNN directories.")] = None,
    jobs: Annotated[int, typer.Option(min=1, help="Grid points run concurrently.")] = 1,
    workers: Annotated[int | None, typer.Option(help="Augmentation threads per run.")] = None,
) -> None:
    """Run every grid point and print the aggregated best-EMA-accuracy table."""

    from finetune_lab.harness.sweep import load_sweep, run_sweep

    try:
        result = run_sweep(load_sweep(spec), out, jobs=jobs, workers=workers)
    except FinetuneLabError as exc:
        raise _fail(exc) from exc
    typer.echo(result.text())
    if result.failures:
        typer.echo(f"{result.failures} of {result.runs} runs failed", err=True)


@app.command()
def plot(
    csv_files: Annotated[list[Path], typer.Argument(help="metrics.csv files.")],
    out: Annotated[Path, typer.Option(help="Directory for the png files.")] = Path("plots"),
    partial: Annotated[bool, typer.Option(help="Also plot best accuracy against tuned layers.")] = False,
) -> None:
    """Epoch-accuracy curves (raw and EMA) per run plus an overlay."""

    from finetune_lab.harness.plots import emit_curves

    try:
        written = emit_curves(csv_files, out, partial=partial)
    except FinetuneLabError as exc:
        raise _fail(exc) from exc
    for path in written:
        typer.echo(str(path))


@app.command("grad-check")
def grad_check_command(
    seeds: Annotated[int, typer.Option(min=1, help="Random draws per check.")] = 20,
    rtol: Annotated[float, typer.Option(help="Largest accepted relative error.")] = 1e-4,
) -> None:
    """Compare every kernel and a tiny ViT against central finite differences."""

    from finetune_lab.harness.selftest import grad_check

    try:
        results = grad_check(seeds, rtol=rtol)
    except FinetuneLabError as exc:
        raise _fail(exc) from exc
    for result in results:
        typer.echo(result.line())
    if not all(r.passed for r in results):
        raise typer.Exit(code=1)


@app.command()
def selftest() -> None:
    """Fast invariant suite; exits nonzero at the first failure."""

    from finetune_lab.harness.selftest import run_selftest

    results = run_selftest(report=lambda r: typer.echo(r.line()))
    if not all(r.passed for r in results):
        raise typer.Exit(code=1)


__all__ = ["app"]

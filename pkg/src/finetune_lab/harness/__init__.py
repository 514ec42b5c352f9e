"""Experiment harness: run configs and presets, single runs, sweeps, plots, self-checks."""

from finetune_lab.harness.experiment import RunSummary, SeedReport, run_experiment, run_seeds
from finetune_lab.harness.runconfig import (
    PRESETS,
    RunConfig,
    RunConfigError,
    load_run_config,
    resolve_config,
)
from finetune_lab.harness.sweep import SweepResult, SweepSpec, load_sweep, run_sweep

__all__ = [
    "PRESETS",
    "RunConfig",
    "RunConfigError",
    "RunSummary",
    "SeedReport",
    "SweepResult",
    "SweepSpec",
    "load_run_config",
    "load_sweep",
    "resolve_config",
    "run_experiment",
    "run_seeds",
    "run_sweep",
]

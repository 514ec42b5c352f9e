"""Tests for application configuration utilities."""

import logging
from pathlib import Path

import pytest

from finetune_lab import config


@pytest.fixture(autouse=True)
def reset_settings_cache():
    """Ensure settings cache is cleared between tests."""
    config.get_settings.cache_clear()
    try:
        yield
    finally:
        config.get_settings.cache_clear()


def test_output_root_uses_configured_directory(monkeypatch, tmp_path):
    """Configured FINETUNE_LAB_OUTPUT_ROOT should control where runs are written."""

    target = tmp_path / "runs"
    monkeypatch.setenv("FINETUNE_LAB_OUTPUT_ROOT", str(target))

    settings = config.get_settings()

    assert settings.output_root == target.resolve()
    assert target.is_dir()


def test_output_root_defaults_to_xdg_data_home(monkeypatch, tmp_path):
    """When FINETUNE_LAB_OUTPUT_ROOT is unset, fall back to XDG_DATA_HOME."""

    monkeypatch.delenv("FINETUNE_LAB_OUTPUT_ROOT", raising=False)
    monkeypatch.setenv("XDG_DATA_HOME", str(tmp_path))

    settings = config.get_settings()

    assert settings.output_root == (tmp_path / "finetune-lab").resolve()
    assert Path(settings.output_root).is_dir()


@pytest.mark.parametrize(
    ("raw", "expected"),
    [("debug", logging.DEBUG), ("WARNING", logging.WARNING), ("40", logging.ERROR)],
)
def test_log_level_accepts_names_and_numbers(monkeypatch, raw, expected):
    monkeypatch.setenv("LOG_LEVEL", raw)

    assert config.get_settings().log_level == expected


def test_invalid_log_level_raises_configuration_error(monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "chatty")

    with pytest.raises(config.ConfigurationError):
        config.get_settings()


def test_worker_settings_read_from_environment(monkeypatch):
    monkeypatch.setenv("FINETUNE_LAB_WORKERS", "3")
    monkeypatch.setenv("FINETUNE_LAB_PREFETCH", "8")

    settings = config.get_settings()

    assert settings.workers == 3
    assert settings.prefetch == 8


def test_negative_workers_rejected(monkeypatch):
    monkeypatch.setenv("FINETUNE_LAB_WORKERS", "-1")

    with pytest.raises(config.ConfigurationError):
        config.get_settings()


def test_output_root_expands_environment_variables(monkeypatch, tmp_path):
    monkeypatch.setenv("RUNS_BASE", str(tmp_path))
    monkeypatch.setenv("FINETUNE_LAB_OUTPUT_ROOT", "$RUNS_BASE/lab")

    assert config.get_settings().output_root == (tmp_path / "lab").resolve()


def test_app_name_must_be_a_directory_name(monkeypatch):
    monkeypatch.setenv("APP_NAME", "../escape")

    with pytest.raises(config.ConfigurationError):
        config.get_settings()

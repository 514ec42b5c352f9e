from __future__ import annotations

import logging
import os
import sys
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings

from finetune_lab.utils import FinetuneLabError

# .env values become process environment variables before settings are read
load_dotenv()


class ConfigurationError(FinetuneLabError):
    """Raised when process-level settings are invalid or unusable."""

    pass


class AppConfig(BaseSettings):
    """Process-level configuration sourced from environment variables.

    Experiment hyperparameters live in :mod:`finetune_lab.harness.runconfig`; this
    class only holds what differs between machines.

    Attributes
    ----------
    app_name: str
        Directory name used under the platform data home.
    log_level: int
        Root logging level for the application.
    output_root_dir: str | None
        Base directory for run and sweep outputs.
    workers: int
        Augmentation worker threads per training run.
    prefetch: int
        Maximum number of augmented batches in flight ahead of the training thread.

    """

    app_name: str = Field(
        default="finetune-lab",
        alias="APP_NAME",
        description="Name of the default output directory under the data home",
        pattern=r"^[a-z0-9][a-z0-9_-]{0,49}$",
    )

    log_level: int = Field(
        default=logging.INFO,
        alias="LOG_LEVEL",
        description="Root level for the JSON log stream on stderr",
        ge=logging.DEBUG,
        le=logging.CRITICAL,
    )

    output_root_dir: str | None = Field(
        default=None,
        alias="FINETUNE_LAB_OUTPUT_ROOT",
        description="Base directory for run outputs (metrics, checkpoints, plots)",
    )

    workers: int = Field(
        default=2,
        alias="FINETUNE_LAB_WORKERS",
        description="Augmentation worker threads; 0 augments on the training thread",
        ge=0,
        le=64,
    )

    prefetch: int = Field(
        default=4,
        alias="FINETUNE_LAB_PREFETCH",
        description="Bounded queue depth, in batches, between workers and trainer",
        ge=1,
        le=256,
    )

    @field_validator("log_level", mode="before")
    @classmethod
    def parse_log_level(cls, v: object) -> object:
        """Accept level names in any case as well as numeric levels."""
        if not isinstance(v, str):
            return v
        text = v.strip()
        if text.lstrip("-").isdigit():
            return int(text)
        level = logging.getLevelNamesMapping().get(text.upper())
        if level is None or level == logging.NOTSET:
            raise ValueError(f"unknown log level {v!r}")
        return level

    @field_validator("output_root_dir", mode="before")
    @classmethod
    def expand_output_root(cls, v: object) -> object:
        if isinstance(v, str):
            v = os.path.expandvars(v.strip())
            return v or None
        return v

    @property
    def output_root(self) -> Path:
        """Absolute output directory, created on first access."""

        root = self._resolve_output_root()
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigurationError(f"cannot create output root {root}: {e}") from e
        return root

    def _resolve_output_root(self) -> Path:
        if self.output_root_dir:
            return Path(self.output_root_dir).expanduser().resolve()
        if sys.platform.startswith("win"):
            data_home = os.getenv("LOCALAPPDATA") or str(Path.home() / "AppData" / "Local")
        else:
            data_home = os.getenv("XDG_DATA_HOME") or str(Path.home() / ".local" / "share")
        return (Path(data_home) / self.app_name).resolve()

    model_config = ConfigDict(
        case_sensitive=False,
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        validate_assignment=True,
        str_strip_whitespace=True,
    )


@lru_cache(maxsize=1)
def get_settings() -> AppConfig:
    """Cached process settings; validation failures surface as ``ConfigurationError``."""

    try:
        return AppConfig()
    except ValidationError as exc:
        raise ConfigurationError(f"invalid environment settings: {exc}") from exc

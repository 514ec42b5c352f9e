"""Context management for run-scoped logging metadata."""

from __future__ import annotations

from contextvars import ContextVar
from typing import Any

_run_id_var: ContextVar[str | None] = ContextVar("run_id", default=None)
_epoch_var: ContextVar[int | None] = ContextVar("epoch", default=None)


def get_run_id() -> str | None:
    """Return the current run identifier, if any."""

    return _run_id_var.get()


def set_run_id(value: str | None) -> Any:
    """Bind a run identifier to the current context and return its token."""

    return _run_id_var.set(value)


def reset_run_id(token: Any) -> None:
    """Restore the previous run identifier using the provided token."""

    if token is not None:
        _run_id_var.reset(token)


def get_epoch() -> int | None:
    """Return the epoch currently being trained, if any."""

    return _epoch_var.get()


def set_epoch(value: int | None) -> Any:
    """Bind the current epoch index and return its token."""

    return _epoch_var.set(value)


def reset_epoch(token: Any) -> None:
    """Restore the previous epoch index using the provided token."""

    if token is not None:
        _epoch_var.reset(token)


def clear_context() -> None:
    """Clear any stored context values for the current execution flow."""

    _run_id_var.set(None)
    _epoch_var.set(None)


__all__ = [
    "get_run_id",
    "set_run_id",
    "reset_run_id",
    "get_epoch",
    "set_epoch",
    "reset_epoch",
    "clear_context",
]

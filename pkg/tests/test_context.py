"""Tests for run-scoped context utilities."""

from finetune_lab import context


def test_run_id_round_trip():
    token = context.set_run_id("run-123")
    assert context.get_run_id() == "run-123"
    context.reset_run_id(token)
    assert context.get_run_id() is None


def test_epoch_round_trip():
    token = context.set_epoch(7)
    assert context.get_epoch() == 7
    context.reset_epoch(token)
    assert context.get_epoch() is None


def test_clear_context():
    context.set_run_id("abc")
    context.set_epoch(3)
    context.clear_context()
    assert context.get_run_id() is None
    assert context.get_epoch() is None

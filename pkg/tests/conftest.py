"""Shared fixtures: tiny models, tiny datasets and a fast run configuration."""

import numpy as np
import pytest

from finetune_lab import config
from finetune_lab.data import synth_dataset
from finetune_lab.model import ViTConfig, build


@pytest.fixture
def tiny_config() -> ViTConfig:
    return ViTConfig(image_size=16, patch_size=4, dim=16, depth=2, heads=2, num_classes=4)


@pytest.fixture
def tiny_model(tiny_config):
    return build(tiny_config, init_seed=0)


@pytest.fixture
def tiny_data():
    train = synth_dataset(4, 6, 16, seed=0, split="train")
    val = synth_dataset(4, 3, 16, seed=0, split="val")
    return train, val


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def toy_overrides(tmp_path) -> dict:
    """A run small enough to finish in seconds."""

    return {
        "image_size": 16,
        "patch_size": 4,
        "embed_dim": 16,
        "depth": 2,
        "num_heads": 2,
        "num_classes": 4,
        "train_per_class": 6,
        "val_per_class": 3,
        "batch_size": 8,
        "training_epochs": 2,
        "warmup_epochs": 1,
        "output_dir": str(tmp_path / "run"),
    }


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    """Send default outputs to a temporary root and run augmentation synchronously."""

    monkeypatch.setenv("FINETUNE_LAB_OUTPUT_ROOT", str(tmp_path / "output-root"))
    monkeypatch.setenv("FINETUNE_LAB_WORKERS", "0")
    config.get_settings.cache_clear()
    try:
        yield
    finally:
        config.get_settings.cache_clear()

"""Tests for run config files, presets and overrides."""

import pytest

from finetune_lab.harness.runconfig import (
    PRESETS,
    RunConfig,
    RunConfigError,
    load_run_config,
    parse_config_text,
    parse_overrides,
    resolve_config,
)

TABLE = {
    "baseline": {
        "base_learning_rate": 1e-3,
        "layer_wise_lr_decay": 1.0,
        "warmup_epochs": 20,
        "training_epochs": 100,
        "mixup": 0.8,
        "cutmix": 1.0,
        "ema": 0.0,
    },
    "recipe-base": {
        "base_learning_rate": 6e-4,
        "layer_wise_lr_decay": 0.6,
        "warmup_epochs": 10,
        "training_epochs": 50,
        "mixup": 0.0,
        "cutmix": 0.0,
        "ema": 0.9998,
    },
    "recipe-large": {
        "base_learning_rate": 4e-4,
        "layer_wise_lr_decay": 0.65,
        "warmup_epochs": 5,
        "training_epochs": 30,
        "mixup": 0.0,
        "cutmix": 0.0,
        "ema": 0.9998,
    },
}

SHARED = {
    "optimizer": "adamw",
    "weight_decay": 0.05,
    "optimizer_momentum": (0.9, 0.999),
    "batch_size": 2048,
    "learning_rate_schedule": "cosine",
    "augmentation": "randaug+rrc",
    "randaug_m": 9.0,
    "randaug_n": 2,
    "randaug_mstd": 0.5,
    "label_smoothing": 0.1,
    "drop_path": 0.0,
    "random_erase": 0.25,
    "random_erase_mode": "pixel",
    "random_seed": 0,
    "layer_scale": False,
    "position_encoding": "learnable-absolute",
}


class TestPresets:
    @pytest.mark.parametrize("name", sorted(TABLE))
    def test_preset_matches_table(self, name):
        assert dict(PRESETS[name]) == {**SHARED, **TABLE[name]}

    @pytest.mark.parametrize("name", sorted(TABLE))
    def test_preset_resolves(self, name):
        config = resolve_config({}, preset=name)

        for key, value in {**SHARED, **TABLE[name]}.items():
            assert getattr(config, key) == value, key

    def test_presets_are_read_only(self):
        with pytest.raises(TypeError):
            PRESETS["recipe-base"]["ema"] = 0.5

    def test_unknown_preset(self):
        with pytest.raises(RunConfigError, match="unknown preset 'deit'"):
            resolve_config({}, preset="deit")


class TestParsing:
    def test_comments_and_blank_lines(self):
        text = "# recipe\n\nbase_learning_rate = 6e-4  # peak\nema=0.99\n"

        assert parse_config_text(text) == {"base_learning_rate": "6e-4", "ema": "0.99"}

    def test_missing_equals(self):
        with pytest.raises(RunConfigError, match="cfg.txt:2"):
            parse_config_text("ema = 0.9\nwarmup 5\n", source="cfg.txt")

    def test_duplicate_key(self):
        with pytest.raises(RunConfigError, match="duplicate key 'ema'"):
            parse_config_text("ema = 0.9\nema = 0.8\n")

    def test_overrides(self):
        assert parse_overrides(["ema=0.9", " depth = 2 "]) == {"ema": "0.9", "depth": "2"}

    def test_malformed_override(self):
        with pytest.raises(RunConfigError, match="key=value"):
            parse_overrides(["ema"])


class TestResolve:
    def test_string_values_are_coerced(self):
        config = resolve_config(
            {"base_learning_rate": "1e-3", "optimizer_momentum": "0.8, 0.99", "layer_scale": "true"}
        )

        assert config.base_learning_rate == 1e-3
        assert config.optimizer_momentum == (0.8, 0.99)
        assert config.layer_scale is True

    def test_unknown_key_names_the_key(self):
        with pytest.raises(RunConfigError, match="learning_rate: Extra inputs"):
            resolve_config({"learning_rate": "1e-3"})

    def test_invalid_value_names_the_key(self):
        with pytest.raises(RunConfigError, match="^ema: "):
            resolve_config({"ema": "1.5"})

    def test_precedence(self):
        config = resolve_config(
            {"preset": "baseline", "ema": "0.99", "warmup_epochs": "3"},
            overrides={"ema": "0.9"},
        )

        assert config.ema == 0.9
        assert config.warmup_epochs == 3
        assert config.mixup == 0.8

    def test_explicit_preset_wins_over_file_preset(self):
        assert resolve_config({"preset": "baseline"}, preset="recipe-large").base_learning_rate == 4e-4

    def test_none_strings(self):
        config = resolve_config({"pretrained_backbone": "none", "train_subset_per_class": ""})

        assert config.pretrained_backbone is None
        assert config.train_subset_per_class is None

    def test_folder_requires_root(self):
        with pytest.raises(RunConfigError, match="dataset_root"):
            resolve_config({"dataset": "folder"})

    def test_freeze_beyond_depth(self):
        with pytest.raises(RunConfigError, match="freeze_layers"):
            resolve_config({"depth": "2", "freeze_layers": "3"})

    def test_invalid_architecture(self):
        with pytest.raises(RunConfigError):
            resolve_config({"image_size": "30", "patch_size": "4"})

    def test_min_lr_clamped_to_base(self):
        config = resolve_config({"base_learning_rate": "1e-7"})

        assert config.train_config().min_lr == 1e-7


class TestRunConfig:
    def test_tuned_layers(self):
        assert RunConfig(depth=4, freeze_layers=3).tuned_layers == 1

    def test_sub_configs(self):
        config = RunConfig(embed_dim=32, num_heads=2, ema=0.99, mixup=0.8, crop_ratio=0.5)

        assert config.vit_config().dim == 32
        assert config.train_config().ema_momentum == 0.99
        assert config.aug_policy().mixup_alpha == 0.8
        assert config.aug_policy().crop_scale_lo == 0.5

    def test_hash_ignores_output_dir(self):
        a = RunConfig(output_dir="/tmp/a")
        b = RunConfig(output_dir="/tmp/b")

        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != RunConfig(random_seed=1).config_hash()

    def test_text_round_trip(self):
        config = RunConfig(ema=0.99, depth=2, freeze_layers=1, output_dir="out")

        assert resolve_config(parse_config_text(config.to_text())) == config


class TestLoad:
    def test_file_with_preset_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("preset = recipe-base\ntraining_epochs = 4\nwarmup_epochs = 1\n")

        config = load_run_config(path, overrides={"random_seed": "3"})

        assert config.layer_wise_lr_decay == 0.6
        assert config.training_epochs == 4
        assert config.random_seed == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(RunConfigError, match="cannot read config"):
            load_run_config(tmp_path / "absent.cfg")

    def test_no_file_uses_preset(self):
        assert load_run_config(None, preset="baseline").ema == 0.0

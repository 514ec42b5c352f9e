"""Tests for the ViT: parameter layout, forward semantics, drop path and backbone loading."""

import numpy as np
import pytest

from finetune_lab.archive import write_archive
from finetune_lab.autodiff import Tensor, backward, check_gradients
from finetune_lab.autodiff import functional as F
from finetune_lab.model import (
    Model,
    ModelConfigError,
    ModelInputError,
    ViTConfig,
    backbone,
    build,
    classify_tokens,
    drop_path,
    forward,
    load_backbone,
    relative_position_index,
)


class TestConfig:
    def test_rejects_indivisible_patch_size(self):
        with pytest.raises(ValueError, match="divisible"):
            ViTConfig(image_size=30, patch_size=4)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError, match="heads"):
            ViTConfig(dim=30, heads=4)

    def test_build_wraps_invalid_mapping(self):
        with pytest.raises(ModelConfigError):
            build({"image_size": 30, "patch_size": 4}, init_seed=0)

    def test_derived_sizes(self):
        cfg = ViTConfig(image_size=32, patch_size=4, dim=64, heads=4)

        assert (cfg.grid, cfg.num_patches, cfg.head_dim, cfg.mlp_hidden) == (8, 64, 16, 256)


class TestParameters:
    def test_layer_indices_cover_embed_blocks_and_head(self, tiny_model):
        idx = tiny_model.layer_index

        assert idx["patch_embed.weight"] == 0
        assert idx["pos_embed"] == 0
        assert idx["blocks.0.attn.qkv.weight"] == 1
        assert idx["blocks.1.mlp.fc2.bias"] == 2
        assert idx["norm.weight"] == 2
        assert idx["head.fc.weight"] == 3
        assert set(idx.values()) == {0, 1, 2, 3}

    def test_decay_exempt_holds_biases_norms_and_position_table(self, tiny_model):
        exempt = tiny_model.decay_exempt

        assert "pos_embed" in exempt
        assert "blocks.0.norm1.weight" in exempt
        assert "head.fc.bias" in exempt
        assert "blocks.0.attn.qkv.weight" not in exempt
        assert "head.fc.weight" not in exempt

    def test_build_is_deterministic_per_seed(self, tiny_config):
        assert build(tiny_config, 3).checksum() == build(tiny_config, 3).checksum()
        assert build(tiny_config, 3).checksum() != build(tiny_config, 4).checksum()

    def test_init_is_truncated(self, tiny_model):
        w = tiny_model.parameters["blocks.0.mlp.fc1.weight"].data

        assert np.abs(w).max() <= 2 * 0.02 + 1e-7

    def test_optional_components_add_parameters(self, tiny_config):
        plain = build(tiny_config, 0)
        extended = build(tiny_config.model_copy(update={"use_rpe": True, "use_layerscale": True}), 0)

        assert set(extended.rpe_tables) == {"blocks.0.attn.rpe_table", "blocks.1.attn.rpe_table"}
        assert len(extended.layerscale_factors) == 4
        assert not plain.rpe_tables and not plain.layerscale_factors
        assert extended.rpe_tables["blocks.0.attn.rpe_table"].shape == (2, 49)

    def test_state_dict_round_trip(self, tiny_config, tiny_model):
        other = build(tiny_config, 9)

        other.load_state_dict(tiny_model.state_dict())

        assert other.checksum() == tiny_model.checksum()

    def test_load_state_dict_strict_mismatch(self, tiny_model):
        state = tiny_model.state_dict()
        state.pop("pos_embed")

        with pytest.raises(ModelConfigError, match="pos_embed"):
            tiny_model.load_state_dict(state)

    def test_astype_float64(self, tiny_model):
        wide = tiny_model.astype(np.float64)

        assert wide.dtype == np.float64
        assert tiny_model.dtype == np.float32


class TestForward:
    def test_logits_shape(self, tiny_model, rng):
        logits = forward(tiny_model, rng.standard_normal((3, 3, 16, 16)))

        assert logits.shape == (3, 4)

    def test_wrong_image_shape(self, tiny_model):
        with pytest.raises(ModelInputError):
            forward(tiny_model, np.zeros((1, 3, 8, 8)))

    def test_unknown_mode(self, tiny_model):
        with pytest.raises(ModelInputError):
            forward(tiny_model, np.zeros((1, 3, 16, 16)), mode="predict")

    def test_zero_initialized_extras_do_not_change_output(self, tiny_config, rng):
        images = rng.standard_normal((2, 3, 16, 16))
        plain = build(tiny_config, 0)
        extended = build(tiny_config.model_copy(update={"use_rpe": True, "use_layerscale": True}), 0)
        extended.load_state_dict(plain.state_dict(), strict=False)

        assert np.allclose(forward(plain, images).data, forward(extended, images).data, atol=1e-6)

    def test_eval_is_deterministic_with_drop_path(self, tiny_config, rng):
        model = build(tiny_config.model_copy(update={"drop_path_rate": 0.5}), 0)
        images = rng.standard_normal((2, 3, 16, 16))

        assert np.array_equal(forward(model, images).data, forward(model, images).data)

    def test_train_mode_drop_path_uses_step_rng(self, tiny_config, rng):
        model = build(tiny_config.model_copy(update={"drop_path_rate": 0.5}), 0)
        images = rng.standard_normal((4, 3, 16, 16))

        a = forward(model, images, "train", np.random.default_rng(5)).data
        b = forward(model, images, "train", np.random.default_rng(5)).data

        assert np.array_equal(a, b)

    @pytest.mark.parametrize("call", [forward, backbone])
    def test_train_mode_without_step_rng_is_rejected(self, tiny_model, rng, call):
        with pytest.raises(ModelInputError):
            call(tiny_model, rng.standard_normal((2, 3, 16, 16)), "train")

    def test_backbone_tokens_shape(self, tiny_model, rng):
        tokens = backbone(tiny_model, rng.standard_normal((2, 3, 16, 16)))

        assert tokens.shape == (2, 16, 16)

    def test_every_parameter_receives_a_gradient(self, tiny_config, rng):
        model = build(tiny_config.model_copy(update={"use_rpe": True, "use_layerscale": True}), 0)
        logits = forward(model, rng.standard_normal((2, 3, 16, 16)).astype(np.float32))

        backward(F.cross_entropy(logits, np.eye(4)[[0, 2]]))

        missing = [n for n, p in model.parameters.items() if p.grad is None]
        assert missing == []

    def test_mean_pool_ignores_token_order(self, tiny_model, rng):
        tokens = backbone(tiny_model, rng.standard_normal((2, 3, 16, 16)))
        shuffled = Tensor(tokens.data[:, rng.permutation(tokens.shape[1])])

        expected = classify_tokens(tiny_model, tokens).data
        assert np.allclose(classify_tokens(tiny_model, shuffled).data, expected, atol=1e-5)

    def test_loss_gradients_match_finite_differences(self, rng):
        config = ViTConfig(image_size=8, patch_size=4, dim=32, depth=2, heads=2, num_classes=3)
        template = build(config, 0, dtype=np.float64)
        images = rng.standard_normal((2, 3, 8, 8))
        targets = rng.dirichlet(np.ones(3), size=2)
        inputs = {name: 0.2 * rng.standard_normal(p.shape) for name, p in template.parameters.items()}

        def loss(**params):
            model = Model(template.config, params, template.layer_index, template.decay_exempt)
            return F.cross_entropy(forward(model, images), targets)

        errors = check_gradients(loss, inputs, max_coords=4, seed=0)

        assert max(errors.values()) < 1e-4


class TestDropPath:
    def test_identity_in_eval_and_at_zero_rate(self, rng):
        x = Tensor(rng.standard_normal((4, 3)))

        assert drop_path(x, 0.3, "eval", None) is x
        assert drop_path(x, 0.0, "train", rng) is x

    def test_kept_rows_are_rescaled(self):
        x = Tensor(np.ones((2000, 2)))

        out = drop_path(x, 0.25, "train", np.random.default_rng(0)).data

        assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
        assert out.mean() == pytest.approx(1.0, abs=0.05)

    def test_expectation_is_preserved(self):
        x = Tensor(np.ones((100_000, 1)))

        out = drop_path(x, 0.25, "train", np.random.default_rng(1)).data

        assert out.mean() == pytest.approx(1.0, rel=0.02)

    def test_invalid_rate(self):
        with pytest.raises(ModelConfigError):
            drop_path(Tensor(np.ones((1, 1))), 1.0, "train", np.random.default_rng(0))


def test_relative_position_index_is_symmetric_in_offsets():
    index = relative_position_index(3)

    assert index.shape == (9, 9)
    assert index.min() == 0 and index.max() == 24
    assert len(set(np.diag(index))) == 1
    assert index[0, 8] + index[8, 0] == 2 * index[0, 0]


class TestLoadBackbone:
    def test_loads_everything_but_the_head(self, tiny_config, tmp_path):
        source = build(tiny_config, 1)
        path = write_archive(tmp_path / "backbone.ftra", source.state_dict())
        target = build(tiny_config, 2)
        head_before = target.checksum(prefix="head.")

        loaded = load_backbone(target, path)

        assert loaded == len([n for n in source.parameters if not n.startswith("head.")])
        assert target.checksum(exclude_prefix="head.") == source.checksum(exclude_prefix="head.")
        assert target.checksum(prefix="head.") == head_before

    def test_missing_backbone_parameter(self, tiny_config, tmp_path):
        state = build(tiny_config, 1).state_dict()
        state.pop("blocks.1.mlp.fc1.weight")
        path = write_archive(tmp_path / "partial.ftra", state)

        with pytest.raises(ModelConfigError, match="fc1"):
            load_backbone(build(tiny_config, 2), path)

    def test_shape_mismatch(self, tiny_config, tmp_path):
        wider = build(tiny_config.model_copy(update={"dim": 32}), 1)
        path = write_archive(tmp_path / "wide.ftra", wider.state_dict())

        with pytest.raises(ModelConfigError, match="shape"):
            load_backbone(build(tiny_config, 2), path)

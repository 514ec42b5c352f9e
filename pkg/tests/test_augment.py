"""Tests for crops, RandAug, 3Aug, erasing, normalization and the batch loader."""

import numpy as np
import pytest
from PIL import Image

from finetune_lab.augment import (
    RANDAUG_OPS,
    AugmentError,
    AugPolicy,
    BatchLoader,
    eval_transform,
    normalize,
    randaug_apply,
    random_erase,
    random_resized_crop,
    sample_crop_box,
    simple_random_crop,
    three_augment,
    train_transform,
)
from finetune_lab.augment.randaug import apply_op, sample_magnitude
from finetune_lab.augment.transforms import eval_resize_crop
from finetune_lab.data import synth_dataset


@pytest.fixture
def image(rng):
    return rng.integers(0, 256, size=(24, 30, 3), dtype=np.uint8)


class TestPolicy:
    def test_crop_bounds_must_be_ordered(self):
        with pytest.raises(ValueError):
            AugPolicy(crop_scale_lo=0.6, crop_scale_hi=0.5)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError):
            AugPolicy(auto_augment="v0")

    def test_disabled_turns_off_every_random_component(self):
        policy = AugPolicy.disabled()

        assert not policy.mixing_enabled
        assert policy.erase_prob == 0.0
        assert policy.randaug_n == 0


class TestCrops:
    def test_rrc_area_fraction_within_bounds(self, rng):
        fractions = []
        for _ in range(10_000):
            _, _, h, w = sample_crop_box(40, 30, (0.08, 1.0), rng)
            fractions.append(h * w / 1200)

        assert min(fractions) >= 0.08
        assert max(fractions) <= 1.0

    def test_higher_lower_bound_shifts_mean_area(self, rng):
        def mean_area(lo):
            return np.mean([np.prod(sample_crop_box(64, 64, (lo, 1.0), rng)[2:]) / 4096 for _ in range(2000)])

        assert mean_area(0.5) > mean_area(0.08) + 0.1

    def test_fallback_respects_upper_bound(self, rng):
        # an extreme aspect makes every sampled box miss, forcing the fallback
        for _ in range(50):
            _, _, h, w = sample_crop_box(200, 2, (0.5, 0.6), rng)
            assert h * w <= 0.6 * 400

    def test_fallback_respects_lower_bound_and_moves(self, rng):
        boxes = [sample_crop_box(32, 32, (0.5, 0.5), rng) for _ in range(2000)]
        fractions = [h * w / 1024 for _, _, h, w in boxes]

        assert min(fractions) >= 0.5
        assert max(fractions) <= 0.5
        assert len(set(boxes)) > 1

    def test_fallback_stays_inside_narrow_band(self, rng):
        for _ in range(200):
            top, left, h, w = sample_crop_box(200, 2, (0.5, 0.6), rng)
            assert 0.5 * 400 <= h * w <= 0.6 * 400
            assert 0 <= top <= 2 - h
            assert 0 <= left <= 200 - w

    def test_invalid_scale(self, rng):
        with pytest.raises(AugmentError):
            sample_crop_box(10, 10, (0.0, 1.0), rng)

    def test_rrc_output_size(self, image, rng):
        assert random_resized_crop(image, 0.08, 1.0, 16, rng).size == (16, 16)

    def test_src_output_size(self, image, rng):
        assert simple_random_crop(image, 16, rng).size == (16, 16)

    def test_eval_resize_crop_is_deterministic(self, image):
        a = np.asarray(eval_resize_crop(image, 16))
        b = np.asarray(eval_resize_crop(image, 16))

        assert a.shape == (16, 16, 3)
        assert np.array_equal(a, b)


class TestRandAug:
    def test_fifteen_ops(self):
        assert len(RANDAUG_OPS) == 15

    @pytest.mark.parametrize("name", sorted(RANDAUG_OPS))
    def test_every_op_keeps_size_and_mode(self, name, image, rng):
        out = apply_op(Image.fromarray(image), name, 9.0, rng)

        assert out.size == (30, 24)
        assert out.mode == "RGB"

    def test_zero_ops_is_identity(self, image, rng):
        assert randaug_apply(image, 9, 0, 0.5, rng) is image

    def test_returns_array_for_array_input(self, image, rng):
        out = randaug_apply(image, 9, 2, 0.5, rng)

        assert isinstance(out, np.ndarray)
        assert out.shape == image.shape and out.dtype == np.uint8

    def test_same_stream_same_result(self, image):
        a = randaug_apply(image, 9, 2, 0.5, np.random.default_rng(3))
        b = randaug_apply(image, 9, 2, 0.5, np.random.default_rng(3))

        assert np.array_equal(a, b)

    def test_magnitude_is_clipped(self, rng):
        draws = [sample_magnitude(9.5, 5.0, rng) for _ in range(500)]

        assert 0.0 <= min(draws) and max(draws) <= 10.0
        assert sample_magnitude(9.0, 0.0, rng) == 9.0

    def test_invalid_arguments(self, image, rng):
        with pytest.raises(AugmentError):
            randaug_apply(image, 11, 2, 0.5, rng)
        with pytest.raises(AugmentError):
            randaug_apply(image, 9, -1, 0.5, rng)
        with pytest.raises(AugmentError):
            apply_op(Image.fromarray(image), "AutoMix", 9, rng)


def test_three_augment_keeps_size(image, rng):
    for _ in range(10):
        assert three_augment(image, rng).size == (30, 24)


class TestNormalizeAndErase:
    def test_normalize_layout_and_values(self):
        img = np.full((2, 2, 3), 255, dtype=np.uint8)

        out = normalize(img, (0.5, 0.5, 0.5), (0.5, 0.25, 1.0))

        assert out.shape == (3, 2, 2) and out.dtype == np.float32
        assert np.allclose(out[:, 0, 0], [1.0, 2.0, 0.5])

    def test_erase_probability_zero_is_identity(self, rng):
        x = np.zeros((3, 8, 8), dtype=np.float32)

        assert random_erase(x, 0.0, rng) is x

    def test_erase_fires_at_the_configured_rate(self, rng):
        x = np.zeros((3, 8, 8), dtype=np.float32)

        fired = sum(random_erase(x, 0.25, rng) is not x for _ in range(20_000))

        assert fired / 20_000 == pytest.approx(0.25, abs=0.02)

    def test_erase_probability_one_changes_a_rectangle(self, rng):
        x = np.zeros((3, 16, 16), dtype=np.float32)

        out = random_erase(x, 1.0, rng)
        changed = np.argwhere(np.any(out != 0, axis=0))

        assert 0 < len(changed) < 16 * 16
        rows, cols = changed[:, 0], changed[:, 1]
        assert len(changed) <= (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
        assert np.array_equal(x, 0)

    def test_erase_rejects_bad_probability(self, rng):
        with pytest.raises(AugmentError):
            random_erase(np.zeros((3, 4, 4), np.float32), 1.5, rng)


class TestPipeline:
    @pytest.mark.parametrize("kind", ["randaug+rrc", "3aug+rrc", "3aug+src"])
    def test_train_transform_shape(self, kind, image, rng):
        out = train_transform(image, AugPolicy(policy_kind=kind), 16, rng)

        assert out.shape == (3, 16, 16) and out.dtype == np.float32

    def test_eval_transform_is_pure(self, image):
        policy = AugPolicy()

        assert np.array_equal(eval_transform(image, policy, 16), eval_transform(image, policy, 16))

    def test_batches_do_not_depend_on_worker_count(self):
        data = synth_dataset(3, 5, 16, seed=0)
        policy = AugPolicy(mixup_alpha=0.8, cutmix_alpha=1.0)

        serial = list(BatchLoader(data, policy, 16, 4, seed=1, epoch=2, workers=0))
        threaded = list(BatchLoader(data, policy, 16, 4, seed=1, epoch=2, workers=3, prefetch=2))

        assert len(serial) == len(threaded) == 4
        for a, b in zip(serial, threaded):
            assert np.array_equal(a.indices, b.indices)
            assert np.array_equal(a.images, b.images)
            assert np.array_equal(a.soft_targets, b.soft_targets)

    def test_epochs_differ(self):
        data = synth_dataset(2, 4, 16, seed=0)
        policy = AugPolicy()

        first = next(iter(BatchLoader(data, policy, 16, 8, seed=0, epoch=0)))
        second = next(iter(BatchLoader(data, policy, 16, 8, seed=0, epoch=1)))

        assert not np.array_equal(first.images, second.images)

    def test_drop_last(self):
        data = synth_dataset(2, 5, 16, seed=0)

        assert len(BatchLoader(data, AugPolicy(), 16, 4, seed=0, epoch=0, drop_last=True)) == 2
        assert len(BatchLoader(data, AugPolicy(), 16, 4, seed=0, epoch=0)) == 3

    def test_every_sample_visited_once_per_epoch(self):
        data = synth_dataset(3, 3, 16, seed=0)

        batches = list(BatchLoader(data, AugPolicy.disabled(), 16, 4, seed=0, epoch=0))

        assert sorted(np.concatenate([b.indices for b in batches]).tolist()) == list(range(9))

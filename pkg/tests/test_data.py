"""Tests for folder and synthetic datasets."""

import numpy as np
import pytest
from PIL import Image

from finetune_lab.augment import sample_rng
from finetune_lab.data import Dataset, DatasetError, decode_image, load_folder, synth_dataset


def _save(path, size=(20, 12), color=(200, 10, 10)):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", size, color).save(path)


@pytest.fixture
def folder(tmp_path):
    root = tmp_path / "train"
    _save(root / "zebra" / "b.png")
    _save(root / "zebra" / "a.png")
    _save(root / "apple" / "x.jpg", color=(0, 200, 0))
    (root / "apple" / "notes.txt").write_text("not an image")
    return root


class TestSynthetic:
    def test_shapes_labels_and_balance(self):
        data = synth_dataset(5, 4, 16, seed=0)

        assert len(data) == 20
        assert data.images[0].shape == (16, 16, 3)
        assert data.images[0].dtype == np.uint8
        assert np.array_equal(data.class_counts(), [4] * 5)

    def test_same_seed_same_bytes(self):
        a = synth_dataset(3, 2, 16, seed=7)
        b = synth_dataset(3, 2, 16, seed=7)

        assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))

    def test_splits_do_not_share_samples(self):
        train = synth_dataset(2, 3, 16, seed=0, split="train")
        val = synth_dataset(2, 3, 16, seed=0, split="val")

        assert not any(np.array_equal(x, y) for x in train.images for y in val.images)

    def test_rejects_non_positive_sizes(self):
        with pytest.raises(DatasetError):
            synth_dataset(0, 4, 16, seed=0)

    def test_many_classes_get_distinct_orientations(self):
        data = synth_dataset(12, 1, 16, seed=0)

        assert data.num_classes == 12
        assert not np.array_equal(data.images[0], data.images[10])


def _pixels(data):
    return np.stack(data.images).reshape(len(data), -1).astype(np.float64) / 255.0


@pytest.mark.slow
class TestHardness:
    @pytest.fixture(scope="class")
    def splits(self):
        train = synth_dataset(10, 500, 32, seed=0)
        val = synth_dataset(10, 100, 32, seed=0, split="val")
        return _pixels(train), train.labels, _pixels(val), val.labels

    def test_pixel_nearest_neighbor_stays_below_sixty_percent(self, splits):
        x_train, y_train, x_val, y_val = splits
        distances = (x_val**2).sum(1)[:, None] - 2 * x_val @ x_train.T + (x_train**2).sum(1)[None, :]

        accuracy = np.mean(y_train[distances.argmin(axis=1)] == y_val)

        assert accuracy < 0.60

    def test_pixel_linear_classifier_stays_below_sixty_percent(self, splits):
        x_train, y_train, x_val, y_val = splits
        mean = x_train.mean(axis=0)
        a = x_train - mean
        weights = np.linalg.solve(a.T @ a + 10.0 * np.eye(a.shape[1]), a.T @ np.eye(10)[y_train])

        accuracy = np.mean(((x_val - mean) @ weights).argmax(axis=1) == y_val)

        assert accuracy < 0.60


class TestDataset:
    def test_order_is_a_permutation_keyed_by_epoch(self):
        data = synth_dataset(2, 5, 8, seed=0)

        first = data.order(epoch=0, seed=1)

        assert sorted(first.tolist()) == list(range(10))
        assert np.array_equal(first, data.order(epoch=0, seed=1))
        assert not np.array_equal(first, data.order(epoch=1, seed=1))

    def test_order_does_not_reuse_a_sample_stream(self):
        data = synth_dataset(2, 50, 8, seed=0)

        shuffle = data.order(epoch=0, seed=1)
        # sample 7919 of the same epoch must not replay the shuffle
        reused = sample_rng(1, 0, 7919).permutation(len(data))

        assert not np.array_equal(shuffle, reused)

    def test_subset_takes_first_per_class(self):
        data = synth_dataset(3, 4, 8, seed=0)

        small = data.subset(2)

        assert np.array_equal(small.class_counts(), [2, 2, 2])
        assert np.array_equal(small.images[0], data.images[0])

    def test_repeat(self):
        data = synth_dataset(2, 1, 8, seed=0)

        assert len(data.repeat(3)) == 6

    def test_label_out_of_range(self):
        with pytest.raises(DatasetError):
            Dataset(images=[np.zeros((2, 2, 3), np.uint8)], labels=np.array([3]), num_classes=2)

    def test_length_mismatch(self):
        with pytest.raises(DatasetError):
            Dataset(images=[], labels=np.array([0]), num_classes=2)


class TestFolder:
    def test_classes_ranked_by_sorted_name(self, folder):
        data = load_folder(folder, out_size=8)

        assert data.class_names == ("apple", "zebra")
        assert data.labels.tolist() == [0, 1, 1]
        assert [s.rsplit("/", 1)[-1] for s in data.sources] == ["x.jpg", "a.png", "b.png"]

    def test_shorter_side_resized(self, folder):
        data = load_folder(folder, out_size=8)

        assert min(data.images[1].shape[:2]) == 8
        assert data.images[1].shape == (8, 13, 3)

    def test_corrupt_image_skipped_unless_strict(self, folder):
        (folder / "zebra" / "c.png").write_bytes(b"not a png")

        assert len(load_folder(folder, out_size=8)) == 3
        with pytest.raises(DatasetError, match="c.png"):
            load_folder(folder, out_size=8, strict=True)

    def test_empty_class_is_an_error(self, folder):
        (folder / "empty").mkdir()

        with pytest.raises(DatasetError, match="empty"):
            load_folder(folder, out_size=8)

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_folder(tmp_path / "nope", out_size=8)

    def test_decode_converts_to_rgb(self, tmp_path):
        path = tmp_path / "gray.png"
        Image.new("L", (4, 4), 128).save(path)

        assert decode_image(path).shape == (4, 4, 3)

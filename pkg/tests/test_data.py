import numpy as np
import pytest
from PIL import Image

from advdetect.data import (
    load_dataset,
    make_detector_split,
    make_synthetic,
    subsample,
    write_cifar10_binary,
    DatasetSplit,
)
from advdetect.types import FormatError, IoError, RangeError, SizeError


def _png(path, value):
    Image.fromarray(np.full((8, 8, 3), value, np.uint8)).save(path)


def test_image_dir(tmp_path):
    for cls in ("b_dogs", "a_cats"):
        (tmp_path / cls).mkdir()
        for i in range(3):
            _png(tmp_path / cls / f"{i}.png", 255 if cls == "a_cats" else 0)
    split = load_dataset(tmp_path, "IMAGE_DIR")
    assert split.x_train.shape == (6, 8, 8, 3)
    assert set(split.y_train.tolist()) == {0, 1}
    # lexicographic rank: a_cats -> 0 (white images)
    assert np.all(split.x_train[split.y_train == 0] == 1.0)
    assert split.num_classes == 2


def test_image_dir_with_halves(tmp_path):
    for half in ("train", "test"):
        for cls in ("x", "y"):
            (tmp_path / half / cls).mkdir(parents=True)
            _png(tmp_path / half / cls / "0.png", 128)
    split = load_dataset(tmp_path, "IMAGE_DIR")
    assert len(split.x_train) == len(split.x_test) == 2


def test_empty_dir_is_io_error(tmp_path):
    with pytest.raises(IoError):
        load_dataset(tmp_path, "IMAGE_DIR")
    with pytest.raises(IoError):
        load_dataset(tmp_path, "CIFAR10_BINARY")
    with pytest.raises(IoError):
        load_dataset(tmp_path / "nope", "IMAGE_DIR")


def test_cifar_binary_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, (20, 32, 32, 3)).astype(np.float32) / 255
    y = rng.integers(0, 10, 20)
    write_cifar10_binary(tmp_path, x, y, x[:7], y[:7])
    # one record is 1 label byte + 3072 pixel bytes
    assert (tmp_path / "test_batch.bin").stat().st_size == 7 * 3073
    split = load_dataset(tmp_path, "CIFAR10_BINARY")
    np.testing.assert_array_equal(split.x_train, x)
    np.testing.assert_array_equal(split.y_train, y)
    assert split.x_test.dtype == np.float32 and split.x_test.max() <= 1.0


def test_cifar_record_layout_is_channel_planar(tmp_path):
    rec = np.zeros(3073, np.uint8)
    rec[0] = 3
    rec[1] = 255          # R plane, pixel (0, 0)
    rec[1 + 1024 + 33] = 255   # G plane, pixel (1, 1)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        rec.tofile(tmp_path / name)
    split = load_dataset(tmp_path, "CIFAR10_BINARY")
    img = split.x_test[0]
    assert split.y_test[0] == 3
    assert img[0, 0, 0] == 1.0 and img[1, 1, 1] == 1.0 and img.sum() == 2.0


def test_cifar_corrupt_record(tmp_path):
    write_cifar10_binary(tmp_path, np.zeros((5, 32, 32, 3)), np.zeros(5, int), np.zeros((1, 32, 32, 3)), [0])
    with open(tmp_path / "test_batch.bin", "ab") as f:
        f.write(b"\x00\x01")
    with pytest.raises(FormatError):
        load_dataset(tmp_path, "CIFAR10_BINARY")


def test_detector_split_full_scale_sizes():
    x = np.zeros((10000, 1, 1, 1), np.float32)
    y = np.arange(10000) % 10
    sp = make_detector_split((x, y), 8000, 2000, seed=0)
    assert sp.sizes == (8000, 2000)
    assert not set(sp.train_idx) & set(sp.test_idx)
    again = make_detector_split((x, y), 8000, 2000, seed=0)
    assert np.array_equal(sp.train_idx, again.train_idx) and np.array_equal(sp.test_idx, again.test_idx)
    assert not np.array_equal(sp.train_idx, make_detector_split((x, y), 8000, 2000, seed=1).train_idx)


def test_detector_split_degenerate_and_errors():
    x = np.zeros((10, 1, 1, 1), np.float32)
    y = np.zeros(10, int)
    sp = make_detector_split((x, y), 0, 0, seed=0)
    assert len(sp.det_train_clean) == len(sp.det_test_clean) == 0
    with pytest.raises(SizeError):
        make_detector_split((x, y), 8, 3, seed=0)


def _balanced(n_per_class=5000, k=10):
    y = np.repeat(np.arange(k), n_per_class)
    x = np.zeros((len(y), 1, 1, 1), np.float32)
    return DatasetSplit(x, y, x[:1000], y[::50], k)


def test_subsample_counts():
    split = _balanced()
    assert subsample(split, 1.0, seed=0) is split
    sub = subsample(split, 0.1, seed=0)
    assert len(sub.y_train) == 5000
    # per-class tally oracle
    assert np.bincount(sub.y_train).tolist() == [500] * 10
    with pytest.raises(RangeError):
        subsample(split, 0.0, seed=0)
    with pytest.raises(RangeError):
        subsample(split, 1.5, seed=0)


def test_subsample_stratification_unbalanced():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 7, 3001)
    split = DatasetSplit(np.zeros((3001, 1, 1, 1), np.float32), y, np.zeros((1, 1, 1, 1), np.float32), y[:1], 7)
    for frac in (0.05, 0.33, 0.5):
        sub = subsample(split, frac, seed=3)
        expected = frac * np.bincount(y, minlength=7)
        assert np.all(np.abs(np.bincount(sub.y_train, minlength=7) - expected) <= 1)
        assert len(np.unique(sub.x_train)) <= 1


def test_synthetic_shapes():
    s = make_synthetic(50, 20, seed=1)
    assert s.x_train.shape == (50, 32, 32, 3) and s.x_test.shape == (20, 32, 32, 3)
    assert 0 <= s.x_train.min() and s.x_train.max() <= 1
    assert set(s.y_train.tolist()) == set(range(10))

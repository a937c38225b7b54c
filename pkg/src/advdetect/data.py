"""
Dataset loading and the classifier / detector splits.

Two on-disk formats are understood:

* ``CIFAR10_BINARY``: the public binary release, 3073-byte records (one label
  byte then 1024 R, 1024 G, 1024 B bytes). Files ``data_batch_1.bin`` ..
  ``data_batch_5.bin`` form the training set and ``test_batch.bin`` the test
  set; the directory may also be the parent of ``cifar-10-batches-bin``.
* ``IMAGE_DIR``: one subdirectory per class holding PNG files. The class index
  is the lexicographic rank of the folder name. If ``train/`` and ``test/``
  subdirectories exist they are used as the two halves, otherwise every image
  goes to the training half.
"""

from __future__ import annotations

import enum
import glob
import os
from dataclasses import dataclass

import numpy as np

from .types import FormatError, IoError, RangeError, SizeError

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)


class DataFormat(str, enum.Enum):
    CIFAR10_BINARY = "CIFAR10_BINARY"
    IMAGE_DIR = "IMAGE_DIR"


@dataclass
class DatasetSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int = 10

    @property
    def train(self):
        return self.x_train, self.y_train

    @property
    def test(self):
        return self.x_test, self.y_test


@dataclass
class DetectorSplit:
    """Two disjoint subsets of the classifier test set, by index."""

    train_idx: np.ndarray
    test_idx: np.ndarray
    det_train_clean: np.ndarray
    det_test_clean: np.ndarray
    det_train_labels: np.ndarray
    det_test_labels: np.ndarray

    @property
    def sizes(self):
        return len(self.train_idx), len(self.test_idx)


def _read_cifar_file(path):
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD} bytes")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise FormatError(f"{path}: label byte {labels.max()} out of range")
    # channel-planar -> (n, h, w, c)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return x.astype(np.float32) / 255.0, labels


def _cifar_root(path):
    for cand in (path, os.path.join(path, "cifar-10-batches-bin")):
        if os.path.isfile(os.path.join(cand, CIFAR_TEST_FILE)):
            return cand
    raise IoError(f"no CIFAR-10 binary batches under {path}")


def load_cifar10_binary(path) -> DatasetSplit:
    root = _cifar_root(path)
    xs, ys = [], []
    for name in CIFAR_TRAIN_FILES:
        fp = os.path.join(root, name)
        if not os.path.isfile(fp):
            raise IoError(f"missing training batch {fp}")
        x, y = _read_cifar_file(fp)
        xs.append(x)
        ys.append(y)
    x_test, y_test = _read_cifar_file(os.path.join(root, CIFAR_TEST_FILE))
    return DatasetSplit(np.concatenate(xs), np.concatenate(ys), x_test, y_test, 10)


def write_cifar10_binary(path, x_train, y_train, x_test, y_test) -> None:
    """Write arrays in the CIFAR-10 binary layout (training data spread over five files)."""
    os.makedirs(path, exist_ok=True)

    def encode(x, y):
        pix = np.clip(np.rint(np.asarray(x) * 255), 0, 255).astype(np.uint8)
        planar = pix.transpose(0, 3, 1, 2).reshape(len(pix), -1)
        return np.concatenate([np.asarray(y, np.uint8)[:, None], planar], axis=1).tobytes()

    for i, chunk in enumerate(np.array_split(np.arange(len(x_train)), 5)):
        with open(os.path.join(path, CIFAR_TRAIN_FILES[i]), "wb") as f:
            f.write(encode(x_train[chunk], y_train[chunk]))
    with open(os.path.join(path, CIFAR_TEST_FILE), "wb") as f:
        f.write(encode(x_test, y_test))


def _load_class_dirs(root):
    from PIL import Image

    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    xs, ys = [], []
    for label, cls in enumerate(classes):
        for fp in sorted(glob.glob(os.path.join(root, cls, "*.png"))):
            try:
                with Image.open(fp) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except OSError as e:
                raise FormatError(f"unreadable image {fp}: {e}") from e
            xs.append(arr)
            ys.append(label)
    if not xs:
        return None, None, classes
    shapes = {a.shape for a in xs}
    if len(shapes) != 1:
        raise FormatError(f"images under {root} have mixed sizes {sorted(shapes)}")
    return np.stack(xs), np.asarray(ys, dtype=np.int64), classes


def load_image_dir(path) -> DatasetSplit:
    if not os.path.isdir(path):
        raise IoError(f"{path} is not a directory")
    halves = [os.path.join(path, "train"), os.path.join(path, "test")]
    if all(os.path.isdir(p) for p in halves):
        x_tr, y_tr, classes = _load_class_dirs(halves[0])
        x_te, y_te, classes_te = _load_class_dirs(halves[1])
        if classes_te != classes:
            raise FormatError("train/ and test/ class folders differ")
    else:
        x_tr, y_tr, classes = _load_class_dirs(path)
        x_te = y_te = None
    if x_tr is None:
        raise IoError(f"no PNG images found under {path}")
    if x_te is None:
        x_te = np.zeros((0,) + x_tr.shape[1:], np.float32)
        y_te = np.zeros(0, np.int64)
    return DatasetSplit(x_tr, y_tr, x_te, y_te, len(classes))


def load_dataset(path, format="CIFAR10_BINARY") -> DatasetSplit:
    fmt = DataFormat(format)
    if not os.path.exists(path):
        raise IoError(f"dataset path {path} does not exist")
    if fmt is DataFormat.CIFAR10_BINARY:
        return load_cifar10_binary(path)
    return load_image_dir(path)


def make_detector_split(test, n_train: int, n_test: int, seed: int) -> DetectorSplit:
    """Uniform class-agnostic sampling without replacement of two disjoint subsets."""
    x, y = test
    if n_train < 0 or n_test < 0:
        raise SizeError("split sizes must be non-negative")
    if n_train + n_test > len(x):
        raise SizeError(f"requested {n_train}+{n_test} samples from a set of {len(x)}")
    order = np.random.default_rng(seed).permutation(len(x))
    tr = np.sort(order[:n_train])
    te = np.sort(order[n_train:n_train + n_test])
    return DetectorSplit(tr, te, x[tr], x[te], y[tr], y[te])


def stratified_indices(labels, fraction: float, seed: int) -> np.ndarray:
    if not 0.0 < fraction <= 1.0:
        raise RangeError(f"fraction must lie in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    if fraction == 1.0:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    keep = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        k = int(round(fraction * len(idx)))
        keep.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(keep)) if keep else np.zeros(0, np.int64)


def subsample(split: DatasetSplit, fraction: float, seed: int) -> DatasetSplit:
    """Class-stratified subset of both halves; ``fraction=1`` returns the split as is."""
    if not 0.0 < fraction <= 1.0:
        raise RangeError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return split
    tr = stratified_indices(split.y_train, fraction, seed)
    te = stratified_indices(split.y_test, fraction, seed + 1)
    return DatasetSplit(
        split.x_train[tr], split.y_train[tr], split.x_test[te], split.y_test[te], split.num_classes
    )


def make_synthetic(n_train=5000, n_test=1000, num_classes=10, size=32, seed=0, noise=0.1, block=4):
    """
    CIFAR-shaped stand-in data for offline runs and tests.

    Each class owns a random colour texture built from a few sinusoids with
    frequencies up to 4 cycles per image. A sample is its class texture,
    circularly shifted by a multiple of ``block`` pixels and contrast-scaled,
    plus a weaker texture from another class and Gaussian pixel noise.
    Block-aligned shifts keep the classes learnable after block shuffling.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    templates = np.zeros((num_classes, size, size, 3))
    for k in range(num_classes):
        for ch in range(3):
            for _ in range(6):
                fy, fx = rng.integers(-4, 5, size=2)
                ph = rng.uniform(0, 2 * np.pi)
                templates[k, :, :, ch] += rng.normal() * np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
    templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)

    def draw(n):
        y = rng.permutation(np.arange(n) % num_classes)
        x = np.empty((n, size, size, 3))
        for i in range(n):
            shift = tuple(rng.integers(-2, 3, size=2) * block)
            other = (y[i] + rng.integers(1, num_classes)) % num_classes
            t = np.roll(templates[y[i]], shift, axis=(0, 1))
            d = np.roll(templates[other], tuple(-s for s in shift), axis=(0, 1))
            x[i] = 0.5 + 0.15 * rng.uniform(0.6, 1.0) * t + 0.075 * d
        x += rng.normal(scale=noise, size=x.shape)
        return np.clip(x, 0, 1).astype(np.float32), y.astype(np.int64)

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    return DatasetSplit(x_tr, y_tr, x_te, y_te, num_classes)

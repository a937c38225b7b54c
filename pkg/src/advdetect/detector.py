"""
Clean-vs-adversarial detector over concatenated plain and robust logits.

For an input image the feature vector is ``[logits_plain(x), logits_robust(x)]``
with no softmax or other normalisation. A small binary model (logistic
regression by default, or a one-hidden-layer MLP) maps it to a score in
[0, 1]; scores at or above the threshold are flagged adversarial.

sklearn is used only to fit; scoring runs on the stored weights in numpy so a
saved detector needs nothing but its ``.npz`` file.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import artifacts
from .classifiers import Classifier, logits
from .types import DataError, RangeError, ShapeError


class DetectorKind(str, enum.Enum):
    LOGISTIC = "LOGISTIC"
    MLP = "MLP"


@dataclass
class DetectorModel:
    kind: DetectorKind
    # per-feature standardisation applied before the weights
    mean: np.ndarray
    scale: np.ndarray
    # LOGISTIC: [w (d,), b ()]; MLP: [W1 (d, h), b1 (h,), w2 (h,), b2 ()]
    weights: list = field(default_factory=list)
    threshold: float = 0.5

    def __post_init__(self):
        self.kind = DetectorKind(self.kind)
        if not 0.0 < self.threshold <= 1.0:
            raise RangeError("threshold must lie in (0, 1]")

    @property
    def feature_width(self) -> int:
        return len(self.mean)

    def decision_function(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.feature_width:
            raise ShapeError(f"expected features of width {self.feature_width}, got {f.shape}")
        z = (f - self.mean) / self.scale
        if self.kind is DetectorKind.LOGISTIC:
            w, b = self.weights
            return z @ w + b
        w1, b1, w2, b2 = self.weights
        return np.maximum(z @ w1 + b1, 0.0) @ w2 + b2


def zero_logistic(width: int, threshold: float = 0.5) -> DetectorModel:
    return DetectorModel(DetectorKind.LOGISTIC, np.zeros(width), np.ones(width), [np.zeros(width), np.float64(0.0)], threshold)


def extract_features(plain: Classifier, robust: Classifier, images) -> np.ndarray:
    if plain.num_classes != robust.num_classes:
        raise ShapeError(f"classifiers disagree on num_classes: {plain.num_classes} vs {robust.num_classes}")
    return np.concatenate([logits(plain, images), logits(robust, images)], axis=1).astype(np.float64)


def labelled_features(plain, robust, clean, adv):
    """Stack clean (label 0) and adversarial (label 1) features."""
    f = np.concatenate([extract_features(plain, robust, clean), extract_features(plain, robust, adv)])
    y = np.concatenate([np.zeros(len(clean), np.int64), np.ones(len(adv), np.int64)])
    return f, y


def train_detector(features, labels, kind="LOGISTIC", seed: int = 0, threshold: float = 0.5) -> DetectorModel:
    from sklearn.linear_model import LogisticRegression
    from sklearn.neural_network import MLPClassifier

    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if f.ndim != 2 or len(f) != len(y):
        raise ShapeError("features must be (n, d) with one label per row")
    if set(np.unique(y)) != {0, 1}:
        raise DataError("detector training needs both clean (0) and adversarial (1) samples")
    kind = DetectorKind(kind)
    mean = f.mean(axis=0)
    scale = f.std(axis=0)
    scale[scale == 0] = 1.0
    z = (f - mean) / scale
    if kind is DetectorKind.LOGISTIC:
        clf = LogisticRegression(C=1.0, max_iter=2000, random_state=seed).fit(z, y)
        weights = [clf.coef_[0].copy(), np.float64(clf.intercept_[0])]
    else:
        clf = MLPClassifier(hidden_layer_sizes=(64,), alpha=1e-4, max_iter=1000, random_state=seed).fit(z, y)
        weights = [clf.coefs_[0], clf.intercepts_[0], clf.coefs_[1][:, 0], np.float64(clf.intercepts_[1][0])]
    return DetectorModel(kind, mean, scale, weights, threshold)


def score(model: DetectorModel, features) -> np.ndarray:
    return expit(model.decision_function(features))


def detect_features(model: DetectorModel, features) -> np.ndarray:
    return score(model, features) >= model.threshold


def detect(model: DetectorModel, plain, robust, images) -> np.ndarray:
    return detect_features(model, extract_features(plain, robust, images))


def save_detector(model: DetectorModel, path, meta: dict | None = None, inputs: dict | None = None) -> dict:
    arrays = {"mean": model.mean, "scale": model.scale}
    arrays.update({f"w{i}": np.asarray(w) for i, w in enumerate(model.weights)})
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    info = {"kind": model.kind.value, "feature_width": model.feature_width, "threshold": model.threshold}
    info.update(meta or {})
    return artifacts.write_sidecar(path, info, inputs)


def load_detector(path, check=True) -> DetectorModel:
    meta = artifacts.verify(path) if check else artifacts.read_sidecar(path)
    with np.load(path) as z:
        n = len([k for k in z.files if k.startswith("w")])
        weights = [z[f"w{i}"] for i in range(n)]
        return DetectorModel(meta["kind"], z["mean"], z["scale"], weights, meta["threshold"])

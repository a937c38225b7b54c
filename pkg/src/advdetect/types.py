"""
Shared value types, validation and error classes.

Images travel through the package as numpy arrays laid out channel-last,
``(n, h, w, c)``, with intensities in ``[0, 1]``. Every module that accepts an
image batch runs it through :func:`validate_batch` first.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np


class AdvDetectError(Exception):
    """Base class for all package errors."""


class RangeError(AdvDetectError, ValueError):
    pass


class ShapeError(AdvDetectError, ValueError):
    pass


class SizeError(AdvDetectError, ValueError):
    pass


class ConfigError(AdvDetectError, ValueError):
    pass


class DataError(AdvDetectError, ValueError):
    pass


class EmptyError(AdvDetectError, ZeroDivisionError):
    pass


class FormatError(AdvDetectError, ValueError):
    pass


class IoError(AdvDetectError, OSError):
    pass


class StaleArtifactError(AdvDetectError, RuntimeError):
    """An upstream artifact is missing or no longer matches its recorded hash."""


def validate_batch(images):
    """
    Check that ``images`` is a rank-4 ``(n, h, w, c)`` batch in ``[0, 1]``.

    The input is returned unchanged so the call can be used inline.

    :raises ShapeError: on rank other than 4 or a zero-sized axis
    :raises RangeError: if any element (including NaN) lies outside [0, 1]
    """
    arr = np.asarray(images)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (n, h, w, c) batch, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"batch has an empty axis: {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise RangeError(f"pixels must be floating point in [0, 1], got {arr.dtype}")
    # NaN fails both comparisons, so the negated form rejects it too
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise RangeError("pixel values must lie in [0, 1]")
    return images


def validate_labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or len(labels) != n:
        raise SizeError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integers, got {labels.dtype}")
    if num_classes is not None and len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise RangeError(f"labels must lie in [0, {num_classes})")
    return labels


def validate_logits(values) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"logits must be (n, num_classes), got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise DataError("logits contain NaN or Inf")
    return values


@dataclass(frozen=True)
class PermutationKey:
    """Secret key for block-wise pixel shuffling: PRNG seed plus block size."""

    seed: int
    block_size: int = 4

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise RangeError("key seed must be an unsigned 64-bit integer")
        if int(self.block_size) < 1:
            raise RangeError("block_size must be >= 1")

    def check_dims(self, h: int, w: int) -> None:
        m = self.block_size
        if h % m or w % m:
            raise ShapeError(f"block size {m} does not divide image size {h}x{w}")


class Family(str, enum.Enum):
    FGSM = "FGSM"
    PGD = "PGD"
    JSMA = "JSMA"
    CW = "CW"


class TargetRule(str, enum.Enum):
    UNTARGETED = "UNTARGETED"
    NEXT_CLASS = "NEXT_CLASS"
    FIXED = "FIXED"


_DEFAULT_TARGET = {
    Family.FGSM: TargetRule.UNTARGETED,
    Family.PGD: TargetRule.UNTARGETED,
    Family.JSMA: TargetRule.NEXT_CLASS,
    Family.CW: TargetRule.NEXT_CLASS,
}


@dataclass(frozen=True)
class AttackConfig:
    """
    Attack family and parameters. Fields irrelevant to ``family`` are ignored.

    Defaults follow the experimental setup: eps 8/255 for FGSM/PGD, CW
    confidence 0, JSMA theta 1.0 and gamma 0.1. PGD step size, step count and
    the CW optimiser settings are conventional choices.
    """

    family: Family
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_start: bool = True
    confidence: float = 0.0
    theta_mag: float = 1.0
    gamma: float = 0.1
    target_rule: TargetRule | None = None
    fixed_target: int = 0
    # CW optimiser
    cw_lr: float = 1e-2
    cw_iters: int = 100
    cw_initial_c: float = 1e-2
    cw_binary_steps: int = 5
    cw_abort_early: bool = True
    # JSMA candidate pool per iteration (None = exhaustive pair search)
    jsma_candidates: int | None = 64
    batch_size: int = 100

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        rule = _DEFAULT_TARGET[self.family] if self.target_rule is None else TargetRule(self.target_rule)
        object.__setattr__(self, "target_rule", rule)
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.family is Family.PGD and (self.alpha <= 0 or self.steps < 1):
            raise ConfigError("PGD needs alpha > 0 and steps >= 1")
        if self.family is Family.JSMA and not 0.0 <= self.gamma <= 1.0:
            raise RangeError("gamma must lie in [0, 1]")
        if self.family is Family.CW:
            if self.confidence < 0:
                raise ConfigError("CW confidence must be >= 0")
            if self.cw_iters < 1 or self.cw_lr <= 0 or self.cw_binary_steps < 1:
                raise ConfigError("CW needs positive iters, lr and binary search steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        d["target_rule"] = self.target_rule.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary confusion counts with adversarial as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if int(getattr(self, name)) < 0:
                raise RangeError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

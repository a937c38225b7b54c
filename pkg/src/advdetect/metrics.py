"""
Detection metrics and evaluation protocols.

Adversarial is the positive class throughout. ``acc``, ``tpr`` and ``fpr`` are
plain ratios of confusion counts; ``roc_auc`` integrates the ROC curve with
the trapezoid rule over distinct score thresholds, which gives tied
clean/adversarial pairs half credit.
"""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields

import numpy as np

from .detector import DetectorModel, extract_features, score
from .types import ConfigError, ConfusionMatrix, DataError, EmptyError, SizeError


def confusion(pred, truth) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape or pred.ndim != 1 or len(pred) == 0:
        raise SizeError(f"need equal-length non-empty vectors, got {pred.shape} and {truth.shape}")
    return ConfusionMatrix(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        tn=int(np.sum(~pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
    )


def acc(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / (cm.tp + cm.fp + cm.tn + cm.fn)


def tpr(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0:
        raise EmptyError("TPR undefined without positives")
    return cm.tp / (cm.tp + cm.fn)


def fpr(cm: ConfusionMatrix) -> float:
    if cm.tn + cm.fp == 0:
        raise EmptyError("FPR undefined without negatives")
    return cm.fp / (cm.tn + cm.fp)


def roc_curve(scores, truth):
    """
    ROC points for thresholds at every distinct score, highest first, with
    (0, 0) prepended. Returns ``(fpr, tpr, thresholds)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=bool)
    if s.shape != t.shape or s.ndim != 1:
        raise SizeError("scores and truth must be equal-length vectors")
    n_pos = int(t.sum())
    n_neg = len(t) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both positive and negative samples")
    tp, fp, thr = _roc_counts(s, t)
    return fp / n_neg, tp / n_pos, thr


def _roc_counts(s, t):
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.r_[0, np.cumsum(t)[ends]]
    fp = np.r_[0, np.cumsum(~t)[ends]]
    return tp, fp, np.r_[np.inf, s[ends]]


def roc_auc(scores, truth) -> float:
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=bool)
    if s.shape != t.shape or s.ndim != 1:
        raise SizeError("scores and truth must be equal-length vectors")
    n_pos = int(t.sum())
    n_neg = len(t) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both positive and negative samples")
    tp, fp, _ = _roc_counts(s, t)
    # trapezoid in integer counts, divided once at the end
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * n_pos * n_neg)


@dataclass
class DetectionResult:
    auc: float
    acc: float
    cm: ConfusionMatrix
    scores: np.ndarray
    truth: np.ndarray


def evaluate_scores(scores, truth, threshold: float) -> DetectionResult:
    truth = np.asarray(truth, dtype=bool)
    cm = confusion(np.asarray(scores) >= threshold, truth)
    return DetectionResult(roc_auc(scores, truth), acc(cm), cm, np.asarray(scores), truth)


def evaluate_features(detector: DetectorModel, clean_features, adv_features) -> DetectionResult:
    f = np.concatenate([clean_features, adv_features])
    truth = np.r_[np.zeros(len(clean_features), bool), np.ones(len(adv_features), bool)]
    return evaluate_scores(score(detector, f), truth, detector.threshold)


def evaluate_detector(detector: DetectorModel, plain, robust, clean_test, adv_test) -> DetectionResult:
    """Score a clean set and its adversarial counterpart; AUC is threshold-free, Acc at the detector threshold."""
    adv = getattr(adv_test, "adv", adv_test)
    return evaluate_features(
        detector, extract_features(plain, robust, clean_test), extract_features(plain, robust, adv)
    )


@dataclass
class ReportRow:
    detector: str
    train_attack: str
    eval_attack: str
    auc: float | str
    acc: float | str
    n_clean: int | str
    n_adv: int | str
    threshold: float | str
    seed: int | str

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]


SEEN = "-"


def transfer_eval(detector: DetectorModel, trained_on, eval_attacks, plain, robust, clean_test, adv_sets: dict, seed=0, exclude_seen=False, name="proposed") -> list[ReportRow]:
    """
    Accuracy of a detector fitted on one attack family against other families.

    ``adv_sets`` maps family name -> adversarial batch (or array) generated
    from ``clean_test``. The training family may appear in ``eval_attacks``
    only with ``exclude_seen=True``; its row is then emitted with ``-`` metrics.
    """
    train_family = _family_name(trained_on)
    rows = []
    if not eval_attacks:
        return rows
    clean_f = extract_features(plain, robust, clean_test)
    for atk in eval_attacks:
        fam = _family_name(atk)
        if fam == train_family:
            if not exclude_seen:
                raise ConfigError(f"{fam} is the detector's training family; pass exclude_seen=True")
            rows.append(ReportRow(name, train_family, fam, SEEN, SEEN, SEEN, SEEN, detector.threshold, seed))
            continue
        adv = getattr(adv_sets[fam], "adv", adv_sets[fam])
        res = evaluate_features(detector, clean_f, extract_features(plain, robust, adv))
        rows.append(ReportRow(name, train_family, fam, res.auc, res.acc, len(clean_f), len(adv), detector.threshold, seed))
    return rows


def _family_name(atk) -> str:
    fam = getattr(atk, "family", atk)
    return getattr(fam, "value", str(fam))


def write_csv(path, rows, columns=None) -> None:
    rows = list(rows)
    if columns is None:
        columns = ReportRow.columns()
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            vals = astuple(r) if hasattr(r, "__dataclass_fields__") else tuple(r[c] for c in columns)
            w.writerow([_fmt(v) for v in vals])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v

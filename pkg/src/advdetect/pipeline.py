"""
Staged experiment runner behind the ``advdetect`` command.

Stages and their outputs under ``out/``::

    train         models/plain.pt, models/robust.pt, models/robust.key.json
    attack        attacks/<family>.npz           (all generated on the plain model)
    fit-detector  detector/<family>.npz          (one detector per training family)
    evaluate      reports/table{2,3,4,5}_*.csv, reports/scores_<family>.npz
    report        reports/summary.md, reports/roc.png

Every binary gets a JSON sidecar (see :mod:`advdetect.artifacts`). A stage
verifies the hash chain of everything it reads and also checks that the
upstream artifact was built from the same config section it would use now,
so editing the config without rerunning earlier stages raises
:class:`StaleArtifactError` instead of mixing results.

Seeds: the config holds a single base ``seed``; stage seeds are fixed offsets
from it (see ``SEED_OFFSETS``). The shuffle key seed is separate because it
is a secret, not an experiment seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import artifacts
from .attacks import generate_attack_set, load_attack_set, save_attack_set
from .classifiers import TrainConfig, accuracy, load_classifier, save_classifier, train_classifier
from .data import DataFormat, load_dataset, make_detector_split, subsample
from .detector import DetectorKind, extract_features, labelled_features, load_detector, save_detector, train_detector
from .metrics import SEEN, ReportRow, evaluate_features, read_csv, roc_curve, transfer_eval, write_csv
from .types import AttackConfig, ConfigError, Family, IoError, PermutationKey, StaleArtifactError

log = logging.getLogger(__name__)

DATA_ENV = "ADVDETECT_DATA_DIR"
FAMILIES = [f.value for f in Family]
SEED_OFFSETS = {"subsample": 0, "plain": 0, "robust": 1, "split": 2, "attack": 3, "detector": 0}

# Published full-scale results of the Mahalanobis-distance detector (Lee et al.),
# carried as constants for side-by-side reporting; that detector is not
# implemented here.
LEE_REFERENCE_AUC = {"FGSM": 0.994, "PGD": 0.983, "CW": 0.727, "JSMA": 0.921}
LEE_REFERENCE_ACC = {"FGSM": 0.990, "PGD": 0.974, "CW": 0.598, "JSMA": 0.865}
LEE_REFERENCE_TRANSFER_FROM_CW = {"FGSM": 0.971, "PGD": 0.960, "JSMA": 0.695}
LEE_NAME = "lee_mahalanobis_reference"

TABLE2 = "table2_classification.csv"
TABLE3 = "table3_auc.csv"
TABLE4 = "table4_acc.csv"
TABLE5 = "table5_transfer.csv"
TABLE2_COLUMNS = ["classifier", "eval_attack", "acc", "n", "seed"]


# --- config -----------------------------------------------------------------

@dataclass
class DatasetConfig:
    path: str | None = None
    format: str = "CIFAR10_BINARY"
    fraction: float = 0.1

    def __post_init__(self):
        DataFormat(self.format)
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("dataset.fraction must lie in (0, 1]")


@dataclass
class KeyConfig:
    seed: int = 2024
    block_size: int = 4

    def key(self) -> PermutationKey:
        return PermutationKey(self.seed, self.block_size)


@dataclass
class DetectorConfig:
    kind: str = "LOGISTIC"
    threshold: float = 0.5
    n_train: int = 800
    n_test: int = 200
    train_attacks: list = field(default_factory=lambda: list(FAMILIES))
    transfer_from: str = "CW"

    def __post_init__(self):
        DetectorKind(self.kind)
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("detector.threshold must lie in (0, 1]")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("detector.n_train and detector.n_test must be positive")
        for fam in list(self.train_attacks) + [self.transfer_from]:
            Family(fam)
        if self.transfer_from not in self.train_attacks:
            raise ConfigError("detector.transfer_from must be one of detector.train_attacks")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    plain: TrainConfig = field(default_factory=TrainConfig)
    robust: TrainConfig = field(default_factory=TrainConfig)
    key: KeyConfig = field(default_factory=KeyConfig)
    attacks: dict = field(default_factory=lambda: {f: AttackConfig(f) for f in FAMILIES})
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: int = 0
    out: str = "out"

    def __post_init__(self):
        missing = set(self.detector.train_attacks) - set(self.attacks)
        if missing:
            raise ConfigError(f"detector.train_attacks lists families with no attack config: {sorted(missing)}")

    def stage_seed(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    def train_config(self, which: str) -> TrainConfig:
        return dataclasses.replace(getattr(self, which), seed=self.stage_seed(which))

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "plain": _train_dict(self.plain),
            "robust": _train_dict(self.robust),
            "key": asdict(self.key),
            "attacks": {f: _attack_dict(a) for f, a in self.attacks.items()},
            "detector": asdict(self.detector),
            "seed": self.seed,
            "out": self.out,
        }

    def dirs(self) -> dict:
        return {k: os.path.join(self.out, k) for k in ("models", "attacks", "detector", "reports")}


def _train_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d.pop("seed")
    return d


def _attack_dict(cfg: AttackConfig) -> dict:
    d = cfg.to_dict()
    d.pop("family")
    return d


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{name} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if cls is TrainConfig:
        # experiment seeds come from the top-level seed only
        unknown |= {"seed"} & set(data)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    attacks = {}
    raw_attacks = data.get("attacks")
    if raw_attacks is None:
        raw_attacks = {f: {} for f in FAMILIES}
    if not isinstance(raw_attacks, dict):
        raise ConfigError("attacks must be an object keyed by family")
    for fam, params in raw_attacks.items():
        try:
            Family(fam)
        except ValueError as e:
            raise ConfigError(f"unknown attack family {fam!r}") from e
        params = dict(params or {})
        if "family" in params:
            raise ConfigError(f"attacks.{fam} must not repeat the family")
        try:
            attacks[fam] = AttackConfig.from_dict({"family": fam, **params})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid attacks.{fam}: {e}") from e
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    out = data.get("out", "out")
    if not isinstance(out, str):
        raise ConfigError("out must be a path string")
    return ExperimentConfig(
        dataset=_section(DatasetConfig, data.get("dataset"), "dataset"),
        plain=_section(TrainConfig, data.get("plain"), "plain"),
        robust=_section(TrainConfig, data.get("robust"), "robust"),
        key=_section(KeyConfig, data.get("key"), "key"),
        attacks=attacks,
        detector=_section(DetectorConfig, data.get("detector"), "detector"),
        seed=seed,
        out=out,
    )


def load_config(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Read a JSON config; ``seed`` and ``out`` (CLI flags) override the file."""
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if isinstance(data, dict):
        if seed is not None:
            data["seed"] = seed
        if out is not None:
            data["out"] = out
    return config_from_dict(data)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _expect(meta: dict, name: str, value, path, stage: str):
    if meta.get(name) != value:
        raise StaleArtifactError(f"{path} was built with a different {name}; rerun `advdetect {stage}`")


# --- data -------------------------------------------------------------------

def dataset_path(cfg: ExperimentConfig) -> str:
    path = cfg.dataset.path or os.environ.get(DATA_ENV)
    if not path:
        raise IoError(f"no dataset: set dataset.path in the config or the {DATA_ENV} environment variable")
    return path


def load_data(cfg: ExperimentConfig):
    """Load and subsample the dataset. Returns ``(split, fingerprint)``."""
    split = subsample(load_dataset(dataset_path(cfg), cfg.dataset.format), cfg.dataset.fraction, cfg.stage_seed("subsample"))
    h = hashlib.sha256()
    for arr in (split.x_train, split.y_train, split.x_test, split.y_test):
        h.update(np.ascontiguousarray(arr).tobytes())
    return split, h.hexdigest()


def _detector_split(cfg, split):
    return make_detector_split(split.test, cfg.detector.n_train, cfg.detector.n_test, cfg.stage_seed("split"))


def _models(cfg):
    d = cfg.dirs()["models"]
    return os.path.join(d, "plain.pt"), os.path.join(d, "robust.pt")


def _attack_path(cfg, fam):
    return os.path.join(cfg.dirs()["attacks"], f"{fam.lower()}.npz")


def _detector_path(cfg, fam):
    return os.path.join(cfg.dirs()["detector"], f"{fam.lower()}.npz")


def _load_models(cfg, data_sha):
    plain_path, robust_path = _models(cfg)
    out = []
    for which, path in (("plain", plain_path), ("robust", robust_path)):
        model = load_classifier(path)
        meta = artifacts.read_sidecar(path)
        _expect(meta, "data_sha256", data_sha, path, "train")
        _expect(meta, "config_sha256", _digest(_model_section(cfg, which)), path, "train")
        out.append(model)
    return out


def _model_section(cfg, which):
    sec = {"train": asdict(cfg.train_config(which)), "dataset": asdict(cfg.dataset)}
    if which == "robust":
        sec["key"] = asdict(cfg.key)
    return sec


def _attack_section(cfg, fam):
    return {"attack": cfg.attacks[fam].to_dict(), "detector_split": [cfg.detector.n_train, cfg.detector.n_test], "seed": cfg.seed}


def _load_attack(cfg, fam):
    path = _attack_path(cfg, fam)
    batch = load_attack_set(path)
    _expect(artifacts.read_sidecar(path), "config_sha256", _digest(_attack_section(cfg, fam)), path, "attack")
    return batch


def _rows_for(batch, idx):
    """Rows of ``batch`` whose source index is in the sorted array ``idx``."""
    pos = np.searchsorted(batch.source_indices, idx)
    if np.any(pos >= len(batch.source_indices)) or not np.array_equal(batch.source_indices[pos], idx):
        raise StaleArtifactError("attack set does not cover the detector split; rerun `advdetect attack`")
    return batch.adv[pos]


# --- stages -----------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, verbose=False) -> dict:
    """Train the plain and robust classifiers on the training half."""
    split, data_sha = load_data(cfg)
    os.makedirs(cfg.dirs()["models"], exist_ok=True)
    paths = dict(zip(("plain", "robust"), _models(cfg)))
    for which in ("plain", "robust"):
        tc = cfg.train_config(which)
        key = cfg.key.key() if which == "robust" else None
        log.info("training %s classifier (%s, %d epochs)", which, tc.arch, tc.epochs)
        model = train_classifier(split, tc, key, verbose=verbose)
        test_acc = accuracy(model, *split.test) if len(split.y_test) else None
        save_classifier(
            model,
            paths[which],
            {"role": which, "data_sha256": data_sha, "config_sha256": _digest(_model_section(cfg, which)), "clean_test_acc": test_acc},
        )
        log.info("%s clean test accuracy %s", which, test_acc)
    return paths


def cmd_attack(cfg: ExperimentConfig, families=None, verbose=False) -> dict:
    """Attack the detector-split test images on the plain classifier, one file per family."""
    split, data_sha = load_data(cfg)
    plain, _ = _load_models(cfg, data_sha)
    ds = _detector_split(cfg, split)
    idx = np.union1d(ds.train_idx, ds.test_idx)
    x, y = split.x_test[idx], split.y_test[idx]
    os.makedirs(cfg.dirs()["attacks"], exist_ok=True)
    plain_path = _models(cfg)[0]
    paths = {}
    for fam in families or list(cfg.attacks):
        acfg = cfg.attacks[fam]
        log.info("generating %s on %d images", fam, len(x))
        batch = generate_attack_set(plain, x, y, acfg, seed=cfg.stage_seed("attack"), source_indices=idx, verbose=verbose)
        path = _attack_path(cfg, fam)
        save_attack_set(
            batch,
            path,
            cfg.stage_seed("attack"),
            inputs={"model": plain_path},
            extra={"config_sha256": _digest(_attack_section(cfg, fam)), "success_rate": float(batch.success_mask.mean())},
        )
        log.info("%s success rate %.3f", fam, batch.success_mask.mean())
        paths[fam] = path
    return paths


def cmd_fit_detector(cfg: ExperimentConfig) -> dict:
    """Fit one detector per family in ``detector.train_attacks`` on the detector-train half."""
    split, data_sha = load_data(cfg)
    plain, robust = _load_models(cfg, data_sha)
    ds = _detector_split(cfg, split)
    os.makedirs(cfg.dirs()["detector"], exist_ok=True)
    plain_path, robust_path = _models(cfg)
    paths = {}
    for fam in cfg.detector.train_attacks:
        batch = _load_attack(cfg, fam)
        f, y = labelled_features(plain, robust, ds.det_train_clean, _rows_for(batch, ds.train_idx))
        det = train_detector(f, y, cfg.detector.kind, cfg.stage_seed("detector"), cfg.detector.threshold)
        path = _detector_path(cfg, fam)
        section = {"detector": asdict(cfg.detector), "attack": _digest(_attack_section(cfg, fam))}
        save_detector(
            det,
            path,
            {"train_attacks": [fam], "seed": cfg.stage_seed("detector"), "n_train": len(f), "config_sha256": _digest(section)},
            inputs={"plain": plain_path, "robust": robust_path, "attack_set": _attack_path(cfg, fam)},
        )
        paths[fam] = path
    return paths


def _load_detector(cfg, fam):
    path = _detector_path(cfg, fam)
    det = load_detector(path)
    section = {"detector": asdict(cfg.detector), "attack": _digest(_attack_section(cfg, fam))}
    _expect(artifacts.read_sidecar(path), "config_sha256", _digest(section), path, "fit-detector")
    return det


def cmd_evaluate(cfg: ExperimentConfig) -> dict:
    """Write the four report CSVs plus per-family detector scores."""
    split, data_sha = load_data(cfg)
    plain, robust = _load_models(cfg, data_sha)
    ds = _detector_split(cfg, split)
    rep = cfg.dirs()["reports"]
    os.makedirs(rep, exist_ok=True)
    seed = cfg.seed
    families = list(cfg.attacks)
    batches = {fam: _load_attack(cfg, fam) for fam in families}
    plain_path, robust_path = _models(cfg)
    inputs = {"plain": plain_path, "robust": robust_path}
    inputs.update({f"attack_{fam}": _attack_path(cfg, fam) for fam in families})

    # classification accuracy, clean and under each (plain-generated) attack
    rows2 = []
    for name, model in (("plain", plain), ("robust", robust)):
        rows2.append({"classifier": name, "eval_attack": "clean", "acc": accuracy(model, *split.test), "n": len(split.y_test), "seed": seed})
        for fam, b in batches.items():
            y = split.y_test[b.source_indices]
            rows2.append({"classifier": name, "eval_attack": fam, "acc": accuracy(model, b.adv, y), "n": len(y), "seed": seed})

    # same-family detection
    clean_f = extract_features(plain, robust, ds.det_test_clean)
    rows3, rows4 = [], []
    det_inputs = dict(inputs)
    for fam in cfg.detector.train_attacks:
        det = _load_detector(cfg, fam)
        det_inputs[f"detector_{fam}"] = _detector_path(cfg, fam)
        adv_f = extract_features(plain, robust, _rows_for(batches[fam], ds.test_idx))
        res = evaluate_features(det, clean_f, adv_f)
        common = dict(detector="proposed", train_attack=fam, eval_attack=fam, n_clean=len(clean_f), n_adv=len(adv_f), threshold=det.threshold, seed=seed)
        rows3.append(ReportRow(auc=res.auc, acc=SEEN, **common))
        rows4.append(ReportRow(auc=SEEN, acc=res.acc, **common))
        score_path = os.path.join(rep, f"scores_{fam.lower()}.npz")
        with open(score_path, "wb") as f:
            np.savez(f, scores=res.scores, truth=res.truth)
        artifacts.write_sidecar(score_path, {"kind": "scores", "family": fam, "auc": res.auc, "acc": res.acc}, {"detector": _detector_path(cfg, fam)})
    for fam in cfg.detector.train_attacks:
        if fam in LEE_REFERENCE_AUC:
            ref = dict(detector=LEE_NAME, train_attack=fam, eval_attack=fam, n_clean=2000, n_adv=2000, threshold=SEEN, seed=SEEN)
            rows3.append(ReportRow(auc=LEE_REFERENCE_AUC[fam], acc=SEEN, **ref))
            rows4.append(ReportRow(auc=SEEN, acc=LEE_REFERENCE_ACC[fam], **ref))

    # transfer from a single training family
    src = cfg.detector.transfer_from
    det = _load_detector(cfg, src)
    test_batches = {fam: _rows_for(b, ds.test_idx) for fam, b in batches.items()}
    rows5 = transfer_eval(det, src, families, plain, robust, ds.det_test_clean, test_batches, seed=seed, exclude_seen=True)
    if src == "CW":
        for fam, a in LEE_REFERENCE_TRANSFER_FROM_CW.items():
            if fam in families:
                rows5.append(ReportRow(LEE_NAME, src, fam, SEEN, a, 2000, 2000, SEEN, SEEN))

    paths = {}
    for fname, rows, cols in ((TABLE2, rows2, TABLE2_COLUMNS), (TABLE3, rows3, None), (TABLE4, rows4, None), (TABLE5, rows5, None)):
        path = os.path.join(rep, fname)
        write_csv(path, rows, cols)
        artifacts.write_sidecar(path, {"kind": "report_table", "seed": seed, "data_sha256": data_sha}, det_inputs)
        paths[fname] = path
    return paths


def cmd_report(cfg: ExperimentConfig) -> dict:
    """Markdown summary and ROC plot, built only from verified evaluate outputs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rep = cfg.dirs()["reports"]
    tables = {}
    for fname in (TABLE2, TABLE3, TABLE4, TABLE5):
        path = os.path.join(rep, fname)
        artifacts.verify(path)
        tables[fname] = read_csv(path)

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    score_files = {}
    for fam in cfg.detector.train_attacks:
        path = os.path.join(rep, f"scores_{fam.lower()}.npz")
        meta = artifacts.verify(path)
        with np.load(path) as z:
            fp, tp, _ = roc_curve(z["scores"], z["truth"])
        ax.plot(fp, tp, label=f"{fam} (AUC {meta['auc']:.3f})")
        score_files[f"scores_{fam}"] = path
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    ax.set_title("Detector ROC (same-family)")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    roc_path = os.path.join(rep, "roc.png")
    fig.savefig(roc_path, dpi=120, metadata={"Software": None})
    plt.close(fig)

    lines = ["# advdetect run summary", "", f"Base seed {cfg.seed}; output `{cfg.out}`.", ""]
    lines += _md_section("Classification accuracy", tables[TABLE2], TABLE2_COLUMNS)
    lines += _md_section("Detection AUC (detector trained and tested on the same family)", tables[TABLE3], ReportRow.columns())
    lines += _md_section("Detection accuracy at the detector threshold", tables[TABLE4], ReportRow.columns())
    lines += _md_section(f"Transfer: detector trained on {cfg.detector.transfer_from} only", tables[TABLE5], ReportRow.columns())
    lines += [
        f"Rows named `{LEE_NAME}` are published full-scale numbers for the Mahalanobis detector, "
        "included for comparison only. `-` marks a value that does not apply (the seen family in the transfer table).",
        "",
        "![ROC](roc.png)",
        "",
    ]
    md_path = os.path.join(rep, "summary.md")
    with open(md_path, "w") as f:
        f.write("\n".join(lines))
    inputs = {name: os.path.join(rep, name) for name in tables}
    inputs.update(score_files)
    artifacts.write_sidecar(md_path, {"kind": "report"}, inputs)
    artifacts.write_sidecar(roc_path, {"kind": "roc_plot"}, score_files)
    return {"summary": md_path, "roc": roc_path}


def _md_section(title, rows, cols):
    out = [f"## {title}", "", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    out += ["| " + " | ".join(str(r[c]) for c in cols) + " |" for r in rows]
    return out + [""]


STAGES = {
    "train": cmd_train,
    "attack": cmd_attack,
    "fit-detector": cmd_fit_detector,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run_all(cfg: ExperimentConfig) -> dict:
    cmd_train(cfg)
    cmd_attack(cfg)
    cmd_fit_detector(cfg)
    paths = cmd_evaluate(cfg)
    paths.update(cmd_report(cfg))
    return paths

"""End-to-end runs: build datasets from a config, train, write artifacts, sweep checkpoints.

A run directory is named by the config hash, so repeating a run with the same
config overwrites the same files rather than creating timestamped copies.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

import csnn
from csnn._io import write_atomic
from csnn.config import RunConfig, config_from_dict
from csnn.data import Dataset, load_csv, load_idx, make_ood_grid, moons_train_test
from csnn.evaluation import error_rate, evaluate_ood
from csnn.model import CsnnModel, dumps_model, load_model
from csnn.numeric import RNG_ALGORITHM, make_rng
from csnn.train import Checkpoint, TrainTrace, fit

MANIFEST = "manifest.json"
MODEL = "model.json"
TRACE = "trace.csv"
CHECKPOINT_DIR = "checkpoints"
SWEEP = "sweep.csv"


def load_datasets(cfg: RunConfig, rng: np.random.Generator):
    """(train, test) for the configured dataset. Moons consume ``rng``; files do not."""
    ds = cfg.dataset
    if ds.kind == "moons":
        return moons_train_test(ds.n_train, ds.n_test, ds.noise, rng)
    if ds.kind == "csv":
        train = load_csv(ds.train, ds.label_column, name="train")
        test = load_csv(ds.test, ds.label_column, name="test")
        if train.info["label_map"] != test.info["label_map"]:
            # keep the train ids; unseen test labels cannot be scored
            mapping = train.info["label_map"]
            inverse = {v: k for k, v in test.info["label_map"].items()}
            missing = sorted(set(inverse.values()) - set(mapping))
            if missing:
                raise ValueError(f"test labels {missing} do not occur in the training set")
            y = np.array([mapping[inverse[int(v)]] for v in test.y], dtype=np.int64)
            test = Dataset(test.X, y, train.num_classes, test.name, dict(test.info, label_map=mapping))
        elif test.num_classes != train.num_classes:
            test = Dataset(test.X, test.y, train.num_classes, test.name, test.info)
        return train, test
    train = load_idx(ds.train_images, ds.train_labels, ds.limit_train, rng, name="train")
    test = load_idx(ds.test_images, ds.test_labels, ds.limit_test, rng, name="test")
    C = max(train.num_classes, test.num_classes)
    return (Dataset(train.X, train.y, C, train.name, train.info), Dataset(test.X, test.y, C, test.name, test.info))


def load_ood(cfg: RunConfig, train: Dataset, test: Dataset, rng: np.random.Generator) -> Optional[np.ndarray]:
    o = cfg.ood
    if o.kind == "none":
        return None
    if o.kind == "grid":
        ref = np.concatenate([train.X, test.X])
        return make_ood_grid(ref, o.grid_per_dim, o.low, o.high, o.min_dist).points
    if o.kind == "csv":
        return load_csv(o.path, label_column=None, name="ood").X
    return load_idx(o.images, o.labels, o.limit, rng, name="ood").X


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / f"run-{cfg.hash()}"


def _sha256(data) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def versions() -> dict:
    return {"csnn": csnn.__version__, "numpy": np.__version__, "python": platform.python_version(),
            "rng": RNG_ALGORITHM}


def checkpoint_name(epoch: int) -> str:
    return f"epoch-{epoch:06d}.json"


@dataclass
class RunResult:
    directory: Path
    model: CsnnModel
    trace: TrainTrace
    checkpoints: list = field(default_factory=list)
    train: Optional[Dataset] = None
    test: Optional[Dataset] = None


def train_run(cfg: RunConfig, write: bool = True) -> RunResult:
    """Generate data, train, and (optionally) write model, trace, checkpoints and manifest."""
    rng = make_rng(cfg.seed)
    train, test = load_datasets(cfg, rng)
    model, trace, checkpoints = fit(train, cfg.model, cfg.train, val=test, rng=rng)
    out = run_dir(cfg)
    if write:
        files = {MODEL: dumps_model(model), TRACE: trace.to_csv()}
        for c in checkpoints:
            files[f"{CHECKPOINT_DIR}/{checkpoint_name(c.epoch)}"] = dumps_model(c.model)
        for name, text in files.items():
            write_atomic(out / name, text)
        manifest = {
            "command": "train",
            "config": cfg.to_dict(),
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "versions": versions(),
            "files": {name: _sha256(text) for name, text in sorted(files.items())},
            "checkpoints": [{"epoch": c.epoch, "alpha": c.alpha, "file": f"{CHECKPOINT_DIR}/{checkpoint_name(c.epoch)}"}
                            for c in checkpoints],
        }
        write_atomic(out / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return RunResult(out, model, trace, checkpoints, train, test)


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def config_of_run(directory) -> RunConfig:
    return config_from_dict(read_manifest(directory)["config"])


def load_checkpoints(directory) -> list:
    directory = Path(directory)
    man = read_manifest(directory)
    return [Checkpoint(int(c["epoch"]), float(c["alpha"]), load_model(directory / c["file"]))
            for c in man.get("checkpoints", [])]


SWEEP_COLUMNS = ["epoch", "alpha", "train_error", "test_error", "auroc", "frac_ood_zero"]


def sweep_rows(checkpoints, train: Dataset, test: Dataset, ood_X) -> list:
    rows = []
    for c in checkpoints:
        report, _ = evaluate_ood(c.model, test, ood_X)
        rows.append({
            "epoch": c.epoch,
            "alpha": c.alpha,
            "train_error": error_rate(c.model, train),
            "test_error": report["test_error"],
            "auroc": report["auroc"],
            "frac_ood_zero": report["frac_ood_zero_score"],
        })
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def sweep_run(directory, write: bool = True) -> list:
    """Re-evaluate every stored checkpoint of a run on its own test split and OOD set."""
    cfg = config_of_run(directory)
    checkpoints = load_checkpoints(directory)
    if not checkpoints:
        raise ValueError(f"run {directory} has no checkpoints; train with checkpoint_every > 0")
    rng = make_rng(cfg.seed)
    train, test = load_datasets(cfg, rng)
    ood_X = load_ood(cfg, train, test, make_rng(cfg.seed))
    if ood_X is None:
        raise ValueError("the run's config has no OOD source (ood.kind = 'none')")
    rows = sweep_rows(checkpoints, train, test, ood_X)
    if write:
        write_atomic(Path(directory) / SWEEP, sweep_csv(rows))
    return rows

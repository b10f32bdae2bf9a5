"""Run configuration: one JSON or TOML document, validated before any work.

Unknown keys are rejected with the dotted path of the offending field.
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import MISSING, asdict, dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from csnn.train import AlphaSchedule, ModelSpec, OptimizerCfg, TrainPlan


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"config field {field!r}: {message}")
        self.field = field


@dataclass
class DatasetCfg:
    kind: str = "moons"  # moons | csv | idx
    n_train: int = 200
    n_test: int = 200
    noise: float = 0.02
    train: Optional[str] = None
    test: Optional[str] = None
    label_column: str = "label"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    limit_train: Optional[int] = None
    limit_test: Optional[int] = None


@dataclass
class OodCfg:
    kind: str = "grid"  # grid | csv | idx | none
    grid_per_dim: int = 100
    low: float = -0.5
    high: float = 1.5
    min_dist: float = 0.1
    path: Optional[str] = None
    images: Optional[str] = None
    labels: Optional[str] = None
    limit: Optional[int] = None


@dataclass
class RunConfig:
    dataset: DatasetCfg = field(default_factory=DatasetCfg)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainPlan = field(default_factory=TrainPlan)
    ood: OodCfg = field(default_factory=OodCfg)
    out: str = "runs"
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["optimizer"]["adam_betas"] = list(d["train"]["optimizer"]["adam_betas"])
        return d

    def hash(self) -> str:
        """Digest of everything that affects results (the output root is excluded)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


PRESETS = {
    "moons": {
        "seed": 0,
        "dataset": {"kind": "moons", "n_train": 200, "n_test": 200, "noise": 0.02},
        "model": {"type": "csnn", "hidden": 128, "bias": True},
        "train": {
            "epochs_pretrain": 0,
            "epochs_anneal": 2000,
            "alpha_schedule": {"kind": "clamped-ramp", "offset": 100, "span": 1500},
            "optimizer": {"kind": "adam", "learning_rate": 1e-3, "weight_decay": 1e-4, "radius_decay": 6.0},
            "radius_init": 0.02,
            "batch_size": 32,
            "checkpoint_every": 100,
        },
        "ood": {"kind": "grid", "grid_per_dim": 100, "low": -0.5, "high": 1.5, "min_dist": 0.1},
    },
    "mnist-small": {
        "seed": 0,
        "dataset": {
            "kind": "idx",
            "train_images": "data/mnist/train-images-idx3-ubyte.gz",
            "train_labels": "data/mnist/train-labels-idx1-ubyte.gz",
            "test_images": "data/mnist/t10k-images-idx3-ubyte.gz",
            "test_labels": "data/mnist/t10k-labels-idx1-ubyte.gz",
            "limit_train": 5000,
        },
        "model": {"type": "csnn", "hidden": 128, "bias": False, "backbone_hidden": 128},
        "train": {
            "epochs_pretrain": 20,
            "epochs_anneal": 110,
            "alpha_schedule": {"kind": "clamped-ramp", "offset": 10, "span": 100},
            "optimizer": {"kind": "adam", "learning_rate": 1e-3, "weight_decay": 1e-4},
            "radius_init": 0.01,
            "batch_size": 64,
            "checkpoint_every": 10,
        },
        "ood": {
            "kind": "idx",
            "images": "data/fashion/t10k-images-idx3-ubyte.gz",
            "labels": "data/fashion/t10k-labels-idx1-ubyte.gz",
        },
    },
}


def _scalar_check(cls, key, value, path):
    """Reject values whose type cannot match the field's (non-None) default."""
    f = cls.__dataclass_fields__[key]
    if f.default is MISSING or f.default is None:
        return
    want = type(f.default)
    if want is bool:
        ok = isinstance(value, bool)
    elif want is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif want is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif want is str:
        ok = isinstance(value, str)
    elif want is tuple:
        ok = isinstance(value, (list, tuple))
    else:
        return
    if not ok:
        raise ConfigError(path, f"expected {want.__name__}, got {type(value).__name__}")


def _build(cls, data, path: str, nested: Optional[dict] = None):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected a table/object, got {type(data).__name__}")
    nested = nested or {}
    known = set(cls.__dataclass_fields__)
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key in nested:
            kwargs[key] = nested[key](value, sub)
        else:
            _scalar_check(cls, key, value, sub)
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def _plan(data, path):
    return _build(TrainPlan, data, path, {
        "alpha_schedule": lambda v, p: _build(AlphaSchedule, v, p),
        "optimizer": lambda v, p: _build(OptimizerCfg, v, p),
    })


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "", {
        "dataset": lambda v, p: _build(DatasetCfg, v, p),
        "model": lambda v, p: _build(ModelSpec, v, p),
        "train": _plan,
        "ood": lambda v, p: _build(OodCfg, v, p),
    })
    validate(cfg)
    cfg.train.seed = cfg.seed
    return cfg


def _check_type(value, types, path):
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(path, f"expected {types[0].__name__}, got bool")
    if not isinstance(value, types):
        raise ConfigError(path, f"expected {types[0].__name__}, got {type(value).__name__}")


def validate(cfg: RunConfig) -> None:
    ds = cfg.dataset
    if ds.kind not in ("moons", "csv", "idx"):
        raise ConfigError("dataset.kind", f"unknown dataset kind {ds.kind!r}")
    if ds.kind == "moons":
        _check_type(ds.n_train, (int,), "dataset.n_train")
        _check_type(ds.n_test, (int,), "dataset.n_test")
        if ds.n_train < 2 or ds.n_test < 2:
            raise ConfigError("dataset.n_train", "moons splits need at least 2 samples each")
        if ds.noise < 0:
            raise ConfigError("dataset.noise", "must be >= 0")
    if ds.kind == "csv":
        for key in ("train", "test"):
            if not getattr(ds, key):
                raise ConfigError(f"dataset.{key}", "required for csv datasets")
    if ds.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(ds, key):
                raise ConfigError(f"dataset.{key}", "required for idx datasets")
    ood = cfg.ood
    if ood.kind not in ("grid", "csv", "idx", "none"):
        raise ConfigError("ood.kind", f"unknown OOD source {ood.kind!r}")
    if ood.kind == "grid" and (ood.grid_per_dim < 1 or ood.high <= ood.low or ood.min_dist < 0):
        raise ConfigError("ood", "grid needs grid_per_dim >= 1, high > low, min_dist >= 0")
    if ood.kind == "csv" and not ood.path:
        raise ConfigError("ood.path", "required for csv OOD sets")
    if ood.kind == "idx" and not (ood.images and ood.labels):
        raise ConfigError("ood.images", "images and labels are required for idx OOD sets")
    _check_type(cfg.seed, (int,), "seed")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed", "must be a 64-bit unsigned integer")
    _check_type(cfg.train.epochs_anneal, (int,), "train.epochs_anneal")
    _check_type(cfg.train.epochs_pretrain, (int,), "train.epochs_pretrain")
    _check_type(cfg.train.batch_size, (int,), "train.batch_size")
    _check_type(cfg.model.hidden, (int,), "model.hidden")


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(dotted, "cannot set a field below a scalar")
    cur[keys[-1]] = value


def parse_override(text: str):
    """``a.b=value``; the value is read as JSON when possible, else as a string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config_dict(path=None, preset: Optional[str] = None) -> dict:
    if path is not None and preset is not None:
        raise ConfigError("--config", "give either a config file or a preset, not both")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("--preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        return copy.deepcopy(PRESETS[preset])
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("--config", f"cannot parse {path}: {exc}") from None


def make_config(path=None, preset: Optional[str] = None, overrides=(), seed: Optional[int] = None,
                out: Optional[str] = None) -> RunConfig:
    doc = load_config_dict(path, preset)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_path(doc, key, value)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = out
    return config_from_dict(doc)

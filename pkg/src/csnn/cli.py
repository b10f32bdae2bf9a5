"""``csnn`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage/config/data error,
3 numerical abort during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from csnn._io import write_atomic
from csnn.config import PRESETS, ConfigError, make_config
from csnn.csn import CsnLayer
from csnn.data import DataFormatError, load_csv
from csnn.evaluation import confidence_map, evaluate_ood
from csnn.experiment import (MANIFEST, config_of_run, load_datasets, load_ood, sweep_csv, sweep_run,
                             train_run, versions)
from csnn.model import ModelFormatError, StandardLayer, load_model
from csnn.numeric import make_rng
from csnn.train import NumericalAbort
from csnn.verify import bound_summary, run_verification

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _config_args(p):
    p.add_argument("--config", help="JSON or TOML run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="use a shipped configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.epochs_anneal=500 (repeatable)")


def _config(args, required: bool = True):
    if args.config is None and args.preset is None and not required:
        return None
    return make_config(args.config, args.preset, args.overrides, seed=getattr(args, "seed", None),
                       out=getattr(args, "out", None))


def cmd_train(args) -> int:
    if args.config is None and args.preset is None:
        raise UsageError("train needs --config PATH or --preset NAME")
    cfg = _config(args)
    res = train_run(cfg)
    last = res.trace.records[-1]
    print(f"run directory: {res.directory}")
    print(f"final epoch {last.epoch} alpha {last.alpha:.4f} train_error {last.train_error:.4f} "
          f"test_error {last.val_error if last.val_error is not None else float('nan'):.4f}")
    return EXIT_OK


def _ood_from_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    label = "label" if "label" in [h.strip() for h in header] else None
    ds = load_csv(path, label_column=label)
    if ds.X.shape[0] == 0:
        raise UsageError(f"OOD file {path} contains no samples")
    return ds.X


def cmd_eval_ood(args) -> int:
    model_path = Path(args.model)
    model = load_model(model_path)
    cfg = _config(args, required=False)
    if cfg is None and (args.in_path is None or args.ood_path is None) and (model_path.parent / MANIFEST).exists():
        cfg = config_of_run(model_path.parent)
    if (args.in_path is None or args.ood_path is None) and cfg is None:
        raise UsageError("give --in and --ood CSV files, or a config (--config/--preset) to build them")
    in_data = train = test = None
    if cfg is not None:
        train, test = load_datasets(cfg, make_rng(cfg.seed))
    if args.in_path is not None:
        in_data = load_csv(args.in_path, args.label_column)
    else:
        in_data = test
    if len(in_data) == 0:
        raise UsageError("in-distribution set is empty")
    ood_X = _ood_from_csv(args.ood_path) if args.ood_path is not None else load_ood(cfg, train, test, make_rng(cfg.seed))
    if ood_X is None:
        raise UsageError("config has no OOD source; pass --ood")
    for what, X in (("in-distribution", in_data.X), ("OOD", ood_X)):
        if X.shape[1] != model.input_dim:
            raise UsageError(f"{what} data has {X.shape[1]} features but the model takes {model.input_dim}")
    if in_data.y.max(initial=0) >= model.num_classes:
        raise UsageError(f"labels exceed the model's {model.num_classes} classes")
    report, roc = evaluate_ood(model, in_data, ood_X)
    out = Path(args.out) if args.out else model_path.parent
    write_atomic(out / "ood_report.json", json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_atomic(out / "roc.csv", roc.to_csv())
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_confmap(args) -> int:
    model = load_model(args.model)
    if model.input_dim != 2:
        raise UsageError(f"confidence maps need a 2-D model, this one takes {model.input_dim} inputs")
    x0, x1, y0, y1 = args.bounds
    if not (x1 > x0 and y1 > y0):
        raise UsageError("bounds must satisfy xmax > xmin and ymax > ymin")
    if args.resolution < 2:
        raise UsageError("resolution must be >= 2")
    cmap = confidence_map(model, ((x0, x1), (y0, y1)), args.resolution)
    stem = args.out or str(Path(args.model).parent / "confmap")
    cmap.save(stem)
    print(f"wrote {stem}.pgm and {stem}.csv")
    return EXIT_OK


def cmd_verify(args) -> int:
    layer = None
    if args.model:
        model = load_model(args.model)
        h = model.hidden
        if isinstance(h, StandardLayer):
            layer = CsnLayer(h.W, h.b, np.zeros(h.n_neurons), 0.0)
        elif isinstance(h, CsnLayer):
            layer = h
        else:
            raise UsageError("verify applies to CSN or standard hidden layers, not RBF")
    results = run_verification(layer, trials=args.trials, points=args.points, seed=args.seed)
    for r in results:
        print(r.line())
    if layer is not None and np.all(np.isfinite(layer.W)) and np.all(np.isfinite(layer.r)) and np.all(np.isfinite(layer.b)):
        s = bound_summary(layer)
        print(f"gradient bound: alpha={s['alpha']:.4f} max_bound={s['max_bound']:.4e} "
              f"envelope={s['envelope']:.4e} dead_neurons={s['dead_neurons']}")
    ok = all(r.passed for r in results)
    print("verification " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_sweep(args) -> int:
    rows = sweep_run(args.run)
    sys.stdout.write(sweep_csv(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csnn", description="Compact support neural networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    p.add_argument("--version", action="version", version=f"csnn {versions()['csnn']}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write model.json, trace.csv, manifest.json")
    _config_args(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="root directory for run folders")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-ood", help="test error and AUROC against an OOD set")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="in_path", help="in-distribution CSV (with a label column)")
    e.add_argument("--ood", dest="ood_path", help="OOD CSV (label column optional)")
    e.add_argument("--label-column", default="label")
    _config_args(e)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="directory for ood_report.json and roc.csv (default: next to the model)")
    e.set_defaults(func=cmd_eval_ood)

    c = sub.add_parser("confmap", help="max-class confidence raster of a 2-D model")
    c.add_argument("--model", required=True)
    c.add_argument("--bounds", type=float, nargs=4, default=[-0.5, 1.5, -0.5, 1.5],
                   metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    c.add_argument("--resolution", type=int, default=100)
    c.add_argument("--out", help="output stem; writes STEM.pgm and STEM.csv")
    c.set_defaults(func=cmd_confmap)

    v = sub.add_parser("verify", help="Monte-Carlo checks of support, gradient bound and gradients")
    v.add_argument("--model", help="check this model's hidden layer instead of random neurons")
    v.add_argument("--trials", type=int, default=10_000)
    v.add_argument("--points", type=int, default=100, help="sample points per neuron")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep-alpha", help="evaluate a run's checkpoints; writes sweep.csv into the run")
    s.add_argument("--run", required=True, help="run directory produced by train")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (UsageError, ConfigError, DataFormatError, ModelFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Train the moons preset, then report OOD metrics and write a confidence map.

    python3 scripts/run_moons.py --out runs --seed 0
"""
import argparse
import json
import time

import numpy as np

from csnn.config import make_config
from csnn.data import make_ood_grid
from csnn.evaluation import confidence_map, evaluate_ood
from csnn.experiment import train_run

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("--out", default="runs")
p.add_argument("--seed", type=int, default=0)
p.add_argument("--set", dest="overrides", action="append", default=[])
args = p.parse_args()

cfg = make_config(preset="moons", overrides=args.overrides, seed=args.seed, out=args.out)
t0 = time.perf_counter()
res = train_run(cfg)
elapsed = time.perf_counter() - t0

o = cfg.ood
grid = make_ood_grid(np.concatenate([res.train.X, res.test.X]), o.grid_per_dim, o.low, o.high, o.min_dist)
report, _ = evaluate_ood(res.model, res.test, grid.points)
cmap = confidence_map(res.model)
cmap.save(res.directory / "confmap")
report.update(train_error=res.trace.records[-1].train_error, seconds=round(elapsed, 2),
              corner_confidence=[cmap.values[0, 0], cmap.values[0, -1], cmap.values[-1, 0], cmap.values[-1, -1]])
print(f"run directory: {res.directory}")
print(json.dumps(report, indent=1))

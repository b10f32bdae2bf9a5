"""mnist-small preset: CSNN vs its alpha = 0 starting point, AUROC against FashionMNIST.

Needs the IDX files under data/mnist and data/fashion (or pass --set overrides
for other locations); nothing is downloaded.
"""
import argparse
import json

from csnn.config import make_config
from csnn.experiment import load_checkpoints, load_ood, train_run
from csnn.evaluation import evaluate_ood
from csnn.numeric import make_rng

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("--out", default="runs")
p.add_argument("--seed", type=int, default=0)
p.add_argument("--set", dest="overrides", action="append", default=[])
args = p.parse_args()

cfg = make_config(preset="mnist-small", overrides=args.overrides, seed=args.seed, out=args.out)
res = train_run(cfg)
ood_X = load_ood(cfg, res.train, res.test, make_rng(cfg.seed))
zero = [c for c in load_checkpoints(res.directory) if c.alpha == 0.0]
final, _ = evaluate_ood(res.model, res.test, ood_X)
out = {"csnn": final}
if zero:
    out["alpha0"], _ = evaluate_ood(zero[-1].model, res.test, ood_X)
print(json.dumps(out, indent=1))

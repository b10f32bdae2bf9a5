"""Fit y = sin(4 pi x) on [0, 1] with a 200-neuron CSN layer annealed to alpha = 1."""
import argparse

import numpy as np

from csnn.model import raw_outputs
from csnn.train import AlphaSchedule, ModelSpec, OptimizerCfg, TrainPlan, fit_regression

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--neurons", type=int, default=200)
args = p.parse_args()

x = np.linspace(0.0, 1.0, 400)[:, None]
x_test = (np.arange(1000) + 0.5)[:, None] / 1000
plan = TrainPlan(epochs_pretrain=0, epochs_anneal=600, alpha_schedule=AlphaSchedule("clamped-ramp", 50, 300),
                 optimizer=OptimizerCfg("adam", 1e-2, 0.0), radius_init=0.01, batch_size=32, seed=args.seed)
model, losses = fit_regression(x, np.sin(4 * np.pi * x), ModelSpec("csnn", args.neurons, bias=True), plan)
mse = float(np.mean((raw_outputs(model, x_test)[:, 0] - np.sin(4 * np.pi * x_test[:, 0])) ** 2))
print(f"alpha {model.alpha:.2f}  train mse {losses[-1]:.2e}  held-out mse {mse:.2e}")

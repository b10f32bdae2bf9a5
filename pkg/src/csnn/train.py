"""Training: alpha schedules, optimisers, pre-training and alpha annealing.

The annealing procedure starts from a ReLU network ``L relu(2 W v + b)`` and,
epoch by epoch, raises the shape parameter of its hidden layer towards 1
while continuing to update ``W, L, b, r`` by minibatch descent on softmax
cross-entropy.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from csnn.csn import CsnLayer, layer_backward_batch, layer_preactivation, rbf_layer_backward_batch, relu
from csnn.data import Dataset
from csnn.model import (Backbone, CsnnModel, RbfLayer, StandardLayer, fit_normalizer, normalize, raw_outputs,
                        softmax)
from csnn.numeric import make_rng

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    def __init__(self, epoch: int, learning_rate: float, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch} (learning rate {learning_rate:g})")
        self.epoch = epoch
        self.learning_rate = learning_rate


# -- configuration -----------------------------------------------------------


@dataclass
class AlphaSchedule:
    kind: str = "linear-epoch"  # linear-epoch | clamped-ramp | fixed
    offset: float = 0.0
    span: float = 1.0
    value: float = 1.0  # used by "fixed"

    def __post_init__(self):
        if self.kind not in ("linear-epoch", "clamped-ramp", "fixed"):
            raise ValueError(f"unknown alpha schedule kind {self.kind!r}")
        if self.kind == "clamped-ramp" and self.span <= 0:
            raise ValueError("clamped-ramp span must be > 0")
        if self.kind == "fixed" and not 0.0 <= self.value <= 1.0:
            raise ValueError("fixed alpha must lie in [0, 1]")


@dataclass
class OptimizerCfg:
    kind: str = "adam"  # sgd | adam
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    radius_decay: float = 0.0  # decoupled shrink of r only; keeps supports from growing without bound

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0 or self.radius_decay < 0:
            raise ValueError("weight_decay and radius_decay must be >= 0")
        self.adam_betas = tuple(float(b) for b in self.adam_betas)


@dataclass
class ModelSpec:
    type: str = "csnn"  # csnn | standard | rbf
    hidden: int = 128
    bias: bool = False
    backbone_hidden: int = 0

    def __post_init__(self):
        if self.type not in ("csnn", "standard", "rbf"):
            raise ValueError(f"unknown model type {self.type!r}")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.backbone_hidden < 0:
            raise ValueError("backbone_hidden must be >= 0")


@dataclass
class TrainPlan:
    epochs_pretrain: int = 10
    epochs_anneal: int = 500
    alpha_schedule: AlphaSchedule = field(default_factory=AlphaSchedule)
    optimizer: OptimizerCfg = field(default_factory=OptimizerCfg)
    radius_init: float = 0.01
    batch_size: int = 32
    seed: int = 0
    checkpoint_every: int = 0  # 0 keeps only the final model
    rbf_beta_init: float = 10.0

    def __post_init__(self):
        if self.epochs_pretrain < 0 or self.epochs_anneal < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.epochs_pretrain + self.epochs_anneal < 1:
            raise ValueError("at least one epoch is required")
        if not self.radius_init > 0:
            raise ValueError("radius_init must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if not self.rbf_beta_init > 0:
            raise ValueError("rbf_beta_init must be > 0")


@dataclass
class TraceRecord:
    epoch: int
    alpha: float
    train_error: float
    val_error: Optional[float]
    mean_loss: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "alpha", "train_error", "val_error", "mean_loss"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.alpha), repr(r.train_error),
                        "" if r.val_error is None else repr(r.val_error), repr(r.mean_loss)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainTrace":
        rows = csv.DictReader(io.StringIO(text))
        recs = [
            TraceRecord(int(r["epoch"]), float(r["alpha"]), float(r["train_error"]),
                        float(r["val_error"]) if r["val_error"] else None, float(r["mean_loss"]))
            for r in rows
        ]
        return cls(recs)


def alpha_at(schedule: AlphaSchedule, epoch: int, total: int) -> float:
    if schedule.kind == "linear-epoch":
        a = epoch / total
    elif schedule.kind == "clamped-ramp":
        a = (epoch - schedule.offset) / schedule.span
    else:
        a = schedule.value
    return float(min(1.0, max(0.0, a)))


def select_alpha(trace: TrainTrace) -> Optional[TraceRecord]:
    """Largest-alpha record whose validation error does not exceed the error at alpha = 0."""
    recs = [r for r in trace if r.val_error is not None]
    if not recs:
        return None
    at_zero = [r for r in recs if r.alpha == 0.0]
    ref = (at_zero[-1] if at_zero else recs[0]).val_error
    ok = [r for r in recs if r.val_error <= ref]
    return max(ok, key=lambda r: (r.alpha, r.epoch))


# -- optimisers --------------------------------------------------------------

# parameters that receive weight decay; biases and widths are left alone and
# radii only see cfg.radius_decay
DECAYED = frozenset({"W", "L", "A"})


def _decay(p, k, cfg: OptimizerCfg):
    if k in DECAYED and cfg.weight_decay:
        p *= 1.0 - cfg.learning_rate * cfg.weight_decay
    elif k == "r" and cfg.radius_decay:
        p *= 1.0 - cfg.learning_rate * cfg.radius_decay


def sgd_step(params: dict, grads: dict, cfg: OptimizerCfg, state: Optional[dict] = None):
    """Plain SGD with decoupled weight decay on W and L. Updates ``params`` in place."""
    lr = cfg.learning_rate
    for k, g in grads.items():
        p = params[k]
        _decay(p, k, cfg)
        p -= lr * g
    return params, state if state is not None else {}


def adam_step(params: dict, grads: dict, cfg: OptimizerCfg, state: Optional[dict] = None):
    """Adam with bias correction and decoupled weight decay. Updates ``params`` in place."""
    if state is None:
        state = {}
    b1, b2 = cfg.adam_betas
    t = state.get("t", 0) + 1
    state["t"] = t
    lr, eps = cfg.learning_rate, cfg.adam_eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        m = state.setdefault(("m", k), np.zeros_like(g))
        v = state.setdefault(("v", k), np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p = params[k]
        _decay(p, k, cfg)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def optimizer_step(params, grads, cfg: OptimizerCfg, state):
    if cfg.kind == "sgd":
        return sgd_step(params, grads, cfg, state)
    return adam_step(params, grads, cfg, state)


# -- loss and gradients ------------------------------------------------------


def cross_entropy(Z: np.ndarray, y: np.ndarray) -> float:
    zmax = Z.max(axis=1, keepdims=True)
    lse = (zmax + np.log(np.exp(Z - zmax).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - Z[np.arange(Z.shape[0]), y]))


def _head_grads(H, L, y):
    Z = H @ L.T
    loss = cross_entropy(Z, y)
    dZ = softmax(Z)
    dZ[np.arange(y.shape[0]), y] -= 1.0
    dZ /= y.shape[0]
    return loss, dZ.T @ H, dZ @ L


def csnn_loss_and_grads(params: dict, V, y, alpha: float):
    """Mean cross-entropy of ``L relu(csn(V))`` and its gradients w.r.t. W, b, r, L."""
    layer = CsnLayer(params["W"], params["b"], params["r"], alpha)
    pre = layer_preactivation(V, layer)
    H = relu(pre)
    loss, gL, dH = _head_grads(H, params["L"], y)
    gW, gb, gr, _ = layer_backward_batch(V, layer, dH, pre=pre)
    return loss, {"W": gW, "b": gb, "r": gr, "L": gL}


def standard_loss_and_grads(params: dict, V, y):
    pre = 2.0 * (V @ params["W"].T) + params["b"]
    H = relu(pre)
    loss, gL, dH = _head_grads(H, params["L"], y)
    g = np.where(pre > 0, dH, 0.0)
    return loss, {"W": 2.0 * (g.T @ V), "b": g.sum(axis=0), "L": gL}


def backbone_loss_and_grads(params: dict, X, y):
    """Standard network preceded by a trainable ``relu(A x + c)`` layer."""
    pre0 = X @ params["A"].T + params["c"]
    U = relu(pre0)
    pre = 2.0 * (U @ params["W"].T) + params["b"]
    H = relu(pre)
    loss, gL, dH = _head_grads(H, params["L"], y)
    g = np.where(pre > 0, dH, 0.0)
    dU = 2.0 * (g @ params["W"])
    g0 = np.where(pre0 > 0, dU, 0.0)
    return loss, {"A": g0.T @ X, "c": g0.sum(axis=0), "W": 2.0 * (g.T @ U), "b": g.sum(axis=0), "L": gL}


def rbf_loss_and_grads(params: dict, V, y):
    beta = np.exp(params["log_beta"])
    diff = V[:, None, :] - params["W"]
    H = np.exp(-beta * np.einsum("nkj,nkj->nk", diff, diff))
    loss, gL, dH = _head_grads(H, params["L"], y)
    gW, glb, _ = rbf_layer_backward_batch(V, params["W"], params["log_beta"], dH)
    return loss, {"W": gW, "log_beta": glb, "L": gL}


def mse_loss_and_grads(params: dict, V, T, alpha: float):
    """Mean squared error of ``L relu(csn(V))`` against targets ``T`` (n, m)."""
    layer = CsnLayer(params["W"], params["b"], params["r"], alpha)
    pre = layer_preactivation(V, layer)
    H = relu(pre)
    E = H @ params["L"].T - T
    loss = float(np.mean(E**2))
    dZ = 2.0 * E / E.size
    gW, gb, gr, _ = layer_backward_batch(V, layer, dZ @ params["L"], pre=pre)
    return loss, {"W": gW, "b": gb, "r": gr, "L": dZ.T @ H}


# -- training loops ----------------------------------------------------------


def _error(Z, y) -> float:
    return float(np.mean(np.argmax(Z, axis=1) != y))


def _run_epoch(params, V, y, loss_fn, cfg, state, batch_size, rng, frozen=()):
    n = V.shape[0]
    order = rng.permutation(n)
    losses = []
    weights = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        loss, grads = loss_fn(params, V[idx], y[idx])
        for k in frozen:
            grads.pop(k, None)
        losses.append(loss)
        weights.append(idx.size)
        if not math.isfinite(loss):
            return float("nan"), state
        optimizer_step(params, grads, cfg, state)
    return float(np.average(losses, weights=weights)), state


def init_standard_params(d: int, spec: ModelSpec, C: int, rng: np.random.Generator) -> dict:
    K = spec.hidden
    # 2W has He-scaled rows for unit-variance inputs
    W = rng.normal(0.0, math.sqrt(1.0 / (2.0 * d)), size=(K, d))
    if d <= 3 and spec.bias:
        b = rng.normal(0.0, 0.5, size=K)
    else:
        b = np.zeros(K)
    L = rng.normal(0.0, math.sqrt(1.0 / K), size=(C, K))
    return {"W": W, "b": b, "L": L}


def pretrain_standard(data: Dataset, spec: ModelSpec, plan: TrainPlan, rng: np.random.Generator,
                      epochs: Optional[int] = None) -> CsnnModel:
    """Train the ReLU network ``L relu(2 W v + b)`` that annealing starts from.

    Without a backbone the normaliser is fit on the raw inputs first and the
    network trains on normalised inputs. With a backbone, ``relu(A x + c)`` is
    trained jointly on raw inputs, then frozen; the normaliser is fit on its
    outputs and folded into ``W`` (and ``b`` when bias is enabled) so the
    returned network computes the same function where possible.
    """
    if len(data) == 0:
        raise ValueError("pretraining needs a nonempty dataset")
    if np.unique(data.y).size < 2:
        warnings.warn("pretraining data contains a single class", RuntimeWarning, stacklevel=2)
    epochs = plan.epochs_pretrain if epochs is None else epochs
    C = data.num_classes
    frozen = () if spec.bias else ("b",)
    state: dict = {}
    if spec.backbone_hidden == 0:
        normalizer = fit_normalizer(data.X)
        V = normalize(normalizer, data.X)
        params = init_standard_params(data.dim, spec, C, rng)
        for e in range(1, epochs + 1):
            loss, state = _run_epoch(params, V, data.y, standard_loss_and_grads, plan.optimizer, state,
                                     plan.batch_size, rng, frozen)
            if not math.isfinite(loss):
                raise NumericalAbort(e, plan.optimizer.learning_rate)
            log.debug("pretrain epoch %d loss %.5f", e, loss)
        return CsnnModel(normalizer, StandardLayer(params["W"], params["b"]), params["L"])

    H0 = spec.backbone_hidden
    d = data.dim
    params = {"A": rng.normal(0.0, math.sqrt(2.0 / d), size=(H0, d)), "c": np.zeros(H0)}
    params.update(init_standard_params(H0, spec, C, rng))
    for e in range(1, epochs + 1):
        loss, state = _run_epoch(params, data.X, data.y, backbone_loss_and_grads, plan.optimizer, state,
                                 plan.batch_size, rng, frozen)
        if not math.isfinite(loss):
            raise NumericalAbort(e, plan.optimizer.learning_rate)
        log.debug("pretrain (backbone) epoch %d loss %.5f", e, loss)
    backbone = Backbone(params["A"], params["c"])
    normalizer = fit_normalizer(backbone(data.X))
    # u = mu + sqrt(d) sigma * v, so 2 W u + b = 2 (W diag(sqrt(d) sigma)) v + (b + 2 W mu)
    scale = math.sqrt(normalizer.dim) * normalizer.sigma
    W = params["W"] * scale[None, :]
    b = params["b"] + 2.0 * params["W"] @ normalizer.mu if spec.bias else params["b"]
    return CsnnModel(normalizer, StandardLayer(W, b), params["L"], backbone)


@dataclass
class Checkpoint:
    epoch: int
    alpha: float
    model: CsnnModel


def anneal_csnn(data: Dataset, seed_model: CsnnModel, spec: ModelSpec, plan: TrainPlan,
                rng: np.random.Generator, val: Optional[Dataset] = None,
                on_epoch: Optional[Callable[[int, CsnnModel], None]] = None):
    """Raise alpha per epoch while updating ``W, L, b, r``.

    Returns ``(model, trace, checkpoints)``; ``checkpoints`` is filled every
    ``plan.checkpoint_every`` epochs (always including the final epoch when
    checkpointing is on).
    """
    if not isinstance(seed_model.hidden, StandardLayer):
        raise TypeError("annealing starts from a standard (alpha = 0) network")
    hidden = seed_model.hidden
    K = hidden.n_neurons
    params = {
        "W": hidden.W.copy(),
        "b": hidden.b.copy(),
        "r": np.full(K, float(plan.radius_init)),
        "L": seed_model.L.copy(),
    }
    normalizer = seed_model.normalizer
    backbone = seed_model.backbone
    V = seed_model.features(data.X)
    Vval = seed_model.features(val.X) if val is not None else None
    frozen = () if spec.bias else ("b",)
    total = plan.epochs_anneal
    trace = TrainTrace()
    checkpoints = []
    state: dict = {}
    alpha = 0.0

    def current(a):
        return CsnnModel(normalizer, CsnLayer(params["W"].copy(), params["b"].copy(), params["r"].copy(), a),
                         params["L"].copy(), backbone)

    for e in range(1, total + 1):
        alpha = alpha_at(plan.alpha_schedule, e, total)

        def loss_fn(p, Vb, yb, a=alpha):
            return csnn_loss_and_grads(p, Vb, yb, a)

        loss, state = _run_epoch(params, V, data.y, loss_fn, plan.optimizer, state, plan.batch_size, rng, frozen)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params.values()):
            raise NumericalAbort(e, plan.optimizer.learning_rate)
        layer = CsnLayer(params["W"], params["b"], params["r"], alpha)
        train_err = _error(relu(layer_preactivation(V, layer)) @ params["L"].T, data.y)
        val_err = None
        if Vval is not None:
            val_err = _error(relu(layer_preactivation(Vval, layer)) @ params["L"].T, val.y)
        trace.records.append(TraceRecord(e, alpha, train_err, val_err, loss))
        if plan.checkpoint_every and (e % plan.checkpoint_every == 0 or e == total):
            checkpoints.append(Checkpoint(e, alpha, current(alpha)))
        if on_epoch is not None:
            on_epoch(e, current(alpha))
        if e % 100 == 0:
            log.info("anneal epoch %d alpha %.4f loss %.5f train_err %.4f", e, alpha, loss, train_err)
    return current(alpha), trace, checkpoints


def train_standard(data: Dataset, spec: ModelSpec, plan: TrainPlan, rng: np.random.Generator,
                   val: Optional[Dataset] = None):
    """The alpha = 0 baseline: a standard network trained for the whole epoch budget."""
    epochs = plan.epochs_pretrain + plan.epochs_anneal
    trace = TrainTrace()
    checkpoints = []
    if spec.backbone_hidden:
        model = pretrain_standard(data, spec, plan, rng, epochs=epochs)
        Z = raw_outputs(model, data.X)
        trace.records.append(TraceRecord(epochs, 0.0, _error(Z, data.y),
                                         None if val is None else _error(raw_outputs(model, val.X), val.y),
                                         float("nan")))
        return model, trace, checkpoints
    normalizer = fit_normalizer(data.X)
    V = normalize(normalizer, data.X)
    params = init_standard_params(data.dim, spec, data.num_classes, rng)
    frozen = () if spec.bias else ("b",)
    state: dict = {}
    for e in range(1, epochs + 1):
        loss, state = _run_epoch(params, V, data.y, standard_loss_and_grads, plan.optimizer, state,
                                 plan.batch_size, rng, frozen)
        if not math.isfinite(loss):
            raise NumericalAbort(e, plan.optimizer.learning_rate)
        model = CsnnModel(normalizer, StandardLayer(params["W"].copy(), params["b"].copy()), params["L"].copy())
        val_err = None if val is None else _error(raw_outputs(model, val.X), val.y)
        trace.records.append(TraceRecord(e, 0.0, _error(raw_outputs(model, data.X), data.y), val_err, loss))
        if plan.checkpoint_every and (e % plan.checkpoint_every == 0 or e == epochs):
            checkpoints.append(Checkpoint(e, 0.0, model))
    return model, trace, checkpoints


def train_rbf_baseline(data: Dataset, spec: ModelSpec, plan: TrainPlan, rng: np.random.Generator,
                       val: Optional[Dataset] = None):
    """Gaussian RBF hidden layer trained directly (centers, log widths, head)."""
    normalizer = fit_normalizer(data.X)
    V = normalize(normalizer, data.X)
    K = spec.hidden
    pick = rng.choice(len(data), size=K, replace=K > len(data))
    params = {
        "W": V[pick].copy(),
        "log_beta": np.full(K, math.log(plan.rbf_beta_init)),
        "L": rng.normal(0.0, math.sqrt(1.0 / K), size=(data.num_classes, K)),
    }
    epochs = plan.epochs_pretrain + plan.epochs_anneal
    trace = TrainTrace()
    checkpoints = []
    state: dict = {}
    for e in range(1, epochs + 1):
        loss, state = _run_epoch(params, V, data.y, rbf_loss_and_grads, plan.optimizer, state,
                                 plan.batch_size, rng)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params.values()):
            raise NumericalAbort(e, plan.optimizer.learning_rate)
        model = CsnnModel(normalizer, RbfLayer(params["W"].copy(), params["log_beta"].copy()), params["L"].copy())
        val_err = None if val is None else _error(raw_outputs(model, val.X), val.y)
        trace.records.append(TraceRecord(e, 1.0, _error(raw_outputs(model, data.X), data.y), val_err, loss))
        if plan.checkpoint_every and (e % plan.checkpoint_every == 0 or e == epochs):
            checkpoints.append(Checkpoint(e, 1.0, model))
    return model, trace, checkpoints


def fit(data: Dataset, spec: ModelSpec, plan: TrainPlan, val: Optional[Dataset] = None, rng=None):
    """Train the model described by ``spec``; returns ``(model, trace, checkpoints)``."""
    rng = make_rng(plan.seed) if rng is None else rng
    if spec.type == "standard":
        return train_standard(data, spec, plan, rng, val)
    if spec.type == "rbf":
        return train_rbf_baseline(data, spec, plan, rng, val)
    seed_model = pretrain_standard(data, spec, plan, rng)
    return anneal_csnn(data, seed_model, spec, plan, rng, val)


def fit_regression(X, T, spec: ModelSpec, plan: TrainPlan, rng=None):
    """Least-squares fit of a one-hidden-layer CSNN with alpha annealed by ``plan``.

    All ``epochs_pretrain + epochs_anneal`` epochs follow the alpha schedule, so
    a clamped ramp with an offset covers the alpha = 0 warm-up. Returns
    ``(model, losses)`` with the model's head producing the ``m`` targets.
    """
    rng = make_rng(plan.seed) if rng is None else rng
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    if X.ndim != 2 or T.shape[0] != X.shape[0]:
        raise ValueError(f"X {X.shape} and targets {T.shape} disagree")
    normalizer = fit_normalizer(X)
    V = normalize(normalizer, X)
    params = init_standard_params(X.shape[1], spec, T.shape[1], rng)
    params["r"] = np.full(spec.hidden, float(plan.radius_init))
    frozen = () if spec.bias else ("b",)
    total = plan.epochs_pretrain + plan.epochs_anneal
    state: dict = {}
    losses = []
    alpha = 0.0
    for e in range(1, total + 1):
        alpha = alpha_at(plan.alpha_schedule, e, total)

        def loss_fn(p, Vb, Tb, a=alpha):
            return mse_loss_and_grads(p, Vb, Tb, a)

        loss, state = _run_epoch(params, V, T, loss_fn, plan.optimizer, state, plan.batch_size, rng, frozen)
        if not math.isfinite(loss):
            raise NumericalAbort(e, plan.optimizer.learning_rate)
        losses.append(loss)
    layer = CsnLayer(params["W"].copy(), params["b"].copy(), params["r"].copy(), alpha)
    return CsnnModel(normalizer, layer, params["L"].copy()), losses

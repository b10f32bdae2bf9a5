import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import csnn.train as train_mod
from csnn.csn import CsnLayer, layer_preactivation
from csnn.data import Dataset, moons_train_test
from csnn.model import CsnnModel, StandardLayer, dumps_model, raw_outputs
from csnn.numeric import make_rng
from csnn.train import (AlphaSchedule, ModelSpec, NumericalAbort, OptimizerCfg, TraceRecord, TrainPlan, TrainTrace,
                        adam_step, alpha_at, anneal_csnn, backbone_loss_and_grads, csnn_loss_and_grads, fit,
                        fit_regression, mse_loss_and_grads, pretrain_standard, rbf_loss_and_grads, select_alpha,
                        sgd_step, standard_loss_and_grads, train_rbf_baseline)
from csnn.verify import _central_diff, rel_err


def blobs(rng, n=100, d=2, sep=3.0):
    y = np.arange(n) % 2
    X = rng.normal(size=(n, d)) + sep * (2 * y[:, None] - 1)
    return Dataset(X, y, 2, "blobs")


# -- schedules ---------------------------------------------------------------


def test_alpha_schedule_examples():
    assert alpha_at(AlphaSchedule("linear-epoch"), 500, 500) == 1.0
    assert alpha_at(AlphaSchedule("linear-epoch"), 250, 500) == 0.5
    ramp = AlphaSchedule("clamped-ramp", 100, 1500)
    assert alpha_at(ramp, 100, 2000) == 0.0
    assert alpha_at(ramp, 1600, 2000) == 1.0
    assert alpha_at(ramp, 850, 2000) == 0.5
    assert alpha_at(ramp, 1, 2000) == 0.0 and alpha_at(ramp, 2000, 2000) == 1.0
    assert alpha_at(AlphaSchedule("fixed", value=0.3), 7, 10) == 0.3


@given(st.sampled_from(["linear-epoch", "clamped-ramp"]), st.floats(0, 50), st.floats(0.5, 100),
       st.integers(1, 300))
def test_alpha_schedule_in_range_and_non_decreasing(kind, offset, span, total):
    s = AlphaSchedule(kind, offset, span)
    vals = [alpha_at(s, e, total) for e in range(1, total + 1)]
    assert all(0.0 <= a <= 1.0 for a in vals)
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        AlphaSchedule("cosine")
    with pytest.raises(ValueError):
        AlphaSchedule("clamped-ramp", 0, 0)
    with pytest.raises(ValueError):
        TrainPlan(epochs_pretrain=0, epochs_anneal=0)
    with pytest.raises(ValueError):
        TrainPlan(radius_init=0.0)
    with pytest.raises(ValueError):
        OptimizerCfg(learning_rate=0.0)


# -- optimisers --------------------------------------------------------------


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_decay_tiny_lr_zero_grad_leaves_params(kind, rng):
    # learning_rate must be > 0; with zero gradients and no decay nothing moves
    cfg = OptimizerCfg(kind, 1e-3, 0.0)
    p = {"W": rng.normal(size=(3, 2)), "r": rng.normal(size=3)}
    before = {k: v.copy() for k, v in p.items()}
    step = sgd_step if kind == "sgd" else adam_step
    state = {}
    for _ in range(5):
        step(p, {k: np.zeros_like(v) for k, v in p.items()}, cfg, state)
    for k in p:
        assert np.array_equal(p[k], before[k])


def test_sgd_scalar_example():
    p = {"x": np.array([2.0])}
    sgd_step(p, {"x": np.array([1.0])}, OptimizerCfg("sgd", 0.1, 0.0))
    assert p["x"][0] == pytest.approx(1.9, abs=1e-15)


def test_adam_constant_gradient_approaches_lr_step():
    cfg = OptimizerCfg("adam", 0.01, 0.0)
    p = {"x": np.array([0.0])}
    state = {}
    for _ in range(1000):
        prev = p["x"][0]
        adam_step(p, {"x": np.array([3.0])}, cfg, state)
    step = prev - p["x"][0]
    # closed form: m_hat = g and v_hat = g^2 exactly, so the step is lr * g / (g + eps)
    assert step == pytest.approx(0.01 * 3.0 / (3.0 + 1e-8), rel=1e-9)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_weight_decay_only_shrinks(kind, rng):
    cfg = OptimizerCfg(kind, 0.05, 0.1)
    p = {"W": rng.normal(size=(4, 3)), "L": rng.normal(size=(2, 4)), "b": rng.normal(size=4),
         "r": rng.uniform(0.1, 1.0, 4)}
    b0, r0 = p["b"].copy(), p["r"].copy()
    state = {}
    mags = [np.abs(p["W"]).copy()]
    for _ in range(20):
        (sgd_step if kind == "sgd" else adam_step)(p, {k: np.zeros_like(v) for k, v in p.items()}, cfg, state)
        mags.append(np.abs(p["W"]).copy())
    assert all(np.all(b <= a) for a, b in zip(mags, mags[1:]))
    assert np.all(mags[-1] < mags[0])
    assert np.array_equal(p["b"], b0) and np.array_equal(p["r"], r0)


def test_radius_decay_touches_only_r(rng):
    cfg = OptimizerCfg("sgd", 0.1, 0.0, radius_decay=2.0)
    p = {"W": rng.normal(size=(2, 2)), "r": np.array([0.5, 0.25])}
    W0 = p["W"].copy()
    sgd_step(p, {"W": np.zeros((2, 2)), "r": np.zeros(2)}, cfg)
    assert np.array_equal(p["W"], W0)
    assert np.allclose(p["r"], [0.5 * 0.8, 0.25 * 0.8], rtol=1e-15)


# -- loss gradients ----------------------------------------------------------


def _fd_check(loss_fn, params, tol=1e-4, h=1e-5):
    _, grads = loss_fn(params)
    for k, g in grads.items():
        num = _central_diff(lambda: loss_fn(params)[0], params[k], h)
        assert rel_err(g, num) < tol, k


def _away_from_kinks(pre_fn, params, V, y, margin=1e-3):
    keep = np.min(np.abs(pre_fn(params, V)), axis=1) > margin
    return V[keep][:10], y[keep][:10]


@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.8, 1.0])
def test_csnn_loss_gradient_matches_finite_differences(alpha, rng):
    K, d, C = 8, 3, 3
    p = {"W": rng.normal(0, 0.5, (K, d)), "b": rng.normal(0, 0.3, K), "r": rng.uniform(0.5, 2.0, K),
         "L": rng.normal(size=(C, K))}
    V = rng.normal(0, 0.5, (60, d))
    y = rng.integers(0, C, 60)
    V, y = _away_from_kinks(lambda q, X: layer_preactivation(X, CsnLayer(q["W"], q["b"], q["r"], alpha)), p, V, y)
    assert len(y) >= 5
    _fd_check(lambda q: csnn_loss_and_grads(q, V, y, alpha), p)


def test_standard_and_backbone_gradients(rng):
    p = {"W": rng.normal(size=(6, 3)), "b": rng.normal(size=6), "L": rng.normal(size=(2, 6))}
    V = rng.normal(size=(40, 3))
    y = rng.integers(0, 2, 40)
    V, y = _away_from_kinks(lambda q, X: 2 * X @ q["W"].T + q["b"], p, V, y)
    _fd_check(lambda q: standard_loss_and_grads(q, V, y), p)

    p = {"A": rng.normal(size=(5, 3)), "c": rng.normal(size=5), "W": rng.normal(size=(6, 5)),
         "b": rng.normal(size=6), "L": rng.normal(size=(2, 6))}
    X = rng.normal(size=(80, 3))
    y = rng.integers(0, 2, 80)

    def pre(q, X):
        U0 = X @ q["A"].T + q["c"]
        return np.concatenate([U0, 2 * np.maximum(U0, 0) @ q["W"].T + q["b"]], axis=1)

    X, y = _away_from_kinks(pre, p, X, y)
    _fd_check(lambda q: backbone_loss_and_grads(q, X, y), p)


def test_rbf_and_mse_gradients(rng):
    p = {"W": rng.normal(size=(5, 2)), "log_beta": rng.normal(0, 0.3, 5), "L": rng.normal(size=(3, 5))}
    V = rng.normal(size=(10, 2))
    y = rng.integers(0, 3, 10)
    _fd_check(lambda q: rbf_loss_and_grads(q, V, y), p)

    p = {"W": rng.normal(0, 0.5, (6, 1)), "b": rng.normal(0, 0.3, 6), "r": rng.uniform(0.5, 2.0, 6),
         "L": rng.normal(size=(1, 6))}
    V = rng.normal(0, 0.5, (40, 1))
    T = np.sin(V)
    V, T = _away_from_kinks(lambda q, X: layer_preactivation(X, CsnLayer(q["W"], q["b"], q["r"], 0.7)), p, V, T)
    _fd_check(lambda q: mse_loss_and_grads(q, V, T, 0.7), p)


# -- training loops ----------------------------------------------------------


def test_pretrain_separable_blobs_reaches_zero_error():
    rng = make_rng(0)
    data = blobs(rng)
    spec = ModelSpec("csnn", 16, bias=False)
    plan = TrainPlan(epochs_pretrain=200, epochs_anneal=0, optimizer=OptimizerCfg("adam", 1e-2, 1e-4))
    m = pretrain_standard(data, spec, plan, rng)
    assert np.mean(np.argmax(raw_outputs(m, data.X), axis=1) != data.y) == 0.0


def test_pretrain_zero_epochs_returns_initialisation():
    data = blobs(make_rng(1))
    spec = ModelSpec("csnn", 8)
    plan = TrainPlan(epochs_pretrain=0, epochs_anneal=1)
    a = pretrain_standard(data, spec, plan, make_rng(5))
    rng = make_rng(5)
    W = rng.normal(0.0, math.sqrt(1.0 / 4.0), size=(8, 2))
    assert np.array_equal(a.hidden.W, W)
    assert not np.any(a.hidden.b)


def test_pretrain_is_deterministic():
    data = blobs(make_rng(2))
    spec = ModelSpec("csnn", 8, bias=True)
    plan = TrainPlan(epochs_pretrain=20, epochs_anneal=0)
    a = pretrain_standard(data, spec, plan, make_rng(3))
    b = pretrain_standard(data, spec, plan, make_rng(3))
    assert np.array_equal(a.hidden.W, b.hidden.W) and np.array_equal(a.L, b.L)


def test_anneal_zero_epochs_is_identity():
    data = blobs(make_rng(4))
    spec = ModelSpec("csnn", 8)
    plan = TrainPlan(epochs_pretrain=10, epochs_anneal=0)
    seed = pretrain_standard(data, spec, plan, make_rng(4))
    m, trace, _ = anneal_csnn(data, seed, spec, plan, make_rng(4))
    assert len(trace) == 0 and m.alpha == 0.0
    X = make_rng(9).normal(size=(50, 2)) * 3
    assert np.max(np.abs(raw_outputs(m, X) - raw_outputs(seed, X))) <= 1e-12


def test_anneal_trace_alpha_monotone_and_reaches_one():
    data = blobs(make_rng(6), n=60)
    spec = ModelSpec("csnn", 16)
    plan = TrainPlan(epochs_pretrain=20, epochs_anneal=40, alpha_schedule=AlphaSchedule("clamped-ramp", 5, 20),
                     optimizer=OptimizerCfg("adam", 1e-2, 1e-4), checkpoint_every=10, radius_init=0.5)
    m, trace, ckpts = fit(data, spec, plan, val=data, rng=make_rng(6))
    alphas = [r.alpha for r in trace]
    assert all(b >= a for a, b in zip(alphas, alphas[1:])) and alphas[-1] == 1.0
    assert [c.epoch for c in ckpts] == [10, 20, 30, 40]
    assert m.alpha == 1.0 and all(r.val_error is not None for r in trace)


def test_fit_is_deterministic():
    def run():
        data = blobs(make_rng(8), n=40)
        plan = TrainPlan(epochs_pretrain=5, epochs_anneal=10, seed=11)
        return fit(data, ModelSpec("csnn", 8), plan)[0]

    assert dumps_model(run()) == dumps_model(run())


def test_numerical_abort(monkeypatch):
    calls = {"n": 0}
    real = train_mod.csnn_loss_and_grads

    def poisoned(params, V, y, alpha):
        calls["n"] += 1
        loss, grads = real(params, V, y, alpha)
        return (float("nan") if calls["n"] > 3 else loss), grads

    monkeypatch.setattr(train_mod, "csnn_loss_and_grads", poisoned)
    data = blobs(make_rng(0), n=20)
    plan = TrainPlan(epochs_pretrain=0, epochs_anneal=10, batch_size=20)
    with pytest.raises(NumericalAbort) as exc:
        fit(data, ModelSpec("csnn", 4), plan, rng=make_rng(0))
    assert exc.value.epoch == 4


def test_trace_csv_round_trip():
    t = TrainTrace([TraceRecord(1, 0.0, 0.5, None, 0.69), TraceRecord(2, 0.1, 0.25, 0.3, 0.5)])
    text = t.to_csv()
    assert text.splitlines()[0] == "epoch,alpha,train_error,val_error,mean_loss"
    assert TrainTrace.from_csv(text) == t


def test_select_alpha():
    t = TrainTrace([TraceRecord(1, 0.0, 0, 0.10, 1), TraceRecord(2, 0.5, 0, 0.08, 1),
                    TraceRecord(3, 0.9, 0, 0.10, 1), TraceRecord(4, 1.0, 0, 0.2, 1)])
    assert select_alpha(t).alpha == 0.9
    assert select_alpha(TrainTrace([TraceRecord(1, 0.0, 0, None, 1)])) is None


def test_rbf_baseline_on_moons():
    rng = make_rng(0)
    train, _ = moons_train_test(100, 20, 0.05, rng)
    plan = TrainPlan(epochs_pretrain=0, epochs_anneal=30, optimizer=OptimizerCfg("adam", 1e-2, 0.0))
    m, trace, _ = train_rbf_baseline(train, ModelSpec("rbf", 16), plan, make_rng(1))
    m2, trace2, _ = train_rbf_baseline(train, ModelSpec("rbf", 16), plan, make_rng(1))
    assert trace == trace2
    assert np.all(np.isfinite(m.hidden.log_beta)) and np.all(m.hidden.beta > 0)
    assert all(math.isfinite(r.mean_loss) for r in trace)
    assert trace.records[-1].train_error < 0.5


def test_standard_baseline_has_alpha_zero():
    data = blobs(make_rng(3), n=40)
    m, trace, _ = fit(data, ModelSpec("standard", 8), TrainPlan(epochs_pretrain=5, epochs_anneal=5), rng=make_rng(0))
    assert isinstance(m.hidden, StandardLayer) and m.alpha == 0.0 and len(trace) == 10


@pytest.mark.parametrize("bias", [True, False])
def test_backbone_pretrain_and_anneal(bias):
    rng = make_rng(0)
    data = blobs(rng, n=80, d=5)
    spec = ModelSpec("csnn", 8, bias=bias, backbone_hidden=6)
    plan = TrainPlan(epochs_pretrain=50, epochs_anneal=150, alpha_schedule=AlphaSchedule("clamped-ramp", 10, 100),
                     optimizer=OptimizerCfg("adam", 1e-2, 1e-4), radius_init=0.5)
    seed = pretrain_standard(data, spec, plan, make_rng(1))
    # the folded alpha = 0 network still separates the data
    assert np.mean(np.argmax(raw_outputs(seed, data.X), axis=1) != data.y) == 0.0
    m, trace, _ = fit(data, spec, plan, rng=make_rng(1))
    assert isinstance(m, CsnnModel) and m.backbone is not None and m.input_dim == 5
    assert m.alpha == 1.0 and trace.records[-1].train_error == 0.0


def test_fit_regression_small():
    x = np.linspace(0, 1, 100)[:, None]
    plan = TrainPlan(epochs_pretrain=0, epochs_anneal=150, alpha_schedule=AlphaSchedule("clamped-ramp", 10, 50),
                     optimizer=OptimizerCfg("adam", 1e-2, 0.0), radius_init=0.01, seed=0)
    m, losses = fit_regression(x, np.sin(2 * np.pi * x[:, 0]), ModelSpec("csnn", 40, bias=True), plan)
    assert m.alpha == 1.0 and m.num_classes == 1
    assert losses[-1] < losses[0] and losses[-1] < 0.05

"""Monte-Carlo checks of the compact support neuron's geometry and gradients.

Each check returns a :class:`CheckResult` carrying the number of violations
and the worst violation seen, so the CLI can print one line per check and
tests can assert on the same numbers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from csnn.csn import CsnLayer, grad_bound, layer_backward, layer_forward, layer_preactivation, neuron_grad_x_batch, relu, support_sphere
from csnn.numeric import make_rng

BOUNDARY_MARGIN = 1e-9
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    trials: int
    failures: int
    max_violation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: trials={self.trials} failures={self.failures} "
                f"max_violation={self.max_violation:.3e} tol={self.tolerance:.1e}")


def random_neurons(rng: np.random.Generator, n: int, d: int = 3, with_bias: bool = True):
    """Random (w, b, R, alpha) with alpha in (0, 1]."""
    W = rng.normal(0.0, 1.0, size=(n, d))
    b = rng.normal(0.0, 0.5, size=n) if with_bias else np.zeros(n)
    R = rng.uniform(0.01, 2.0, size=n)
    alpha = 1.0 - rng.random(n)
    return W, b, R, alpha


def _unit(rng, m, d):
    u = rng.normal(size=(m, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _sample_around(rng, center, radius_sq, m):
    """Points inside, near the boundary on both sides, and outside a sphere."""
    d = center.shape[0]
    if radius_sq <= 0:
        scale = 1.0 + np.sqrt(abs(radius_sq))
        return center + _unit(rng, m, d) * rng.uniform(0.0, 3.0 * scale, size=(m, 1))
    q = m // 4
    s = np.concatenate([
        rng.uniform(0.0, 1.0, size=q),  # interior
        1.0 - 10.0 ** rng.uniform(-6, -1, size=q),  # just inside
        1.0 + 10.0 ** rng.uniform(-6, -1, size=q),  # just outside
        rng.uniform(1.0, 9.0, size=m - 3 * q),  # outside
    ])
    return center + _unit(rng, m, d) * np.sqrt(radius_sq * s)[:, None]


def _params_finite(W, b, R, alpha) -> bool:
    return bool(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) and np.all(np.isfinite(R))
                and np.all(np.isfinite(alpha)))


def check_support(W, b, R, alpha, rng, points_per_neuron: int = 100) -> CheckResult:
    """Outside the sphere (by at least the margin) the output is exactly 0; inside it is > 0."""
    W, b, R = np.atleast_2d(W), np.atleast_1d(b), np.atleast_1d(R)
    alpha = np.broadcast_to(np.atleast_1d(alpha), b.shape)
    failures = 0
    worst = 0.0
    for i in range(W.shape[0]):
        if not _params_finite(W[i], b[i], R[i], alpha[i]):
            failures += 1
            worst = np.inf
            continue
        sph = support_sphere(W[i], b[i], R[i], alpha[i])
        X = _sample_around(rng, sph.center, sph.radius_sq, points_per_neuron)
        out = layer_forward(X, CsnLayer(W[i][None], b[i : i + 1], R[i : i + 1], float(alpha[i])))[:, 0]
        diff = X - sph.center
        dist_sq = np.einsum("ij,ij->i", diff, diff)
        outside = dist_sq >= sph.radius_sq + BOUNDARY_MARGIN
        inside = dist_sq <= sph.radius_sq - BOUNDARY_MARGIN
        bad_out = outside & (out != 0.0)
        bad_in = inside & ~(out > 0.0)
        bad_nan = ~np.isfinite(out)
        failures += int(bad_out.sum() + bad_in.sum() + bad_nan.sum())
        if bad_out.any():
            worst = max(worst, float(np.max(out[bad_out])))
        if bad_nan.any():
            worst = np.inf
    return CheckResult("support_sphere", W.shape[0] * points_per_neuron, failures, worst, BOUNDARY_MARGIN)


def check_grad_bound(W, b, R, alpha, rng, points_per_neuron: int = 1000, tol: float = 1e-9) -> CheckResult:
    """|-alpha x + w|^2 on the support never exceeds the closed-form bound.

    Only points where the neuron is active are compared: for an empty support
    the closed form is negative while the gradient is identically zero.
    """
    W, b, R = np.atleast_2d(W), np.atleast_1d(b), np.atleast_1d(R)
    alpha = np.broadcast_to(np.atleast_1d(alpha), b.shape)
    failures = 0
    worst = 0.0
    for i in range(W.shape[0]):
        if not _params_finite(W[i], b[i], R[i], alpha[i]):
            failures += 1
            worst = np.inf
            continue
        bound = grad_bound(W[i], b[i], R[i], alpha[i])
        if alpha[i] > 0:
            sph = support_sphere(W[i], b[i], R[i], alpha[i])
            X = _sample_around(rng, sph.center, sph.radius_sq, points_per_neuron)
        else:
            X = rng.normal(0.0, 3.0, size=(points_per_neuron, W.shape[1]))
        g = neuron_grad_x_batch(X, W[i], b[i], R[i], alpha[i])
        active = np.any(g != 0.0, axis=1)
        if not active.any():
            continue
        excess = np.einsum("ij,ij->i", g[active], g[active]) - bound
        bad = excess > tol
        failures += int(bad.sum())
        worst = max(worst, float(excess.max()))
    return CheckResult("gradient_bound", W.shape[0] * points_per_neuron, failures, max(worst, 0.0), tol)


def _central_diff(f, arr, h):
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = out.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        fp = f()
        flat[j] = old - h
        fm = f()
        flat[j] = old
        g[j] = (fp - fm) / (2.0 * h)
    return out


def rel_err(a, b, floor: float = 1e-12) -> float:
    """Normwise relative error: max |a - b| over the largest magnitude in either array."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def check_layer_gradients(rng, trials: int = 20, layer: Optional[CsnLayer] = None, d: int = 4, K: int = 5,
                          h: float = 1e-5, tol: float = 1e-5) -> CheckResult:
    """Analytic ``layer_backward`` against central differences, away from ReLU kinks."""
    failures = 0
    worst = 0.0
    done = 0
    attempts = 0
    while done < trials and attempts < 100 * trials:
        attempts += 1
        if layer is None:
            lay = CsnLayer(rng.normal(size=(K, d)), rng.normal(0, 0.5, size=K), rng.uniform(0.5, 3.0, size=K),
                           float(rng.uniform(0.0, 1.0)))
        else:
            lay = layer.copy()
        dd = lay.in_dim
        x = rng.normal(0.0, 0.7, size=dd)
        if layer is not None:
            # start near a neuron centre so the point is likely inside some support
            i = rng.integers(lay.n_neurons)
            x = lay.W[i] / max(lay.alpha, 1e-3) + rng.normal(0.0, 0.1, size=dd) if lay.alpha > 0 else x
        pre = layer_preactivation(x, lay)
        if np.min(np.abs(pre)) < KINK_MARGIN:
            continue
        up = rng.normal(size=lay.n_neurons)
        gW, gb, gr, gx = layer_backward(x, lay, up)

        def f():
            return float(up @ layer_forward(x, lay))

        analytic = np.concatenate([gW.ravel(), gb, gr, gx])
        numeric = np.concatenate([_central_diff(f, lay.W, h).ravel(), _central_diff(f, lay.b, h),
                                  _central_diff(f, lay.r, h), _central_diff(f, x, h)])
        err = rel_err(analytic, numeric)
        worst = max(worst, err)
        failures += int(err > tol)
        done += 1
    if done < trials:
        failures += trials - done
    return CheckResult("finite_differences", trials, failures, worst, tol)


def check_alpha_zero(rng, trials: int = 1000, d: int = 5, K: int = 8, W=None, b=None, tol: float = 1e-12) -> CheckResult:
    """At alpha = 0 the layer equals relu(2 W x + b)."""
    failures = 0
    worst = 0.0
    for _ in range(trials):
        Wt = rng.normal(size=(K, d)) if W is None else W
        bt = rng.normal(size=K) if b is None else b
        x = rng.normal(size=Wt.shape[1])
        r = rng.uniform(0.0, 2.0, size=Wt.shape[0])
        got = layer_forward(x, CsnLayer(Wt, bt, r, 0.0))
        ref = relu(2.0 * (Wt @ x) + bt)
        err = float(np.max(np.abs(got - ref)))
        worst = max(worst, err)
        failures += int(not err <= tol)
    return CheckResult("alpha_zero_equivalence", trials, failures, worst, tol)


def run_verification(layer: Optional[CsnLayer] = None, trials: int = 10_000, points: int = 100,
                     seed: int = 0) -> list:
    """All checks, either on fresh random neurons or on the neurons of ``layer``."""
    rng = make_rng(seed)
    results = []
    if layer is None:
        W, b, R, alpha = random_neurons(rng, trials)
        results.append(check_alpha_zero(rng, trials=min(trials, 1000)))
        results.append(check_support(W, b, R, alpha, rng, points))
        results.append(check_grad_bound(W, b, R, alpha, rng, points))
        results.append(check_layer_gradients(rng, trials=20))
        return results
    finite = _params_finite(layer.W, layer.b, layer.r, layer.alpha)
    results.append(CheckResult("parameters_finite", 1, int(not finite), 0.0 if finite else np.inf, 0.0))
    if layer.alpha == 0.0:
        results.append(check_alpha_zero(rng, trials=min(trials, 1000), W=layer.W, b=layer.b))
    else:
        results.append(check_support(layer.W, layer.b, layer.r, layer.alpha, rng, points))
    results.append(check_grad_bound(layer.W, layer.b, layer.r, layer.alpha, rng, points))
    if finite:
        results.append(check_layer_gradients(rng, trials=20, layer=layer))
    return results


def bound_summary(layer: CsnLayer) -> dict:
    """Largest per-neuron gradient bound of a layer and the layer-wide envelope.

    The envelope alpha^2 max R + max(b) alpha (1 - alpha) + max |w|^2 (1 - alpha^2)
    dominates every per-neuron bound and shrinks toward max R as alpha -> 1.
    """
    a = layer.alpha
    w_sq = np.einsum("ij,ij->i", layer.W, layer.W)
    per_neuron = a**2 * layer.r + layer.b * a * (1.0 - a) + w_sq * (1.0 - a**2)
    envelope = a**2 * layer.r.max() + layer.b.max() * a * (1.0 - a) + w_sq.max() * (1.0 - a**2)
    return {"alpha": float(a), "max_bound": float(per_neuron.max()), "envelope": float(envelope),
            "dead_neurons": int(np.sum(layer.r + layer.b * (1.0 / a - 1.0) + w_sq * (1.0 / a**2 - 1.0) <= 0))
            if a > 0 else 0}

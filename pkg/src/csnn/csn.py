"""Compact support neurons and layers.

A compact support neuron with weights ``w``, bias ``b``, radius parameter ``R``
and shape parameter ``alpha`` computes

    relu(alpha * (R - |x|^2 - |w|^2 - b) + 2 w.x + b)

At ``alpha = 0`` this is the ReLU projection neuron ``relu(2 w.x + b)``; for any
``alpha > 0`` the output is exactly zero outside a sphere centred at
``w / alpha``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from csnn.numeric import as_matrix, as_vector, check_same_length, row_squared_norms


def relu(u):
    return np.maximum(u, 0.0)


@dataclass
class CsnLayer:
    W: np.ndarray  # (K, d), one neuron per row
    b: np.ndarray  # (K,)
    r: np.ndarray  # (K,) radius parameters
    alpha: float = 0.0

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")
        self.b = as_vector(self.b, "b")
        self.r = as_vector(self.r, "r")
        K = self.W.shape[0]
        if self.b.shape[0] != K or self.r.shape[0] != K:
            raise ValueError(
                f"inconsistent CSN layer shapes: W {self.W.shape}, b {self.b.shape}, r {self.r.shape}"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def n_neurons(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "CsnLayer":
        return CsnLayer(self.W.copy(), self.b.copy(), self.r.copy(), self.alpha)


@dataclass(frozen=True)
class SupportSphere:
    center: np.ndarray
    radius_sq: float  # negative means the neuron never fires


def neuron_preactivation(x, w, b: float, R: float, alpha: float) -> float:
    x = as_vector(x, "x")
    w = as_vector(w, "w")
    check_same_length(x, w, "neuron_forward")
    return float(alpha * (R - x @ x - w @ w - b) + 2.0 * (w @ x) + b)


def neuron_forward(x, w, b: float, R: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return max(neuron_preactivation(x, w, b, R, alpha), 0.0)


def layer_preactivation(X, layer: CsnLayer) -> np.ndarray:
    """Pre-activations for a single input (d,) or a batch (n, d)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != layer.in_dim:
        raise ValueError(f"input dimension {X.shape} does not match layer W {layer.W.shape}")
    a = layer.alpha
    x_sq = np.einsum("...j,...j->...", X, X)[..., None]
    w_sq = row_squared_norms(layer.W)
    return a * (layer.r - layer.b - x_sq - w_sq) + 2.0 * (X @ layer.W.T) + layer.b


def layer_forward(X, layer: CsnLayer) -> np.ndarray:
    return relu(layer_preactivation(X, layer))


def support_sphere(w, b: float, R: float, alpha: float) -> SupportSphere:
    if alpha <= 0:
        raise ValueError("unbounded support: alpha must be > 0")
    w = as_vector(w, "w")
    radius_sq = R + b * (1.0 / alpha - 1.0) + (w @ w) * (1.0 / alpha**2 - 1.0)
    return SupportSphere(center=w / alpha, radius_sq=float(radius_sq))


def neuron_grad_x(x, w, b: float, R: float, alpha: float) -> np.ndarray:
    """Input gradient in the normalisation used by the gradient bound: -alpha x + w.

    The exact derivative of :func:`neuron_forward` is twice this; the zero
    vector is returned on the boundary and outside the support.
    """
    x = as_vector(x, "x")
    w = as_vector(w, "w")
    if neuron_preactivation(x, w, b, R, alpha) > 0:
        return -alpha * x + w
    return np.zeros_like(x)


def neuron_grad_x_batch(X, w, b: float, R: float, alpha: float) -> np.ndarray:
    """:func:`neuron_grad_x` for every row of ``X`` (n, d)."""
    X = as_matrix(X, "X")
    w = as_vector(w, "w")
    check_same_length(X, w, "neuron_grad_x_batch")
    pre = alpha * (R - np.einsum("ij,ij->i", X, X) - w @ w - b) + 2.0 * (X @ w) + b
    return np.where((pre > 0)[:, None], -alpha * X + w, 0.0)


def grad_bound(w, b: float, R: float, alpha: float) -> float:
    """Upper bound on |neuron_grad_x|^2 over all inputs."""
    w = as_vector(w, "w")
    return float(alpha**2 * R + b * alpha * (1.0 - alpha) + (w @ w) * (1.0 - alpha**2))


def layer_backward(x, layer: CsnLayer, upstream):
    """Gradients of ``upstream . layer_forward(x)`` for a single input.

    Returns ``(grad_W, grad_b, grad_r, grad_x)``.
    """
    x = as_vector(x, "x")
    upstream = as_vector(upstream, "upstream")
    if upstream.shape[0] != layer.n_neurons:
        raise ValueError(f"upstream length {upstream.shape[0]} != number of neurons {layer.n_neurons}")
    gW, gb, gr, gx = layer_backward_batch(x[None, :], layer, upstream[None, :])
    return gW, gb, gr, gx[0]


def layer_backward_batch(X, layer: CsnLayer, upstream, pre=None):
    """Batched backward pass.

    ``upstream`` is (n, K). Parameter gradients are summed over the batch;
    the input gradient is returned per sample as (n, d).
    """
    X = as_matrix(X, "X")
    upstream = as_matrix(upstream, "upstream")
    if upstream.shape != (X.shape[0], layer.n_neurons):
        raise ValueError(f"upstream shape {upstream.shape} != ({X.shape[0]}, {layer.n_neurons})")
    if pre is None:
        pre = layer_preactivation(X, layer)
    a = layer.alpha
    g = np.where(pre > 0, upstream, 0.0)  # (n, K)
    g_sum = g.sum(axis=0)
    grad_W = 2.0 * (g.T @ X) - 2.0 * a * g_sum[:, None] * layer.W
    grad_b = (1.0 - a) * g_sum
    grad_r = a * g_sum
    grad_x = 2.0 * (g @ layer.W) - 2.0 * a * g.sum(axis=1)[:, None] * X
    return grad_W, grad_b, grad_r, grad_x


def standard_forward(X, W, b) -> np.ndarray:
    """ReLU layer in the doubled-weight convention ``relu(2 W x + b)``."""
    return relu(2.0 * (np.asarray(X, dtype=np.float64) @ W.T) + b)


def rbf_neuron_forward(x, w, beta: float) -> float:
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    x = as_vector(x, "x")
    w = as_vector(w, "w")
    check_same_length(x, w, "rbf_neuron_forward")
    diff = x - w
    return float(np.exp(-beta * (diff @ diff)))


def rbf_sq_dists(X, centers) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    diff = X[..., None, :] - centers  # (..., K, d)
    return np.einsum("...kj,...kj->...k", diff, diff)


def rbf_layer_forward(X, centers, log_beta) -> np.ndarray:
    return np.exp(-np.exp(log_beta) * rbf_sq_dists(X, centers))


def rbf_layer_backward_batch(X, centers, log_beta, upstream):
    """Gradients of ``sum(upstream * h)`` w.r.t. centers, log-widths and inputs."""
    X = as_matrix(X, "X")
    beta = np.exp(log_beta)
    diff = X[:, None, :] - centers  # (n, K, d)
    D = np.einsum("nkj,nkj->nk", diff, diff)
    h = np.exp(-beta * D)
    gh = upstream * h  # (n, K)
    grad_centers = 2.0 * beta[:, None] * np.einsum("nk,nkj->kj", gh, diff)
    grad_log_beta = -(beta * (gh * D).sum(axis=0))
    grad_x = -2.0 * np.einsum("nk,nkj->nj", gh * beta, diff)
    return grad_centers, grad_log_beta, grad_x

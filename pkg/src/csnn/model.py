"""Full networks: normaliser -> hidden layer -> bias-free linear head.

The hidden layer is one of three variants: a compact support layer, the
standard ReLU layer it is annealed from, or a Gaussian RBF layer used as a
baseline. An optional frozen one-layer ReLU backbone may precede the
normaliser.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from csnn._io import write_atomic
from csnn.csn import CsnLayer, layer_forward, rbf_layer_forward, relu, standard_forward
from csnn.numeric import as_matrix, as_vector

FORMAT_VERSION = 1
SIGMA_FLOOR = 1e-8


class ModelFormatError(ValueError):
    """Raised when a model file cannot be parsed; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class Normalizer:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = as_vector(self.mu, "mu")
        self.sigma = as_vector(self.sigma, "sigma")
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def __call__(self, U) -> np.ndarray:
        return normalize(self, U)


def fit_normalizer(data) -> Normalizer:
    """Per-dimension mean and population standard deviation, std floored at 1e-8."""
    U = np.asarray(data, dtype=np.float64)
    if U.size == 0 or U.shape[0] == 0:
        raise ValueError("cannot fit a normalizer on empty data")
    if U.ndim != 2:
        raise ValueError(f"expected an (n, d) array of samples, got shape {U.shape}")
    mu = U.mean(axis=0)
    sigma = np.maximum(U.std(axis=0), SIGMA_FLOOR)
    return Normalizer(mu, sigma)


def normalize(n: Normalizer, U) -> np.ndarray:
    """Standardise to zero mean and per-dimension std 1/sqrt(d)."""
    U = np.asarray(U, dtype=np.float64)
    if U.shape[-1] != n.dim:
        raise ValueError(f"normalize dimension mismatch: input {U.shape} vs normalizer dim {n.dim}")
    return (U - n.mu) / (np.sqrt(n.dim) * n.sigma)


@dataclass
class StandardLayer:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")
        self.b = as_vector(self.b, "b")
        if self.b.shape[0] != self.W.shape[0]:
            raise ValueError(f"W {self.W.shape} and b {self.b.shape} disagree")

    @property
    def n_neurons(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "StandardLayer":
        return StandardLayer(self.W.copy(), self.b.copy())


@dataclass
class RbfLayer:
    W: np.ndarray  # centers, (K, d)
    log_beta: np.ndarray  # widths stored in log space so beta stays positive

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")
        self.log_beta = as_vector(self.log_beta, "log_beta")
        if self.log_beta.shape[0] != self.W.shape[0]:
            raise ValueError(f"W {self.W.shape} and log_beta {self.log_beta.shape} disagree")

    @property
    def beta(self) -> np.ndarray:
        return np.exp(self.log_beta)

    @property
    def n_neurons(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "RbfLayer":
        return RbfLayer(self.W.copy(), self.log_beta.copy())


@dataclass
class Backbone:
    """Frozen feature extractor ``relu(A x + c)``."""

    A: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.A = as_matrix(self.A, "A")
        self.c = as_vector(self.c, "c")

    def __call__(self, X) -> np.ndarray:
        return relu(np.asarray(X, dtype=np.float64) @ self.A.T + self.c)


Hidden = Union[CsnLayer, StandardLayer, RbfLayer]


def arch_type(hidden: Hidden) -> str:
    if isinstance(hidden, CsnLayer):
        return "csnn"
    if isinstance(hidden, StandardLayer):
        return "standard"
    if isinstance(hidden, RbfLayer):
        return "rbf"
    raise TypeError(f"unknown hidden layer type {type(hidden).__name__}")


def hidden_forward(hidden: Hidden, V) -> np.ndarray:
    if isinstance(hidden, CsnLayer):
        return layer_forward(V, hidden)
    if isinstance(hidden, StandardLayer):
        return standard_forward(V, hidden.W, hidden.b)
    if isinstance(hidden, RbfLayer):
        return rbf_layer_forward(V, hidden.W, hidden.log_beta)
    raise TypeError(f"unknown hidden layer type {type(hidden).__name__}")


@dataclass
class CsnnModel:
    normalizer: Normalizer
    hidden: Hidden
    L: np.ndarray  # (C, K), no bias so the head can emit an all-zero vector
    backbone: Optional[Backbone] = field(default=None)

    def __post_init__(self):
        self.L = as_matrix(self.L, "L")
        if self.L.shape[1] != self.hidden.n_neurons:
            raise ValueError(f"head L {self.L.shape} does not match {self.hidden.n_neurons} hidden neurons")
        if self.normalizer.dim != self.hidden.in_dim:
            raise ValueError(
                f"normalizer dim {self.normalizer.dim} does not match hidden input dim {self.hidden.in_dim}"
            )
        if self.backbone is not None and self.backbone.A.shape[0] != self.normalizer.dim:
            raise ValueError("backbone output dim does not match normalizer dim")

    @property
    def num_classes(self) -> int:
        return self.L.shape[0]

    @property
    def input_dim(self) -> int:
        return self.backbone.A.shape[1] if self.backbone is not None else self.normalizer.dim

    @property
    def alpha(self) -> float:
        return self.hidden.alpha if isinstance(self.hidden, CsnLayer) else 0.0

    def features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.input_dim:
            raise ValueError(f"input dimension {X.shape[-1]} != model input dimension {self.input_dim}")
        if self.backbone is not None:
            X = self.backbone(X)
        return normalize(self.normalizer, X)

    def copy(self) -> "CsnnModel":
        bb = None if self.backbone is None else Backbone(self.backbone.A.copy(), self.backbone.c.copy())
        return CsnnModel(
            Normalizer(self.normalizer.mu.copy(), self.normalizer.sigma.copy()),
            self.hidden.copy(),
            self.L.copy(),
            bb,
        )


def raw_outputs(m: CsnnModel, X) -> np.ndarray:
    """Head outputs before softmax, for one input (d,) or a batch (n, d)."""
    H = hidden_forward(m.hidden, m.features(X))
    return H @ m.L.T


def softmax(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    e = np.exp(Z - Z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def confidence(m: CsnnModel, X):
    """Softmax probabilities and predicted class; ties go to the lowest index."""
    probs = softmax(raw_outputs(m, X))
    # np.argmax returns the first maximum, which is the lowest-index tie-break
    return probs, np.argmax(probs, axis=-1)


# -- serialisation -----------------------------------------------------------


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(blob, name: str) -> np.ndarray:
    if not isinstance(blob, dict) or "shape" not in blob or "data" not in blob:
        raise ModelFormatError(name, "expected an object with 'shape' and 'data'")
    try:
        shape = tuple(int(s) for s in blob["shape"])
        raw = base64.b64decode(blob["data"], validate=True)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(name, f"undecodable blob ({exc})") from None
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ModelFormatError(name, f"blob holds {len(raw)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def model_to_dict(m: CsnnModel) -> dict:
    kind = arch_type(m.hidden)
    params = {"W": _encode(m.hidden.W), "L": _encode(m.L)}
    if kind in ("csnn", "standard"):
        params["b"] = _encode(m.hidden.b)
    if kind == "csnn":
        params["r"] = _encode(m.hidden.r)
    if kind == "rbf":
        params["log_beta"] = _encode(m.hidden.log_beta)
    if m.backbone is not None:
        params["backbone_A"] = _encode(m.backbone.A)
        params["backbone_c"] = _encode(m.backbone.c)
    return {
        "version": FORMAT_VERSION,
        "byte_order": "little",
        "arch": {
            "type": kind,
            "d": m.input_dim,
            "K": m.hidden.n_neurons,
            "C": m.num_classes,
            "alpha": m.alpha,
            "backbone_hidden": 0 if m.backbone is None else m.backbone.A.shape[0],
        },
        "normalizer": {"mu": _encode(m.normalizer.mu), "sigma": _encode(m.normalizer.sigma)},
        "params": params,
    }


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ModelFormatError(f"{where}.{key}" if where else key, "missing field")
    return d[key]


def model_from_dict(doc: dict) -> CsnnModel:
    version = _require(doc, "version", "")
    if version != FORMAT_VERSION:
        raise ModelFormatError("version", f"unsupported version {version!r} (expected {FORMAT_VERSION})")
    if doc.get("byte_order", "little") != "little":
        raise ModelFormatError("byte_order", f"unsupported byte order {doc['byte_order']!r}")
    arch = _require(doc, "arch", "")
    kind = _require(arch, "type", "arch")
    if kind not in ("csnn", "standard", "rbf"):
        raise ModelFormatError("arch.type", f"unknown architecture {kind!r}")
    norm = _require(doc, "normalizer", "")
    params = _require(doc, "params", "")

    def p(name):
        return _decode(_require(params, name, "params"), f"params.{name}")

    normalizer = Normalizer(
        _decode(_require(norm, "mu", "normalizer"), "normalizer.mu"),
        _decode(_require(norm, "sigma", "normalizer"), "normalizer.sigma"),
    )
    try:
        if kind == "csnn":
            alpha = float(_require(arch, "alpha", "arch"))
            hidden = CsnLayer(p("W"), p("b"), p("r"), alpha)
        elif kind == "standard":
            hidden = StandardLayer(p("W"), p("b"))
        else:
            hidden = RbfLayer(p("W"), p("log_beta"))
        backbone = None
        if int(arch.get("backbone_hidden", 0)) > 0:
            backbone = Backbone(p("backbone_A"), p("backbone_c"))
        model = CsnnModel(normalizer, hidden, p("L"), backbone)
    except ModelFormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise ModelFormatError("params", str(exc)) from None
    for key, value in (("K", model.hidden.n_neurons), ("C", model.num_classes), ("d", model.input_dim)):
        if key in arch and int(arch[key]) != value:
            raise ModelFormatError(f"arch.{key}", f"declared {arch[key]} but parameters imply {value}")
    return model


def dumps_model(m: CsnnModel) -> str:
    return json.dumps(model_to_dict(m), indent=1, sort_keys=True) + "\n"


def save_model(m: CsnnModel, path) -> None:
    write_atomic(path, dumps_model(m))


def load_model(path) -> CsnnModel:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError("<document>", f"malformed JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ModelFormatError("<document>", "top level must be an object")
    return model_from_dict(doc)

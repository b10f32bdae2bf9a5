"""Dense float64 linear algebra helpers and the seeded random generator.

Matrices and vectors are plain float64 numpy arrays (row-major). The random
generator is always numpy's PCG64 bit generator, never the global numpy state,
so a seed yields the same stream on every platform.
"""
from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "PCG64"


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_same_length(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch in {what}: {a.shape} vs {b.shape}")


def matvec(m, v) -> np.ndarray:
    """Matrix-vector product with an explicit shape check."""
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"matvec dimension mismatch: matrix {m.shape} vs vector {v.shape}")
    return m @ v


def squared_norm(v) -> float:
    v = as_vector(v)
    return float(np.dot(v, v))


def row_squared_norms(m) -> np.ndarray:
    """Squared Euclidean norm of every row, i.e. the diagonal of m @ m.T."""
    m = as_matrix(m)
    return np.einsum("ij,ij->i", m, m)


def make_rng(seed: int) -> np.random.Generator:
    """A generator pinned to PCG64 so streams do not depend on numpy defaults."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def rng_normal(rng: np.random.Generator, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full(n, float(mean))
    return rng.normal(mean, std, size=n)

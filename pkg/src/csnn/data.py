"""Datasets: the two-moons generator, the OOD grid, CSV and IDX ingestion."""
from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from csnn._io import write_atomic

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """A data file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass
class Dataset:
    X: np.ndarray  # (n, d)
    y: np.ndarray  # (n,) integer labels
    num_classes: int
    name: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValueError(f"X must be (n, d), got shape {self.X.shape}")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.X.shape[0]} samples but {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, name: Optional[str] = None) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.num_classes, name or self.name, dict(self.info))


@dataclass
class OodGrid:
    points: np.ndarray  # (m, d)
    excluded_radius: float
    bounds: tuple
    grid_per_dim: int

    def __len__(self) -> int:
        return self.points.shape[0]


# -- moons -------------------------------------------------------------------


def moons_arcs(n: int, noise_std: float, rng: np.random.Generator):
    """Unscaled moons: class 0 on (cos t, sin t), class 1 on (1 - cos t, 0.5 - sin t)."""
    n0 = (n + 1) // 2
    n1 = n // 2
    t0 = np.linspace(0.0, math.pi, n0)
    t1 = np.linspace(0.0, math.pi, n1)
    X = np.concatenate(
        [
            np.stack([np.cos(t0), np.sin(t0)], axis=1),
            np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1),
        ]
    )
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise_std > 0:
        X = X + rng.normal(0.0, noise_std, size=X.shape)
    return X, y


def make_moons(n: int, noise_std: float, rng: np.random.Generator) -> Dataset:
    """Two interleaved half circles, min-max rescaled into [0, 1]^2."""
    if n < 2:
        raise ValueError(f"make_moons needs n >= 2, got {n}")
    X, y = moons_arcs(n, noise_std, rng)
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    Xs = (X - lo) / (hi - lo)
    # guard the float rounding of (hi - lo) / (hi - lo)
    Xs = np.clip(Xs, 0.0, 1.0)
    return Dataset(Xs, y, 2, "moons", {"scale_min": lo, "scale_max": hi})


def split_stratified(ds: Dataset, n_first: int, rng: np.random.Generator):
    """Split into two parts of ``n_first`` and ``len(ds) - n_first`` samples with class
    proportions preserved as far as integer counts allow."""
    if not 0 < n_first < len(ds):
        raise ValueError(f"n_first must be in (0, {len(ds)}), got {n_first}")
    first = []
    second = []
    remaining = n_first
    classes = list(range(ds.num_classes))
    for i, c in enumerate(classes):
        idx = np.flatnonzero(ds.y == c)
        idx = idx[rng.permutation(idx.size)]
        if i == len(classes) - 1:
            take = remaining
        else:
            take = min(remaining, int(round(idx.size * n_first / len(ds))))
        take = min(take, idx.size)
        first.append(idx[:take])
        second.append(idx[take:])
        remaining -= take
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return ds.subset(a, ds.name + "-train"), ds.subset(b, ds.name + "-test")


def moons_train_test(n_train: int, n_test: int, noise_std: float, rng: np.random.Generator):
    """Generate ``n_train + n_test`` moons points with one common rescaling, then split."""
    full = make_moons(n_train + n_test, noise_std, rng)
    train, test = split_stratified(full, n_train, rng)
    return train, test


# -- OOD grid ----------------------------------------------------------------


def min_distances(points: np.ndarray, reference: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Distance from every row of ``points`` to its nearest row of ``reference``."""
    out = np.empty(points.shape[0])
    ref_sq = np.einsum("ij,ij->i", reference, reference)
    for start in range(0, points.shape[0], chunk):
        p = points[start : start + chunk]
        d2 = np.einsum("ij,ij->i", p, p)[:, None] + ref_sq[None, :] - 2.0 * p @ reference.T
        out[start : start + chunk] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return out


def make_ood_grid(in_data, grid_per_dim: int, low: float, high: float, min_dist: float) -> OodGrid:
    """Uniform grid over [low, high]^d minus every point within ``min_dist`` of the data."""
    ref = in_data.X if isinstance(in_data, Dataset) else np.asarray(in_data, dtype=np.float64)
    d = ref.shape[1]
    axis = np.linspace(low, high, grid_per_dim)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=1)
    # exact squared distances for the keep/drop decision; the expanded form above can
    # misclassify points sitting right at min_dist
    keep = np.ones(grid.shape[0], dtype=bool)
    for start in range(0, grid.shape[0], 1024):
        diff = grid[start : start + 1024, None, :] - ref[None, :, :]
        d2 = np.einsum("gnj,gnj->gn", diff, diff)
        keep[start : start + 1024] = d2.min(axis=1) > min_dist**2
    points = grid[keep]
    if points.shape[0] == 0:
        raise ValueError("empty OOD set: every grid point lies within min_dist of the data")
    return OodGrid(points, float(min_dist), (float(low), float(high)), int(grid_per_dim))


# -- CSV ---------------------------------------------------------------------


def _label_sort_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def load_csv(path, label_column: Optional[str] = "label", name: Optional[str] = None) -> Dataset:
    """Read a numeric CSV with a header row.

    Labels are remapped to contiguous ids 0..C-1 (numeric labels in numeric
    order); the mapping is stored in ``info["label_map"]``. With
    ``label_column=None`` every sample gets label 0.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file, header required", path, 1) from None
        header = [h.strip() for h in header]
        if label_column is not None and label_column not in header:
            raise DataFormatError(f"label column {label_column!r} not in header {header}", path, 1)
        label_idx = header.index(label_column) if label_column is not None else None
        feature_names = [h for i, h in enumerate(header) if i != label_idx]
        rows = []
        labels = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", path, line_no)
            values = []
            for i, cell in enumerate(row):
                if i == label_idx:
                    labels.append(cell.strip())
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataFormatError(f"non-numeric value {cell!r} in column {header[i]!r}", path, line_no) from None
                if not math.isfinite(v):
                    raise DataFormatError(f"non-finite value {cell!r} in column {header[i]!r}", path, line_no)
                values.append(v)
            rows.append(values)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(feature_names))
    if label_idx is None:
        y = np.zeros(len(rows), dtype=np.int64)
        label_map = {}
        num_classes = 1
    else:
        uniq = sorted(set(labels), key=_label_sort_key)
        label_map = {lab: i for i, lab in enumerate(uniq)}
        y = np.array([label_map[lab] for lab in labels], dtype=np.int64)
        num_classes = max(len(uniq), 1)
    return Dataset(X, y, num_classes, name or path.stem, {"label_map": label_map, "features": feature_names})


def write_csv(ds: Dataset, path, label_column: Optional[str] = "label") -> None:
    """Write features with ``repr`` precision so a reload is exact."""
    names = ds.info.get("features") or [f"x{j}" for j in range(ds.dim)]
    lines = [",".join(list(names) + ([label_column] if label_column else []))]
    for xi, yi in zip(ds.X, ds.y):
        cells = [repr(float(v)) for v in xi]
        if label_column:
            cells.append(str(int(yi)))
        lines.append(",".join(cells))
    write_atomic(path, "\n".join(lines) + "\n")


# -- IDX ---------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, path, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError("file too short for an IDX header", path)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}", path)
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError("truncated IDX dimension header", path)
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    if len(raw) - header_len < count:
        raise DataFormatError(f"short file: {len(raw) - header_len} data bytes, expected {count}", path)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_len).reshape(dims)


def load_idx(images_path, labels_path, limit: Optional[int] = None, rng: Optional[np.random.Generator] = None,
             name: Optional[str] = None) -> Dataset:
    """Load an IDX image/label pair (optionally gzipped) as flattened pixels in [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), images_path, IDX_IMAGES_MAGIC)
    labels = _parse_idx(_read_bytes(labels_path), labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", labels_path)
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if limit is not None and limit < X.shape[0]:
        if rng is None:
            raise ValueError("subsampling with limit requires a seeded rng")
        idx = np.sort(rng.choice(X.shape[0], size=limit, replace=False))
        X, y = X[idx], y[idx]
    num_classes = int(y.max()) + 1 if y.size else 1
    return Dataset(X, y, num_classes, name or Path(images_path).stem, {"image_shape": images.shape[1:]})


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    write_atomic(path, payload)

"""OOD scoring, ROC/AUROC, error rates and confidence-map rasters."""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from csnn._io import write_atomic
from csnn.data import Dataset
from csnn.model import CsnnModel, confidence, raw_outputs

IN_DIST, OOD = 0, 1


def eval_threads() -> int:
    """Evaluation parallelism cap from ``CSNN_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("CSNN_THREADS", "1")))
    except ValueError:
        return 1


def batched(fn, X, chunk: int = 4096) -> np.ndarray:
    """Apply a row-wise function over chunks of ``X``, fanning out over threads.

    Results are concatenated in input order, so the output does not depend on
    the thread count.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] <= chunk:
        return fn(X)
    parts = [X[i : i + chunk] for i in range(0, X.shape[0], chunk)]
    threads = eval_threads()
    if threads == 1:
        return np.concatenate([fn(p) for p in parts])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(fn, parts)))


def ood_score(m: CsnnModel, X) -> np.ndarray:
    """Maximum raw output; large for in-distribution inputs, 0 outside every support."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return float(raw_outputs(m, X).max())
    return batched(lambda B: raw_outputs(m, B).max(axis=1), X)


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray  # 0 = in-distribution, 1 = OOD

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError(f"scores {self.scores.shape} and labels {self.labels.shape} must be equal-length 1-D")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if not np.all((self.labels == IN_DIST) | (self.labels == OOD)):
            raise ValueError("labels must be 0 (in-distribution) or 1 (OOD)")

    @classmethod
    def from_groups(cls, in_scores, ood_scores) -> "ScoredSet":
        in_scores = np.asarray(in_scores, dtype=np.float64).ravel()
        ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
        return cls(np.concatenate([in_scores, ood_scores]),
                   np.concatenate([np.zeros(in_scores.size, np.int64), np.ones(ood_scores.size, np.int64)]))


@dataclass
class RocResult:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auroc: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return buf.getvalue()


def auroc(s: ScoredSet) -> RocResult:
    """ROC for "score >= threshold means in-distribution".

    The area is the Mann-Whitney statistic P(score_in > score_ood) + P(tie) / 2,
    computed from mid-ranks so ties are handled exactly.
    """
    is_in = s.labels == IN_DIST
    n_in = int(is_in.sum())
    n_ood = s.labels.size - n_in
    if n_in == 0 or n_ood == 0:
        raise ValueError("AUROC needs both in-distribution and OOD samples")

    uniq, inverse, counts = np.unique(s.scores, return_inverse=True, return_counts=True)
    # mid-rank of each distinct value (1-based ranks, ascending scores)
    upper = np.cumsum(counts)
    midrank = upper - (counts - 1) / 2.0
    rank_sum_in = midrank[inverse[is_in]].sum()
    u_stat = rank_sum_in - n_in * (n_in + 1) / 2.0
    area = u_stat / (n_in * n_ood)

    in_counts = np.bincount(inverse[is_in], minlength=uniq.size)[::-1]
    ood_counts = np.bincount(inverse[~is_in], minlength=uniq.size)[::-1]
    tpr = np.concatenate([[0.0], np.cumsum(in_counts) / n_in])
    fpr = np.concatenate([[0.0], np.cumsum(ood_counts) / n_ood])
    thresholds = np.concatenate([[np.inf], uniq[::-1]])
    return RocResult(thresholds, tpr, fpr, float(area))


def auroc_brute_force(in_scores, ood_scores) -> float:
    """O(n^2) pair count; the reference the ranked version is checked against."""
    a = np.asarray(in_scores, dtype=np.float64)[:, None]
    b = np.asarray(ood_scores, dtype=np.float64)[None, :]
    wins = np.count_nonzero(a > b)
    ties = np.count_nonzero(a == b)
    return (wins + 0.5 * ties) / (a.size * b.size)


def error_rate(m: CsnnModel, d: Dataset) -> float:
    if len(d) == 0:
        raise ValueError("error rate of an empty dataset is undefined")
    pred = batched(lambda B: confidence(m, B)[1], d.X)
    return float(np.mean(pred != d.y))


def evaluate_ood(m: CsnnModel, in_data: Dataset, ood_X) -> dict:
    """Test error on ``in_data`` plus AUROC of in-distribution vs ``ood_X`` scores."""
    ood_X = np.asarray(ood_X, dtype=np.float64)
    if ood_X.ndim != 2 or ood_X.shape[0] == 0:
        raise ValueError("OOD set is empty")
    s_in = ood_score(m, in_data.X)
    s_ood = ood_score(m, ood_X)
    roc = auroc(ScoredSet.from_groups(s_in, s_ood))
    return {
        "test_error": error_rate(m, in_data),
        "auroc": roc.auroc,
        "n_in": int(s_in.size),
        "n_ood": int(s_ood.size),
        "frac_ood_zero_score": float(np.mean(s_ood == 0.0)),
    }, roc


# -- confidence maps ---------------------------------------------------------


@dataclass
class ConfidenceMap:
    """Max-class softmax confidence on a grid. Row 0 is the top (largest y)."""

    values: np.ndarray  # (resolution, resolution)
    xs: np.ndarray
    ys: np.ndarray
    num_classes: int

    def to_pgm(self) -> bytes:
        return pgm_bytes(self.values, self.num_classes)

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(float(v)) for v in row) for row in self.values) + "\n"

    def save(self, stem) -> None:
        write_atomic(f"{stem}.pgm", self.to_pgm())
        write_atomic(f"{stem}.csv", self.to_csv())


def confidence_map(m: CsnnModel, bounds=((-0.5, 1.5), (-0.5, 1.5)), resolution: int = 100) -> ConfidenceMap:
    if m.input_dim != 2:
        raise ValueError(f"confidence maps need a 2-D model, this one takes {m.input_dim} inputs")
    (x0, x1), (y0, y1) = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys[::-1])
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    conf = batched(lambda B: confidence(m, B)[0].max(axis=1), pts)
    return ConfidenceMap(conf.reshape(resolution, resolution), xs, ys, m.num_classes)


def pgm_bytes(values, num_classes: int) -> bytes:
    """Binary PGM (P5, maxval 255); confidence 1/C maps to white, 1 to black."""
    values = np.asarray(values, dtype=np.float64)
    floor = 1.0 / num_classes
    span = 1.0 - floor
    if span > 0:
        shade = 255.0 * (1.0 - (values - floor) / span)
    else:
        shade = np.full_like(values, 255.0)
    pixels = np.clip(np.rint(shade), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Parse the P5 files written by :func:`pgm_bytes`."""
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError("not a binary PGM (P5) file")
    w, h = (int(t) for t in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError("only maxval 255 is supported")
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)

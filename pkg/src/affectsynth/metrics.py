"""Evaluation measures for valence-arousal regression and expression classification.

All moments are population (1/N) moments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or x.shape != y.shape:
        raise ValueError(f"need two non-empty series of equal length, got {x.size} and {y.size}")
    return x, y


def ccc(x, y) -> float:
    """Concordance correlation coefficient."""
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    sxy = np.mean((x - mx) * (y - my))
    den = x.var() + y.var() + (mx - my) ** 2
    if den == 0:
        raise UndefinedMetricError("CCC is undefined for two equal constant series")
    return float(2 * sxy / den)


def pcc(x, y) -> float:
    """Pearson correlation coefficient."""
    x, y = _pair(x, y)
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        raise UndefinedMetricError("PCC is undefined for a constant series")
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def sagr(x, y) -> float:
    """Sign agreement rate; a zero agrees with either sign."""
    x, y = _pair(x, y)
    agree = ((x >= 0) & (y >= 0)) | ((x <= 0) & (y <= 0))
    return float(np.mean(agree))


def confusion(pred, truth, num_classes: int | None = None) -> np.ndarray:
    """Counts with rows indexed by the true class and columns by the prediction."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("need two non-empty label series of equal length")
    if min(pred.min(), truth.min()) < 0:
        raise ValueError("class ids must be nonnegative")
    k = num_classes if num_classes is not None else int(max(pred.max(), truth.max())) + 1
    if max(pred.max(), truth.max()) >= k:
        raise ValueError("class id out of range")
    M = np.zeros((k, k), dtype=np.int64)
    np.add.at(M, (truth, pred), 1)
    return M


def f1_per_class(pred, truth, num_classes: int) -> np.ndarray:
    """F1 per class; a class that is never predicted and never true scores 0."""
    M = confusion(pred, truth, num_classes).astype(np.float64)
    tp = np.diag(M)
    fp = M.sum(axis=0) - tp
    fn = M.sum(axis=1) - tp
    den = 2 * tp + fp + fn
    return np.divide(2 * tp, den, out=np.zeros_like(tp), where=den > 0)


def f1_macro(pred, truth, num_classes: int) -> float:
    return float(np.mean(f1_per_class(pred, truth, num_classes)))


def diag_average(matrix) -> float:
    """Mean of the diagonal of the row-normalised confusion matrix (empty rows count 0)."""
    M = np.asarray(matrix, dtype=np.float64)
    rows = M.sum(axis=1)
    d = np.divide(np.diag(M), rows, out=np.zeros(len(M)), where=rows > 0)
    return float(np.mean(d))


@dataclass(frozen=True)
class VAGrid:
    """Per-cell MSE over a B x B tiling of [-1, 1]^2, binned by the true VA.

    ``mse[i, j]`` covers valence bin ``i`` and arousal bin ``j``; it is the
    mean over samples of the average of the valence and arousal squared
    errors, NaN where the cell is empty.
    """

    edges: np.ndarray
    counts: np.ndarray
    mse: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0


def _bin(values: np.ndarray, B: int) -> np.ndarray:
    idx = np.floor((values + 1.0) / 2.0 * B).astype(np.int64)
    return np.clip(idx, 0, B - 1)


def va_grid_mse(pred_va, true_va, B: int) -> VAGrid:
    P = np.asarray(pred_va, dtype=np.float64).reshape(-1, 2)
    T = np.asarray(true_va, dtype=np.float64).reshape(-1, 2)
    if P.shape != T.shape or len(P) == 0:
        raise ValueError("need non-empty prediction and truth arrays of equal length")
    if B < 1:
        raise ValueError("B must be at least 1")
    if np.any(np.abs(T) > 1):
        raise ValueError("true VA values must lie in [-1, 1]")
    err = np.mean((P - T) ** 2, axis=1)
    iv, ia = _bin(T[:, 0], B), _bin(T[:, 1], B)
    counts = np.zeros((B, B), dtype=np.int64)
    sums = np.zeros((B, B))
    np.add.at(counts, (iv, ia), 1)
    np.add.at(sums, (iv, ia), err)
    cell = np.divide(sums, counts, out=np.full((B, B), np.nan), where=counts > 0)
    return VAGrid(np.linspace(-1.0, 1.0, B + 1), counts, cell)


def regression_report(pred, truth) -> dict:
    """CCC, PCC, MSE and SAGR for one series; undefined measures become None."""
    out = {}
    for name, fn in (("ccc", ccc), ("pcc", pcc), ("mse", mse), ("sagr", sagr)):
        try:
            out[name] = fn(pred, truth)
        except UndefinedMetricError:
            out[name] = None
    return out

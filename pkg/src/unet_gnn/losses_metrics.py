"""Pixel losses (cross-entropy, one-hot Wasserstein) and confusion-matrix metrics."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, FormatError
from .tensor_core import Tensor, record

PROB_FLOOR = 1e-12


def _scored(pred: Tensor, targets: np.ndarray, ignore_index: Optional[int]):
    """Flatten ``[C,H,W]`` / ``[N,C,H,W]`` to (pixel index, class index) of scored pixels."""
    c = pred.shape[-3]
    t = np.asarray(targets)
    if t.shape != pred.shape[:-3] + pred.shape[-2:]:
        raise DataError(f"targets shape {list(t.shape)} does not match predictions {list(pred.shape)}")
    keep = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
    tk = t[keep].astype(np.int64)
    if tk.size == 0:
        raise DataError("no scored pixels: every target is ignore_index")
    if tk.min() < 0 or tk.max() >= c:
        raise DataError(f"target labels must lie in [0, {c}), got range [{tk.min()}, {tk.max()}]")
    return keep, tk


def _channels_last(arr):
    return np.moveaxis(arr, -3, -1)


def cross_entropy(pred: Tensor, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean of ``-log p[target]`` over scored pixels, with ``p`` floored at 1e-12."""
    keep, tk = _scored(pred, targets, ignore_index)
    p = _channels_last(pred.data)[keep]  # [M, C]
    picked = p[np.arange(tk.size), tk]
    live = picked > PROB_FLOOR
    vals = -np.log(np.maximum(picked, PROB_FLOOR))
    out = np.asarray(vals.mean(), dtype=pred.dtype)
    m = tk.size

    def bw(g):
        gp = np.zeros_like(p)
        gp[np.arange(m), tk] = np.where(live, -float(g) / (m * picked), 0.0)
        full = np.zeros(_channels_last(pred.data).shape, dtype=pred.dtype)
        full[keep] = gp
        return (np.moveaxis(full, -1, -3),)

    return record("cross_entropy", out, (pred,), bw)


@dataclass
class CostMatrix:
    """Class-to-class transition costs; zero diagonal, non-negative, finite."""

    M: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.M, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ConfigError(f"cost matrix must be square, got shape {list(M.shape)}")
        if not np.all(np.isfinite(M)):
            raise ConfigError("cost matrix has non-finite entries")
        if np.any(M < 0):
            raise ConfigError("cost matrix has negative entries")
        if np.any(np.diag(M) != 0):
            raise ConfigError("cost matrix diagonal must be zero")
        self.M = M

    @property
    def num_classes(self):
        return self.M.shape[0]

    def dumps(self) -> str:
        rows = [" ".join(repr(float(v)) for v in row) for row in self.M]
        return "\n".join([str(self.num_classes), *rows]) + "\n"

    @classmethod
    def loads(cls, text: str) -> "CostMatrix":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise FormatError("cost matrix file is empty")
        try:
            c = int(lines[0].strip())
        except ValueError:
            raise FormatError(f"line 1: expected class count, got {lines[0]!r}") from None
        if len(lines) != c + 1:
            raise FormatError(f"expected {c} matrix rows after the header, found {len(lines) - 1}")
        rows = []
        for i, ln in enumerate(lines[1:], start=2):
            try:
                row = [float(v) for v in ln.split()]
            except ValueError:
                raise FormatError(f"line {i}: non-numeric entry in {ln!r}") from None
            if len(row) != c:
                raise FormatError(f"line {i}: expected {c} values, got {len(row)}")
            rows.append(row)
        return cls(np.array(rows))


def load_cost_matrix(path) -> CostMatrix:
    return CostMatrix.loads(Path(path).read_text())


def save_cost_matrix(cm: CostMatrix, path) -> None:
    Path(path).write_text(cm.dumps())


def gwd_loss(pred: Tensor, targets, cost: CostMatrix, ignore_index: Optional[int] = None) -> Tensor:
    """Mean over scored pixels of ``sum_c M[t, c] * p[c]`` (one-hot Wasserstein cost)."""
    if not isinstance(cost, CostMatrix):
        cost = CostMatrix(cost)
    if cost.num_classes != pred.shape[-3]:
        raise ConfigError(f"cost matrix is {cost.num_classes}x{cost.num_classes} but predictions have "
                          f"{pred.shape[-3]} classes")
    keep, tk = _scored(pred, targets, ignore_index)
    rows = cost.M[tk].astype(pred.dtype)  # [M, C]
    p = _channels_last(pred.data)[keep]
    m = tk.size
    out = np.asarray((rows * p).sum() / m, dtype=pred.dtype)

    def bw(g):
        full = np.zeros(_channels_last(pred.data).shape, dtype=pred.dtype)
        full[keep] = rows * (float(g) / m)
        return (np.moveaxis(full, -1, -3),)

    return record("gwd_loss", out, (pred,), bw)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------
class ConfusionMatrix:
    """``counts[true, pred]`` tallies over scored pixels."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes):
            raise ConfigError(f"counts must be {num_classes}x{num_classes}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self):
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ConfigError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.num_classes}, total={self.total})"


def accumulate(conf: ConfusionMatrix, pred_labels, targets, ignore_index: Optional[int] = None) -> ConfusionMatrix:
    """Return a new matrix with one count per scored pixel added."""
    p = np.asarray(pred_labels).reshape(-1).astype(np.int64)
    t = np.asarray(targets).reshape(-1).astype(np.int64)
    if np.shape(pred_labels) != np.shape(targets):
        raise DataError(f"prediction shape {list(np.shape(pred_labels))} != target shape {list(np.shape(targets))}")
    if ignore_index is not None:
        keep = t != ignore_index
        p, t = p[keep], t[keep]
    c = conf.num_classes
    if t.size:
        bad_t = (t < 0) | (t >= c)
        bad_p = (p < 0) | (p >= c)
        if bad_t.any() or bad_p.any():
            raise DataError(f"labels outside [0, {c}) found in "
                            f"{'targets' if bad_t.any() else 'predictions'}")
    return ConfusionMatrix(c, conf.counts + kernels.confusion_tally(t, p, c))


def per_class_iou(conf: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN); classes with an empty union are NaN (absent)."""
    cm = conf.counts.astype(np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def per_class_accuracy(conf: ConfusionMatrix) -> np.ndarray:
    """Per-class recall; classes with no target pixels are NaN (absent)."""
    cm = conf.counts.astype(np.float64)
    row = cm.sum(axis=1)
    return np.where(row > 0, np.diag(cm) / np.where(row > 0, row, 1), np.nan)


def present(values: np.ndarray) -> np.ndarray:
    return ~np.isnan(values)


def macro_mean(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        raise DataError("no present classes to average")
    return float(v.mean())


def weighted_mean(values: Sequence[float], weights: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    ok = ~np.isnan(v)
    if not ok.any():
        raise DataError("no present classes to average")
    return float((v[ok] * w[ok]).sum())


def miou(conf: ConfusionMatrix, mode: str = "macro") -> float:
    """Mean IoU: ``macro`` over present classes, or weighted by target-pixel share."""
    iou = per_class_iou(conf)
    if mode == "macro":
        return macro_mean(iou)
    if mode == "frequency_weighted":
        rows = conf.counts.sum(axis=1).astype(np.float64)
        if rows.sum() == 0:
            raise DataError("no present classes to average")
        return weighted_mean(iou, rows / rows.sum())
    raise ConfigError(f"mode must be 'macro' or 'frequency_weighted', got {mode!r}")

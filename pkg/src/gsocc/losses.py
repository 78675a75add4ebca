"""Occupancy supervision losses and IoU metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .splatting import OccupancyGrid


def _flatten(pred: OccupancyGrid, gt: OccupancyGrid) -> tuple[np.ndarray, np.ndarray]:
    if pred.grid != gt.grid:
        raise ValueError("prediction and ground truth grids differ")
    if pred.is_labels or not gt.is_labels:
        raise ValueError("expected logits prediction and label ground truth")
    if pred.n_classes != gt.n_classes:
        raise ValueError("class counts differ")
    return np.asarray(pred.values, float).reshape(-1, pred.n_classes), gt.labels().ravel()


def cross_entropy_flat(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean ``-log softmax(logits)[label]`` over rows and its gradient."""
    n = len(labels)
    logp = log_softmax(logits, axis=1)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def cross_entropy(pred: OccupancyGrid, gt: OccupancyGrid) -> tuple[float, np.ndarray]:
    logits, labels = _flatten(pred, gt)
    loss, grad = cross_entropy_flat(logits, labels)
    return loss, grad.reshape(np.shape(pred.values))


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss at sorted errors."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_flat(probs: np.ndarray, labels: np.ndarray,
                        classes: str | Sequence[int] = "present") -> tuple[float, np.ndarray]:
    """Lovasz-softmax on probabilities; returns loss and gradient w.r.t. ``probs``.

    Errors are sorted descending with ties broken by row index (stable sort).
    """
    n, n_classes = probs.shape
    if classes == "present":
        considered = [c for c in range(n_classes) if np.any(labels == c)]
    elif classes == "all":
        considered = list(range(n_classes))
    else:
        considered = list(classes)
    grad = np.zeros_like(probs)
    if not considered:
        return 0.0, grad
    total = 0.0
    for c in considered:
        fg = (labels == c).astype(float)
        diff = fg - probs[:, c]
        errors = np.abs(diff)
        perm = np.argsort(-errors, kind="stable")
        g = lovasz_grad(fg[perm])
        total += float(errors[perm] @ g)
        # d|fg - p|/dp = -sign(fg - p); at zero error take the fg side
        sign = np.where(diff > 0, -1.0, np.where(diff < 0, 1.0, np.where(fg > 0, -1.0, 1.0)))
        grad[perm, c] += g * sign[perm]
    k = len(considered)
    return total / k, grad / k


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=1, keepdims=True))


def lovasz_softmax(pred: OccupancyGrid, gt: OccupancyGrid,
                   classes: str | Sequence[int] = "present") -> tuple[float, np.ndarray]:
    """Lovasz-softmax loss of a logits grid and its gradient w.r.t. the logits."""
    logits, labels = _flatten(pred, gt)
    probs = softmax(logits, axis=1)
    loss, gp = lovasz_softmax_flat(probs, labels, classes)
    return loss, softmax_backward(probs, gp).reshape(np.shape(pred.values))


def total_loss(pred: OccupancyGrid, gt: OccupancyGrid, lam: float = 1.0):
    """``L_ce + lam * L_lovasz``; returns (ce, lovasz, total, gradient)."""
    ce, g_ce = cross_entropy(pred, gt)
    lov, g_lov = lovasz_softmax(pred, gt)
    return ce, lov, ce + lam * lov, g_ce + lam * g_lov


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    empty_index: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    @property
    def n_evaluated(self) -> int:
        return int(np.sum(self.tp + self.fn))


def confusion(pred_labels, gt_labels, n_classes: int, empty_index: int = 0,
              mask=None) -> ConfusionCounts:
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"shape mismatch: {pred_labels.shape} vs {gt_labels.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt_labels.shape:
            raise ValueError("mask shape mismatch")
        pred_labels, gt_labels = pred_labels[mask], gt_labels[mask]
    p = pred_labels.ravel().astype(np.int64)
    g = gt_labels.ravel().astype(np.int64)
    table = np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(table).copy()
    fp = table.sum(axis=0) - tp
    fn = table.sum(axis=1) - tp
    return ConfusionCounts(tp, fp, fn, empty_index)


@dataclass(frozen=True)
class IoUResult:
    iou: float
    miou: float
    per_class: np.ndarray  # NaN where the class is absent from both pred and gt


def iou_miou(counts: ConfusionCounts) -> IoUResult:
    """Geometry IoU (occupied vs empty) and mIoU over non-empty classes.

    Undefined ratios (0/0) are NaN and excluded from the mIoU mean; an mIoU with
    no defined class is NaN as well.
    """
    e = counts.empty_index
    denom = counts.tp + counts.fp + counts.fn
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(denom > 0, counts.tp / np.maximum(denom, 1), np.nan)
    # geometry: FN of the empty class are predicted-occupied empties, and vice versa
    n = counts.n_evaluated
    geo_fp = counts.fn[e]
    geo_fn = counts.fp[e]
    geo_tp = n - counts.tp[e] - geo_fp - geo_fn
    geo_den = geo_tp + geo_fp + geo_fn
    iou = geo_tp / geo_den if geo_den > 0 else float("nan")
    non_empty = np.array([c for c in range(counts.n_classes) if c != e], dtype=int)
    defined = per_class[non_empty][~np.isnan(per_class[non_empty])]
    miou = float(defined.mean()) if len(defined) else float("nan")
    return IoUResult(float(iou), miou, per_class)


def evaluate(pred: OccupancyGrid, gt: OccupancyGrid, empty_index: int = 0, mask=None) -> IoUResult:
    if pred.grid != gt.grid:
        raise ValueError("prediction and ground truth grids differ")
    return iou_miou(confusion(pred.labels(), gt.labels(), gt.n_classes, empty_index, mask))


def write_metrics_csv(path, result: IoUResult, class_names: Sequence[str], empty_index: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "IoU"])
        for c, name in enumerate(class_names):
            if c == empty_index:
                continue
            writer.writerow([name, _fmt(result.per_class[c])])
        writer.writerow(["IoU", _fmt(result.iou)])
        writer.writerow(["mIoU", _fmt(result.miou)])


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.6f}"


class TraceWriter:
    """Plain-text training trace: iteration, L_ce, L_lov, total (plus optional metrics)."""

    header = ("iteration", "L_ce", "L_lov", "total", "iou", "miou")

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.header)

    def log(self, iteration: int, ce: float, lov: float, total: float,
            iou: float = float("nan"), miou: float = float("nan")) -> None:
        self._writer.writerow([iteration, f"{ce:.9g}", f"{lov:.9g}", f"{total:.9g}",
                               _fmt(iou), _fmt(miou)])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

"""Segmentation and classification metrics."""

from __future__ import annotations

from typing import Iterable

import numpy as np


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_labels: int) -> np.ndarray:
    """Counts indexed [gt, pred]."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction extent {pred.shape} != ground-truth extent {gt.shape}")
    p = pred.ravel().astype(np.int64)
    g = gt.ravel().astype(np.int64)
    if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= num_labels):
        raise ValueError(f"labels must lie in 0..{num_labels - 1}")
    return np.bincount(g * num_labels + p, minlength=num_labels * num_labels).reshape(num_labels, num_labels)


def iou_from_confusion(conf: np.ndarray) -> tuple[float, np.ndarray]:
    """(mIoU, per-class IoU); classes with an empty union get NaN and are left out of the mean."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    iou = np.full(conf.shape[0], np.nan)
    ok = union > 0
    iou[ok] = inter[ok] / union[ok]
    miou = float(iou[ok].mean()) if ok.any() else float("nan")
    return miou, iou


def mean_iou(
    pred: np.ndarray | Iterable[np.ndarray], gt: np.ndarray | Iterable[np.ndarray], num_labels: int
) -> tuple[float, np.ndarray]:
    """mIoU over a split from one global confusion matrix (background included)."""
    if isinstance(pred, np.ndarray) and isinstance(gt, np.ndarray):
        conf = confusion_matrix(pred, gt, num_labels)
    else:
        conf = np.zeros((num_labels, num_labels), dtype=np.int64)
        pred, gt = list(pred), list(gt)
        if len(pred) != len(gt):
            raise ValueError(f"{len(pred)} predictions vs {len(gt)} ground-truth maps")
        for p, g in zip(pred, gt):
            conf += confusion_matrix(p, g, num_labels)
    return iou_from_confusion(conf)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def classification_accuracy(logits, targets, threshold: float = 0.5, mode: str = "per_class") -> float:
    """Multi-label accuracy of ``sigmoid(logit) > threshold``.

    ``per_class`` averages exact matches over samples x classes; ``subset``
    counts a sample correct only when every class matches.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred = _sigmoid(np.asarray(logits, dtype=np.float64)) > threshold
    hit = pred == (np.asarray(targets) > 0.5)
    if mode == "per_class":
        return float(hit.mean())
    if mode == "subset":
        return float(hit.all(axis=1).mean())
    raise ValueError(f"unknown accuracy mode {mode!r}")

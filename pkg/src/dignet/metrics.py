"""Confusion-matrix segmentation metrics: mIoU, pixel accuracy, mean accuracy."""

import numpy as np

from .tensor import IGNORE_INDEX


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def metrics_update(cm: np.ndarray, pred, truth, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Return ``cm`` plus one count per non-ignored pixel (rows truth, cols prediction)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    k = cm.shape[0]
    keep = truth != ignore_index
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"truth label outside [0, {k})")
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ValueError(f"predicted label outside [0, {k})")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return cm + counts


def _check(cm: np.ndarray) -> None:
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU, NaN where the class has empty union."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(cm: np.ndarray) -> float:
    _check(cm)
    return float(np.nanmean(iou_per_class(cm)))


def pixel_acc(cm: np.ndarray) -> float:
    _check(cm)
    return float(np.trace(cm) / cm.sum())


def mean_acc(cm: np.ndarray) -> float:
    _check(cm)
    support = cm.sum(axis=1)
    tp = np.diag(cm)
    present = support > 0
    return float(np.mean(tp[present] / support[present]))


def summarize(cm: np.ndarray) -> dict:
    return {"miou": miou(cm), "pacc": pixel_acc(cm), "macc": mean_acc(cm)}

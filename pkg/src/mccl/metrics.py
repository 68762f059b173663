from __future__ import annotations

import numpy as np

from .errors import ContractError


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction/ground-truth size mismatch: {pred.size} vs {gt.size}")
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def class_iou(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU from a confusion matrix (rows gt, cols pred); NaN where the union is empty."""
    inter = np.diag(cm).astype(float)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean IoU over the whole set; classes absent from both pred and gt are skipped."""
    iou = class_iou(confusion(pred, gt, num_classes))
    present = ~np.isnan(iou)
    return float(iou[present].mean()) if present.any() else float("nan")

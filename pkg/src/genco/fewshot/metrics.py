"""Accuracy, trial aggregation and mean IoU."""
from __future__ import annotations

from fractions import Fraction

import numpy as np


def predict(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    logits = np.asarray(logits)
    return np.argmax(logits, axis=-1)


def accuracy(preds, labels) -> float:
    """Fraction correct. ``preds`` may be class indices or a [N, C] logit array."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.ndim == labels.ndim + 1:
        preds = predict(preds)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in shape")
    return float(np.mean(preds == labels))


def aggregate_trials(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single trial)."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("no trial values to aggregate")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


def miou(pred_masks, gt_masks, n_classes: int, ignore: int = 255) -> tuple[list[float | None], float]:
    """Per-class IoU over non-ignored pixels and their mean.

    A class absent from both prediction and ground truth has no IoU (None)
    and is left out of the mean.
    """
    pred = np.asarray(pred_masks).astype(np.int64).ravel()
    gt = np.asarray(gt_masks).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {np.shape(pred_masks)} != ground truth {np.shape(gt_masks)}")
    valid = gt != ignore
    bad_gt = valid & ((gt < 0) | (gt >= n_classes))
    if bad_gt.any():
        raise ValueError(f"ground truth holds class {int(gt[bad_gt][0])} outside 0..{n_classes - 1}")
    if not valid.any():
        raise ValueError("no valid pixels")
    pred, gt = pred[valid], gt[valid]
    if ((pred < 0) | (pred >= n_classes)).any():
        bad = pred[(pred < 0) | (pred >= n_classes)][0]
        raise ValueError(f"prediction holds class {int(bad)} outside 0..{n_classes - 1}")
    conf = np.bincount(n_classes * gt + pred, minlength=n_classes ** 2).reshape(n_classes, n_classes)
    tp = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - tp
    # exact rationals from integer counts, rounded once
    exact = [Fraction(int(tp[c]), int(union[c])) for c in range(n_classes) if union[c]]
    per_class = [float(Fraction(int(tp[c]), int(union[c]))) if union[c] else None for c in range(n_classes)]
    return per_class, float(sum(exact) / len(exact))

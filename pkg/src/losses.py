from __future__ import annotations

from typing import Tuple

import numpy as np
from scipy.special import expit

from .errors import DataError


DEFAULT_SMOOTH = 1e-6


def _check(pred: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DataError(f"Prediction shape {pred.shape} does not match target shape {target.shape}")
    return pred.astype(np.float64, copy=False), target.astype(np.float64, copy=False)


def dice_loss(pred: np.ndarray, target: np.ndarray, eps: float = DEFAULT_SMOOTH) -> float:
    """1 - (2*sum(y*p) + eps) / (sum(y) + sum(p) + eps), pooled over every pixel of the batch."""
    p, y = _check(pred, target)
    inter = float(np.sum(y * p))
    total = float(np.sum(y) + np.sum(p))
    if total + eps == 0.0:
        return 0.0
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def dice_loss_grad(pred: np.ndarray, target: np.ndarray, eps: float = DEFAULT_SMOOTH) -> Tuple[float, np.ndarray]:
    """Loss and d(loss)/d(pred), the latter in pred's dtype."""
    dtype = np.asarray(pred).dtype
    p, y = _check(pred, target)
    inter = float(np.sum(y * p))
    denom = float(np.sum(y) + np.sum(p)) + eps
    if denom == 0.0:
        return 0.0, np.zeros_like(p, dtype=dtype)
    numer = 2.0 * inter + eps
    grad = -(2.0 * y * denom - numer) / (denom * denom)
    return 1.0 - numer / denom, grad.astype(dtype if dtype.kind == "f" else np.float64)


def dice_loss_from_logits(logits: np.ndarray, target: np.ndarray, eps: float = DEFAULT_SMOOTH) -> Tuple[float, np.ndarray]:
    """Dice loss of sigmoid(logits) and its gradient with respect to the logits."""
    dtype = np.asarray(logits).dtype
    probs = expit(np.asarray(logits, dtype=np.float64))
    loss, dprob = dice_loss_grad(probs, target, eps)
    return loss, (dprob * probs * (1.0 - probs)).astype(dtype)

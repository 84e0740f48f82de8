"""Quantile (pinball) loss, its subgradient, and boosting pseudo-residuals."""
from __future__ import annotations

import numpy as np

PINBALL_ALPHA = 0.7  # penalize under-prediction 0.7, over-prediction 0.3


def _check(y_true, y_pred, alpha):
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie strictly inside (0, 1), got {alpha}")
    return y_true, y_pred


def pinball_loss(y_true, y_pred, alpha: float = PINBALL_ALPHA) -> float:
    """Mean pinball loss: max(alpha * r, (alpha - 1) * r) with r = y - yhat."""
    y_true, y_pred = _check(y_true, y_pred, alpha)
    r = y_true - y_pred
    return float(np.mean(np.maximum(alpha * r, (alpha - 1.0) * r)))


def pinball_grad(y_true, y_pred, alpha: float = PINBALL_ALPHA) -> np.ndarray:
    """Subgradient of the mean pinball loss with respect to the predictions.

    Elementwise: -alpha/n where the truth exceeds the prediction, (1-alpha)/n
    where it falls short, and 0 exactly at the kink.
    """
    y_true, y_pred = _check(y_true, y_pred, alpha)
    n = y_true.size
    r = y_true - y_pred
    grad = np.zeros_like(r)
    grad[r > 0] = -alpha / n
    grad[r < 0] = (1.0 - alpha) / n
    return grad


def boosting_residuals(y_true, y_pred, alpha: float = PINBALL_ALPHA) -> np.ndarray:
    """Per-sample negative subgradient, unscaled by n; the stage target for boosting.

    +alpha under the truth, -(1-alpha) above it, 0 at the kink. With a unit
    hessian the optimal leaf response is the mean of these values.
    """
    y_true, y_pred = _check(y_true, y_pred, alpha)
    r = y_true - y_pred
    out = np.zeros_like(r)
    out[r > 0] = alpha
    out[r < 0] = -(1.0 - alpha)
    return out

"""Regression losses returning ``(loss, grad_wrt_predictions)``."""

from __future__ import annotations

import numpy as np


def _pair(predictions, targets):
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("loss of an empty batch is undefined")
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions vs {t.size} targets")
    return p, t


def rmse_loss(predictions, targets):
    """Root-mean-squared error; the gradient at zero loss is taken as 0."""
    p, t = _pair(predictions, targets)
    diff = p - t
    loss = float(np.sqrt(np.mean(diff * diff)))
    if loss == 0.0:
        return 0.0, np.zeros_like(diff)
    return loss, diff / (diff.size * loss)


def mse_loss(predictions, targets):
    p, t = _pair(predictions, targets)
    diff = p - t
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


LOSSES = {"mse": mse_loss, "rmse": rmse_loss}

from __future__ import annotations

import numpy as np

from .config import BINARY_LOGISTIC, REGRESSION_L1, REGRESSION_L2


def sigmoid(raw: np.ndarray) -> np.ndarray:
    out = np.empty_like(raw, dtype=np.float64)
    pos = raw >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-raw[pos]))
    e = np.exp(raw[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def link(objective: str, raw: np.ndarray) -> np.ndarray:
    """Map raw ensemble output to the prediction scale of the objective."""
    if objective == BINARY_LOGISTIC:
        return sigmoid(raw)
    return raw


def compute_gradients(objective: str, predictions: np.ndarray, labels: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivatives of the loss w.r.t. the raw score.

    For the logistic objective ``predictions`` are probabilities.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if objective == BINARY_LOGISTIC:
        return p - y, p * (1.0 - p)
    if objective == REGRESSION_L2:
        return p - y, np.ones_like(p)
    if objective == REGRESSION_L1:
        return np.sign(p - y), np.ones_like(p)
    raise ValueError(f"unknown objective {objective!r}")


def loss(objective: str, raw: np.ndarray, labels: np.ndarray) -> float:
    """Mean training loss evaluated on raw scores."""
    y = np.asarray(labels, dtype=np.float64)
    if objective == BINARY_LOGISTIC:
        # log(1 + e^-z) for y=1, log(1 + e^z) for y=0, computed stably
        z = np.where(y > 0.5, raw, -raw)
        return float(np.mean(np.logaddexp(0.0, -z)))
    if objective == REGRESSION_L2:
        return float(np.mean((raw - y) ** 2))
    if objective == REGRESSION_L1:
        return float(np.mean(np.abs(raw - y)))
    raise ValueError(f"unknown objective {objective!r}")


def base_score(objective: str, labels: np.ndarray) -> float:
    y = np.asarray(labels, dtype=np.float64)
    if objective == BINARY_LOGISTIC:
        rate = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
        return float(np.log(rate / (1.0 - rate)))
    return float(y.mean())

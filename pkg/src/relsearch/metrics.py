"""Task metrics and cross-task aggregates."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import EmptyInput, KeyMismatch, NonpositiveBaseline, SingleClass


def _arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from tie-averaged rank sums."""
    s, y = _arrays(scores, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"AUROC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = pd.Series(s).rank(method="average").to_numpy()
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mae(predictions, labels) -> float:
    p, y = _arrays(predictions, labels)
    if p.size == 0:
        raise EmptyInput("MAE of zero examples")
    return float(np.mean(np.abs(p - y)))


@dataclass(frozen=True)
class MetricBundle:
    task_type: str
    values: dict

    @property
    def oriented_score(self) -> float:
        if self.task_type == "binary_classification":
            return self.values["auroc"]
        return -self.values["mae"]

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_dict(self) -> dict:
        return {**self.values, "oriented_score": self.oriented_score}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def render(self) -> str:
        return "\n".join(f"{k}: {v:.6f}" for k, v in self.to_dict().items())


def binary_bundle(scores, labels) -> MetricBundle:
    s, y = _arrays(scores, labels)
    area = auroc(s, y)
    pred = s >= 0.5
    truth = y == 1
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    acc = float((pred == truth).mean())
    return MetricBundle("binary_classification", {"auroc": area, "f1_at_half": float(f1), "accuracy_at_half": acc})


def regression_bundle(predictions, labels) -> MetricBundle:
    p, y = _arrays(predictions, labels)
    err = mae(p, y)
    return MetricBundle("regression", {"mae": err, "rmse": float(np.sqrt(np.mean((p - y) ** 2)))})


def bundle_for(task_type: str, scores, labels) -> MetricBundle:
    if task_type == "binary_classification":
        return binary_bundle(scores, labels)
    return regression_bundle(scores, labels)


def normalized_average(task_scores: Mapping[str, float], baseline_scores: Mapping[str, float]) -> float:
    """Mean over tasks of score / baseline."""
    if set(task_scores) != set(baseline_scores):
        raise KeyMismatch(f"task keys differ: {sorted(set(task_scores) ^ set(baseline_scores))}")
    if not task_scores:
        raise EmptyInput("no tasks to average")
    bad = [k for k, v in baseline_scores.items() if not v > 0]
    if bad:
        raise NonpositiveBaseline(f"baseline must be > 0 for {sorted(bad)}")
    return float(np.mean([task_scores[k] / baseline_scores[k] for k in sorted(task_scores)]))

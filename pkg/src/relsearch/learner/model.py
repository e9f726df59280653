"""Boosting loop, fitted models and prediction."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import DegenerateInput, SchemaMismatch, TrainingError, TransformDomain
from ..featprog import FeatureMatrix
from .config import BINARY_LOGISTIC, ResolvedConfig
from .objectives import base_score, compute_gradients, link, loss
from .tree import ColumnBinner, Tree, grow_tree

log = logging.getLogger(__name__)


@dataclass
class FittedModel:
    columns: list[str]  # canonical (sorted) training columns
    binners: list[ColumnBinner]
    trees: list[Tree]
    tree_weights: list[float]
    base_score: float
    objective: str
    log_transform: bool
    config: ResolvedConfig
    train_loss: list[float] = field(default_factory=list)
    train_predictions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for tree in self.trees:
            used = tree.feature[tree.feature >= 0]
            if len(used) and used.max() >= len(self.columns):
                raise ValueError("tree references a column outside the training schema")

    # -- prediction -------------------------------------------------------

    def _codes(self, X: FeatureMatrix) -> np.ndarray:
        extra = [c for c in X.columns if c not in set(self.columns)]
        if extra:
            log.warning("ignoring %d columns unknown to the model: %s", len(extra), extra[:5])
        n = X.n_rows
        codes = np.empty((n, len(self.columns)), dtype=np.uint8, order="F")
        for j, (name, binner) in enumerate(zip(self.columns, self.binners)):
            if name not in X.data:
                values = np.full(n, None, dtype=object) if binner.categorical else np.full(n, np.nan)
            else:
                values = X.data[name]
                is_text = values.dtype == object
                if is_text and not binner.categorical:
                    if any(v is not None for v in values):
                        raise SchemaMismatch(f"column {name} was numeric at training time but is categorical now")
                    values = np.full(n, np.nan)
                elif binner.categorical and not is_text:
                    if not np.isnan(values).all():
                        raise SchemaMismatch(f"column {name} was categorical at training time but is numeric now")
                    values = np.full(n, None, dtype=object)
            codes[:, j] = binner.transform(values)
        return codes

    def raw_from_codes(self, codes: np.ndarray) -> np.ndarray:
        raw = np.full(codes.shape[0], self.base_score, dtype=np.float64)
        for tree, w in zip(self.trees, self.tree_weights):
            raw += w * tree.apply_codes(codes)
        return raw

    def _finish(self, raw: np.ndarray) -> np.ndarray:
        out = link(self.objective, raw)
        if self.log_transform:
            out = np.expm1(out)
        return out

    def predict_raw(self, X: FeatureMatrix) -> np.ndarray:
        return self.raw_from_codes(self._codes(X))

    def predict(self, X: FeatureMatrix) -> np.ndarray:
        return self._finish(self.predict_raw(X))

    # -- inspection -------------------------------------------------------

    def feature_importance(self) -> dict[str, float]:
        totals = np.zeros(len(self.columns))
        for tree in self.trees:
            inner = tree.feature >= 0
            np.add.at(totals, tree.feature[inner], tree.gain[inner])
        s = totals.sum()
        if s > 0:
            totals = totals / s
        return {c: float(v) for c, v in zip(self.columns, totals)}

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": "relsearch-gbdt/1",
            "columns": self.columns,
            "binners": [b.to_dict() for b in self.binners],
            "trees": [t.to_dict() for t in self.trees],
            "tree_weights": self.tree_weights,
            "base_score": self.base_score,
            "objective": self.objective,
            "log_transform": self.log_transform,
            "config": self.config.to_dict(),
            "train_loss": self.train_loss,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FittedModel":
        return cls(
            columns=list(d["columns"]),
            binners=[ColumnBinner.from_dict(b) for b in d["binners"]],
            trees=[Tree.from_dict(t) for t in d["trees"]],
            tree_weights=[float(w) for w in d["tree_weights"]],
            base_score=float(d["base_score"]),
            objective=d["objective"],
            log_transform=bool(d["log_transform"]),
            config=ResolvedConfig.from_dict(d["config"]),
            train_loss=list(d.get("train_loss", [])),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "FittedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _prepare_labels(y: np.ndarray, cfg: ResolvedConfig) -> np.ndarray:
    try:
        y = np.asarray(y, dtype=np.float64)
    except (TypeError, ValueError):
        raise TrainingError("labels must be numeric") from None
    if not np.isfinite(y).all():
        raise TrainingError("labels contain NaN or infinite values")
    if cfg.objective == BINARY_LOGISTIC and not np.isin(y, (0.0, 1.0)).all():
        raise TrainingError("binary classification labels must be 0 or 1")
    if cfg.log_transform_target:
        if (y <= -1).any():
            raise TransformDomain("log_transform_target requires every label > -1")
        y = np.log1p(y)
    return y


def fit(X: FeatureMatrix, y: np.ndarray, cfg: ResolvedConfig, *, n_jobs: int = 1) -> FittedModel:
    if X.n_rows == 0 or X.n_cols == 0:
        raise DegenerateInput(f"cannot fit on a {X.n_rows}x{X.n_cols} matrix")
    if len(y) != X.n_rows:
        raise DegenerateInput(f"{len(y)} labels for {X.n_rows} rows")
    yt = _prepare_labels(y, cfg)
    n = X.n_rows
    columns = sorted(X.columns)
    cats = set(X.categoricals) | set(cfg.categorical_features)
    binners = []
    for name in columns:
        values = X.data[name]
        is_cat = name in cats
        if is_cat and values.dtype != object:
            values = np.array([None if np.isnan(v) else repr(float(v)) for v in values], dtype=object)
        elif not is_cat and not np.isfinite(values[~np.isnan(values)]).all():
            raise TrainingError(f"column {name} contains infinite values")
        binners.append(ColumnBinner.fit(name, values, is_cat))
    codes = np.empty((n, len(columns)), dtype=np.uint8, order="F")
    for j, name in enumerate(columns):
        values = X.data[name]
        if binners[j].categorical and values.dtype != object:
            values = np.array([None if np.isnan(v) else repr(float(v)) for v in values], dtype=object)
        codes[:, j] = binners[j].transform(values)

    rng = np.random.default_rng(cfg.seed)
    base = base_score(cfg.objective, yt)
    d = len(columns)
    ones = np.ones(n)
    raw = np.full(n, base)
    trees: list[Tree] = []
    weights: list[float] = []
    outputs: list[np.ndarray] = []  # unweighted per-tree training outputs (dart)
    history: list[float] = []
    grow_kw = dict(max_depth=cfg.max_depth, min_child_samples=cfg.min_child_samples,
                   lambda_l1=cfg.lambda_l1, lambda_l2=cfg.lambda_l2, n_jobs=n_jobs)
    variant = cfg.variant
    if variant == "rf":
        g0, h0 = compute_gradients(cfg.objective, link(cfg.objective, raw), yt)
        rf_sum = np.zeros(n)

    executor = ThreadPoolExecutor(max_workers=n_jobs) if n_jobs > 1 else None
    try:
        for it in range(cfg.n_estimators):
            if variant == "dart":
                dropped = np.flatnonzero(rng.random(len(trees)) < cfg.dart_dropout_rate) if trees else np.empty(0, int)
                base_raw = raw.copy()
                for i in dropped:
                    base_raw -= weights[i] * outputs[i]
            else:
                dropped = np.empty(0, int)
                base_raw = raw

            counts = ones
            if variant == "rf":
                size = max(1, int(round(cfg.subsample * n)))
                counts = np.bincount(rng.integers(0, n, size), minlength=n).astype(np.float64)
                rows = np.flatnonzero(counts > 0)
                g, h = g0 * counts, h0 * counts
            else:
                g, h = compute_gradients(cfg.objective, link(cfg.objective, base_raw), yt)
                if variant == "goss":
                    top_n = int(cfg.goss_top_fraction * n)
                    other_n = int(cfg.goss_other_fraction * n)
                    order = np.argsort(-np.abs(g), kind="stable")
                    rest = order[top_n:]
                    picked = rng.choice(rest, size=min(other_n, len(rest)), replace=False) if other_n else rest[:0]
                    amp = (1.0 - cfg.goss_top_fraction) / cfg.goss_other_fraction
                    scale = np.zeros(n)
                    scale[order[:top_n]] = 1.0
                    scale[picked] = amp
                    rows = np.sort(np.concatenate([order[:top_n], picked]))
                    g, h = g * scale, h * scale
                    counts = (scale > 0).astype(np.float64)
                elif cfg.subsample < 1.0:
                    size = max(1, int(round(cfg.subsample * n)))
                    rows = np.sort(rng.choice(n, size=size, replace=False))
                else:
                    rows = np.arange(n)

            k = max(1, int(round(cfg.colsample_bytree * d)))
            feats = np.sort(rng.choice(d, size=k, replace=False)) if k < d else np.arange(d)

            tree = grow_tree(codes, g, h, counts, rows, feats, binners, executor=executor, **grow_kw)
            out = tree.apply_codes(codes)
            trees.append(tree)

            if variant == "rf":
                weights.append(1.0)
                rf_sum += out
                raw = base + rf_sum / len(trees)
            elif variant == "dart":
                kd = len(dropped)
                if kd == 0:
                    w_new = cfg.learning_rate
                elif cfg.dart_xgb_normalization:
                    w_new = cfg.learning_rate / (kd + cfg.learning_rate)
                    factor = kd / (kd + cfg.learning_rate)
                else:
                    w_new = cfg.learning_rate / (kd + 1.0)
                    factor = kd / (kd + 1.0)
                raw = base_raw
                for i in dropped:
                    weights[i] *= factor
                    raw = raw + weights[i] * outputs[i]
                weights.append(w_new)
                outputs.append(out)
                raw = raw + w_new * out
            else:
                weights.append(cfg.learning_rate)
                raw = raw + cfg.learning_rate * out

            if not np.isfinite(raw).all():
                raise TrainingError(f"non-finite training scores at iteration {it}")
            history.append(loss(cfg.objective, raw, yt))
    finally:
        if executor is not None:
            executor.shutdown()

    if variant == "rf":
        weights = [1.0 / len(trees)] * len(trees)
    model = FittedModel(columns, binners, trees, weights, base, cfg.objective,
                        cfg.log_transform_target, cfg, history)
    model.train_predictions = model._finish(model.raw_from_codes(codes))
    return model


def predict(model: FittedModel, X: FeatureMatrix) -> np.ndarray:
    return model.predict(X)


def feature_importance(model: FittedModel) -> dict[str, float]:
    return model.feature_importance()

"""Model menu and hyperparameter resolution.

Every learner choice maps onto the one native boosting engine; the choice
only selects variant flags (bagging, dropout, one-side sampling) and which
alias keys are understood.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping

from ..errors import ObjectiveMismatch

log = logging.getLogger(__name__)

MODEL_CHOICES = ("gbdt", "rf", "dart", "goss", "xgboost", "xgb_dart", "catboost")

BINARY_LOGISTIC = "binary_logistic"
REGRESSION_L1 = "regression_l1"
REGRESSION_L2 = "regression_l2"
OBJECTIVES = (BINARY_LOGISTIC, REGRESSION_L1, REGRESSION_L2)

# key -> (lower, upper, is_int)
BOUNDS: dict[str, tuple[float, float, bool]] = {
    "n_estimators": (50, 500, True),
    "learning_rate": (0.01, 0.3, False),
    "max_depth": (2, 10, True),
    "min_child_samples": (1, 100, True),
    "subsample": (0.5, 1.0, False),
    "colsample_bytree": (0.5, 1.0, False),
    "lambda_l1": (0.0, 10.0, False),
    "lambda_l2": (0.0, 10.0, False),
}

# alias -> (canonical key, alias bounds)
ALIASES: dict[str, tuple[str, tuple[float, float, bool]]] = {
    "min_child_weight": ("min_child_samples", (1, 100, True)),
    "reg_alpha": ("lambda_l1", (0.0, 10.0, False)),
    "reg_lambda": ("lambda_l2", (0.0, 10.0, False)),
    "l2_leaf_reg": ("lambda_l2", (0.1, 10.0, False)),
}

DEFAULTS: dict[str, Any] = {
    "n_estimators": 200,
    "learning_rate": 0.05,
    "max_depth": 6,
    "min_child_samples": 20,
    "subsample": 1.0,
    "colsample_bytree": 1.0,
    "lambda_l1": 0.0,
    "lambda_l2": 0.0,
}

DART_DROPOUT_RATE = 0.1
GOSS_TOP_FRACTION = 0.2
GOSS_OTHER_FRACTION = 0.1

_OBJECTIVE_NAMES = {
    "binary": BINARY_LOGISTIC, "binary_logistic": BINARY_LOGISTIC, "binary:logistic": BINARY_LOGISTIC,
    "logloss": BINARY_LOGISTIC, "cross_entropy": BINARY_LOGISTIC, "logistic": BINARY_LOGISTIC,
    "regression_l1": REGRESSION_L1, "l1": REGRESSION_L1, "mae": REGRESSION_L1,
    "reg:absoluteerror": REGRESSION_L1,
    "regression_l2": REGRESSION_L2, "regression": REGRESSION_L2, "l2": REGRESSION_L2, "mse": REGRESSION_L2,
    "rmse": REGRESSION_L2, "reg:squarederror": REGRESSION_L2,
}
_HUBER_NAMES = {"huber", "reg:pseudohubererror", "pseudohuber"}


@dataclass(frozen=True)
class ResolvedConfig:
    model_choice: str
    n_estimators: int
    learning_rate: float
    max_depth: int
    min_child_samples: int
    subsample: float
    colsample_bytree: float
    lambda_l1: float
    lambda_l2: float
    objective: str
    log_transform_target: bool = False
    categorical_features: tuple[str, ...] = ()
    rf_bagging: bool = False
    dart_dropout_rate: float = 0.0
    dart_xgb_normalization: bool = False
    goss_top_fraction: float = 0.0
    goss_other_fraction: float = 0.0
    seed: int = 0
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def variant(self) -> str:
        if self.rf_bagging:
            return "rf"
        if self.dart_dropout_rate > 0:
            return "dart"
        if self.goss_top_fraction > 0:
            return "goss"
        return "gbdt"

    def as_raw(self) -> dict[str, Any]:
        """The user-facing keys; feeding this back to resolve_config is a no-op."""
        raw = {k: getattr(self, k) for k in BOUNDS}
        raw["objective"] = self.objective
        raw["log_transform_target"] = self.log_transform_target
        if self.categorical_features:
            raw["categorical_features"] = list(self.categorical_features)
        return raw

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["categorical_features"] = list(self.categorical_features)
        d["warnings"] = list(self.warnings)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ResolvedConfig":
        d = dict(data)
        d["categorical_features"] = tuple(d.get("categorical_features", ()))
        d["warnings"] = tuple(d.get("warnings", ()))
        return cls(**d)

    def render(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in self.as_raw().items())


def _clamp(key: str, value: Any, bounds: tuple[float, float, bool], warnings: list[str]) -> float | int | None:
    lo, hi, is_int = bounds
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        warnings.append(f"{key}: non-numeric value {value!r} ignored, default used")
        return None
    clamped = min(max(value, lo), hi)
    if clamped != value:
        warnings.append(f"{key}: {value!r} clamped to {clamped!r}")
    if is_int:
        return int(round(clamped))
    return float(clamped)


def _resolve_objective(value: Any, task_type: str, warnings: list[str]) -> str:
    is_clf = task_type == "binary_classification"
    if value is None:
        return BINARY_LOGISTIC if is_clf else REGRESSION_L1
    name = str(value).strip().lower()
    if name in _HUBER_NAMES:
        warnings.append(f"objective {value!r} is not supported natively; using {REGRESSION_L1}")
        obj = REGRESSION_L1
    elif name in _OBJECTIVE_NAMES:
        obj = _OBJECTIVE_NAMES[name]
    else:
        raise ObjectiveMismatch(f"unknown objective {value!r}")
    if is_clf and obj != BINARY_LOGISTIC:
        raise ObjectiveMismatch(f"objective {value!r} is a regression objective but the task is classification")
    if not is_clf and obj == BINARY_LOGISTIC:
        raise ObjectiveMismatch(f"objective {value!r} is a classification objective but the task is regression")
    return obj


def resolve_config(choice: str, raw: Mapping[str, Any] | str | None, task_type: str,
                   seed: int = 0) -> ResolvedConfig:
    if choice not in MODEL_CHOICES:
        raise ValueError(f"unknown model_choice {choice!r}; expected one of {', '.join(MODEL_CHOICES)}")
    if raw is None or raw == "":
        raw = {}
    if isinstance(raw, str):
        raw = json.loads(raw)
    if not isinstance(raw, Mapping):
        raise ValueError("model config must be a JSON object")
    warnings: list[str] = []
    values = dict(DEFAULTS)
    explicit: set[str] = set()
    for key, value in raw.items():
        if key in BOUNDS:
            v = _clamp(key, value, BOUNDS[key], warnings)
            if v is not None:
                values[key] = v
                explicit.add(key)
    for key, value in raw.items():
        if key in ALIASES:
            canon, bounds = ALIASES[key]
            if canon in explicit:
                warnings.append(f"{key} ignored because {canon} was also given")
                continue
            v = _clamp(key, value, bounds, warnings)
            if v is not None:
                values[canon] = v
                explicit.add(canon)
    known = set(BOUNDS) | set(ALIASES) | {"objective", "log_transform_target", "categorical_features"}
    for key in raw:
        if key not in known:
            warnings.append(f"unknown key {key} ignored")
    objective = _resolve_objective(raw.get("objective"), task_type, warnings)
    log_t = raw.get("log_transform_target", False)
    if not isinstance(log_t, bool):
        warnings.append(f"log_transform_target: non-boolean {log_t!r} ignored")
        log_t = False
    if log_t and task_type == "binary_classification":
        warnings.append("log_transform_target ignored for classification")
        log_t = False
    cats = raw.get("categorical_features", ())
    if isinstance(cats, str):
        cats = [cats]
    if not isinstance(cats, (list, tuple)) or not all(isinstance(c, str) for c in cats):
        warnings.append("categorical_features must be a list of column names; ignored")
        cats = ()
    cfg = ResolvedConfig(
        model_choice=choice,
        objective=objective,
        log_transform_target=log_t,
        categorical_features=tuple(sorted(set(cats))),
        rf_bagging=choice == "rf",
        dart_dropout_rate=DART_DROPOUT_RATE if choice in ("dart", "xgb_dart") else 0.0,
        dart_xgb_normalization=choice == "xgb_dart",
        goss_top_fraction=GOSS_TOP_FRACTION if choice == "goss" else 0.0,
        goss_other_fraction=GOSS_OTHER_FRACTION if choice == "goss" else 0.0,
        seed=int(seed),
        warnings=tuple(warnings),
        **values,
    )
    for w in warnings:
        log.info("config: %s", w)
    return cfg


def with_seed(cfg: ResolvedConfig, seed: int) -> ResolvedConfig:
    return replace(cfg, seed=int(seed))

from __future__ import annotations

import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relsearch.errors import DegenerateInput, ObjectiveMismatch, SchemaMismatch, TransformDomain, TrainingError
from relsearch.featprog import FeatureMatrix
from relsearch.learner import (
    BINARY_LOGISTIC,
    BOUNDS,
    MODEL_CHOICES,
    REGRESSION_L1,
    REGRESSION_L2,
    FittedModel,
    compute_gradients,
    feature_importance,
    fit,
    predict,
    resolve_config,
)
from relsearch.learner.config import ALIASES
from relsearch.learner.objectives import loss
from relsearch.metrics import auroc

CLS = "binary_classification"
REG = "regression"


def cfg(choice="gbdt", task=CLS, seed=0, **raw):
    return resolve_config(choice, raw, task, seed=seed)


def toy_classification(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    cat = rng.choice(["a", "b", "c"], size=n)
    logit = 1.5 * x1 - x2 + (cat == "b") * 1.0
    y = (rng.random(n) < 1 / (1 + np.exp(-logit))).astype(float)
    x2[rng.random(n) < 0.1] = np.nan
    X = FeatureMatrix.from_columns({"f__x1": x1, "f__x2": list(x2), "f__cat": list(cat)}, categoricals=["f__cat"])
    return X, y


# --- config resolution -----------------------------------------------------------

def test_learning_rate_clamped():
    assert cfg(learning_rate=0.5).learning_rate == 0.3


def test_catboost_l2_leaf_reg_alias():
    c = cfg("catboost", l2_leaf_reg=3.0)
    assert c.lambda_l2 == 3.0


def test_unknown_key_warned(caplog):
    with caplog.at_level(logging.INFO, logger="relsearch.learner.config"):
        c = cfg(max_depth=15, foo=1)
    assert c.max_depth == 10
    assert any("unknown key foo" in w for w in c.warnings)
    assert "unknown key foo" in caplog.text


def test_defaults():
    c = cfg()
    assert (c.n_estimators, c.learning_rate, c.max_depth, c.min_child_samples) == (200, 0.05, 6, 20)
    assert (c.subsample, c.colsample_bytree, c.lambda_l1, c.lambda_l2) == (1.0, 1.0, 0.0, 0.0)
    assert c.objective == BINARY_LOGISTIC
    assert cfg(task=REG).objective == REGRESSION_L1


def test_variant_flags():
    assert cfg("rf").rf_bagging
    assert cfg("dart").dart_dropout_rate == 0.1 and not cfg("dart").dart_xgb_normalization
    assert cfg("xgb_dart").dart_dropout_rate == 0.1 and cfg("xgb_dart").dart_xgb_normalization
    g = cfg("goss")
    assert (g.goss_top_fraction, g.goss_other_fraction) == (0.2, 0.1)
    for plain in ("gbdt", "xgboost", "catboost"):
        assert cfg(plain).variant == "gbdt"


def test_aliases_translate():
    c = cfg("xgboost", min_child_weight=7.4, reg_alpha=2.0, reg_lambda=3.0)
    assert (c.min_child_samples, c.lambda_l1, c.lambda_l2) == (7, 2.0, 3.0)


@pytest.mark.parametrize("name", ["huber", "reg:pseudohubererror"])
def test_huber_maps_to_l1(name):
    c = cfg(task=REG, objective=name)
    assert c.objective == REGRESSION_L1 and c.warnings


@pytest.mark.parametrize("name,expected", [("regression_l2", REGRESSION_L2), ("reg:squarederror", REGRESSION_L2),
                                           ("reg:absoluteerror", REGRESSION_L1)])
def test_regression_objective_names(name, expected):
    assert cfg(task=REG, objective=name).objective == expected


def test_objective_mismatch():
    with pytest.raises(ObjectiveMismatch):
        cfg(task=CLS, objective="regression_l2")
    with pytest.raises(ObjectiveMismatch):
        cfg(task=REG, objective="binary")


def test_unknown_model_choice():
    with pytest.raises(ValueError):
        resolve_config("lightgbm", {}, CLS)


_raw_values = st.one_of(st.integers(-1000, 1000), st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=200)
@given(raw=st.dictionaries(st.sampled_from(sorted(BOUNDS) + sorted(ALIASES)), _raw_values, max_size=6),
       choice=st.sampled_from(MODEL_CHOICES))
def test_resolution_idempotent_and_bounded(raw, choice):
    once = resolve_config(choice, raw, CLS)
    twice = resolve_config(choice, once.as_raw(), CLS)
    assert once == twice
    for key, (lo, hi, _) in BOUNDS.items():
        assert lo <= getattr(once, key) <= hi


# --- gradients -----------------------------------------------------------------------

def test_gradient_examples():
    g, h = compute_gradients(BINARY_LOGISTIC, np.array([0.7]), np.array([1.0]))
    assert g[0] == pytest.approx(-0.3, abs=1e-15) and h[0] == pytest.approx(0.21, abs=1e-15)
    g, h = compute_gradients(REGRESSION_L2, np.array([2.0]), np.array([5.0]))
    assert (g[0], h[0]) == (-3.0, 1.0)
    g, _ = compute_gradients(REGRESSION_L1, np.array([4.0]), np.array([4.0]))
    assert g[0] == 0.0


def test_logistic_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    z = rng.normal(scale=2.0, size=20)
    y = rng.integers(0, 2, size=20).astype(float)
    eps = 1e-4

    def point_loss(zz, yy):
        return loss(BINARY_LOGISTIC, np.array([zz]), np.array([yy]))

    p = 1 / (1 + np.exp(-z))
    g, h = compute_gradients(BINARY_LOGISTIC, p, y)
    for i in range(20):
        num_g = (point_loss(z[i] + eps, y[i]) - point_loss(z[i] - eps, y[i])) / (2 * eps)
        num_h = (point_loss(z[i] + eps, y[i]) - 2 * point_loss(z[i], y[i]) + point_loss(z[i] - eps, y[i])) / eps**2
        assert abs(num_g - g[i]) < 1e-6
        assert abs(num_h - h[i]) < 1e-6


# --- fitting -------------------------------------------------------------------------

def test_constant_target_regression():
    X = FeatureMatrix.from_columns({"a": np.arange(50.0)})
    y = np.full(50, 3.25)
    model = fit(X, y, cfg(task=REG, objective="regression_l2"))
    assert np.max(np.abs(model.predict(X) - 3.25)) <= 1e-9


def _best_threshold_auroc(x, y):
    """Exhaustive oracle: best AUROC of any rule 1[x > t]."""
    best = 0.0
    for t in np.unique(x):
        pred = (x > t).astype(float)
        pos, neg = pred[y == 1], pred[y == 0]
        pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        best = max(best, pairs / (len(pos) * len(neg)))
    return best


def test_step_function_separable():
    x = np.linspace(-3, 3, 120)
    y = (x > 0).astype(float)
    X = FeatureMatrix.from_columns({"x": x})
    model = fit(X, y, cfg(max_depth=2, n_estimators=100, min_child_samples=1))
    oracle = _best_threshold_auroc(x, y)
    assert oracle == 1.0
    assert auroc(model.predict(X), y) == oracle


def test_transform_domain():
    X = FeatureMatrix.from_columns({"a": [1.0, 2.0, 3.0]})
    with pytest.raises(TransformDomain):
        fit(X, np.array([1.0, -2.0, 3.0]), cfg(task=REG, log_transform_target=True))


def test_log_transform_zero_raw_maps_to_zero():
    X = FeatureMatrix.from_columns({"a": [1.0, 2.0, 3.0, 4.0]})
    model = fit(X, np.zeros(4), cfg(task=REG, log_transform_target=True, n_estimators=50))
    assert model.base_score == 0.0
    assert np.all(model.predict_raw(X) == 0.0)
    assert np.all(model.predict(X) == 0.0)


def test_log_transform_reports_original_scale():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 5, 300)
    y = np.exp(x) - 1
    X = FeatureMatrix.from_columns({"x": x})
    model = fit(X, y, cfg(task=REG, log_transform_target=True, objective="regression_l2", learning_rate=0.3))
    assert np.median(np.abs(model.predict(X) - y) / (y + 1)) < 0.1


def test_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        fit(FeatureMatrix.from_columns({"a": []}), np.array([]), cfg())
    with pytest.raises(DegenerateInput):
        fit(FeatureMatrix.from_columns({}), np.array([]), cfg())
    with pytest.raises(DegenerateInput):
        fit(FeatureMatrix.from_columns({"a": [1.0, 2.0]}), np.array([1.0]), cfg())


def test_bad_labels():
    X = FeatureMatrix.from_columns({"a": [1.0, 2.0]})
    with pytest.raises(TrainingError):
        fit(X, np.array([0.0, 2.0]), cfg())
    with pytest.raises(TrainingError):
        fit(X, np.array([0.0, np.nan]), cfg(task=REG))
    with pytest.raises(TrainingError):
        fit(FeatureMatrix.from_columns({"a": [1.0, np.inf]}), np.array([0.0, 1.0]), cfg())


@pytest.mark.parametrize("choice", MODEL_CHOICES)
def test_every_variant_learns(choice):
    X, y = toy_classification()
    model = fit(X, y, cfg(choice, n_estimators=60, seed=3))
    s = model.predict(X)
    assert np.all((s >= 0) & (s <= 1))
    assert auroc(s, y) > 0.8
    assert len(model.trees) <= model.config.n_estimators


@pytest.mark.parametrize("choice", ["gbdt", "rf", "dart", "goss"])
def test_regression_variants(choice):
    rng = np.random.default_rng(2)
    x = rng.uniform(-2, 2, 300)
    y = x**2 + rng.normal(scale=0.1, size=300)
    X = FeatureMatrix.from_columns({"x": x})
    model = fit(X, y, cfg(choice, task=REG, objective="regression_l2", n_estimators=80, learning_rate=0.2))
    assert np.mean(np.abs(model.predict(X) - y)) < 0.5


def test_train_predictions_bit_identical():
    X, y = toy_classification()
    model = fit(X, y, cfg(subsample=0.7, colsample_bytree=0.7, n_estimators=50))
    assert model.predict(X).tobytes() == model.train_predictions.tobytes()


def test_all_null_row_is_finite():
    X, y = toy_classification()
    model = fit(X, y, cfg(n_estimators=50))
    nulls = FeatureMatrix.from_columns({"f__x1": [None], "f__x2": [None], "f__cat": [None]}, categoricals=["f__cat"])
    assert np.isfinite(model.predict(nulls)).all()


def test_missing_training_column_treated_as_null():
    X, y = toy_classification()
    model = fit(X, y, cfg(n_estimators=50))
    partial = FeatureMatrix.from_columns({"f__x1": X.data["f__x1"]})
    full_null = FeatureMatrix.from_columns({"f__x1": X.data["f__x1"], "f__x2": [None] * X.n_rows,
                                            "f__cat": [None] * X.n_rows}, categoricals=["f__cat"])
    assert np.array_equal(model.predict(partial), model.predict(full_null))


def test_extra_column_ignored(caplog):
    X, y = toy_classification()
    model = fit(X, y, cfg(n_estimators=50))
    data = {c: X.data[c] for c in X.columns}
    data["g__extra"] = np.zeros(X.n_rows)
    extra = FeatureMatrix.from_columns(data, categoricals=["f__cat"])
    with caplog.at_level(logging.WARNING):
        assert np.array_equal(model.predict(extra), model.predict(X))
    assert "g__extra" in caplog.text


def test_type_conflict_is_schema_mismatch():
    X, y = toy_classification()
    model = fit(X, y, cfg(n_estimators=50))
    bad = FeatureMatrix.from_columns({"f__x1": ["a"] * 3}, categoricals=["f__x1"])
    with pytest.raises(SchemaMismatch):
        model.predict(bad)


def test_importance_single_feature():
    x = np.linspace(-1, 1, 100)
    model = fit(FeatureMatrix.from_columns({"x": x}), (x > 0).astype(float), cfg(n_estimators=50))
    assert feature_importance(model) == {"x": 1.0}


def test_importance_constant_column_zero_and_normalized():
    x = np.linspace(-1, 1, 100)
    X = FeatureMatrix.from_columns({"x": x, "z": np.ones(100), "w": np.sin(7 * x)})
    model = fit(X, (x > 0.2).astype(float), cfg(n_estimators=50))
    imp = model.feature_importance()
    assert imp["z"] == 0.0
    assert abs(sum(imp.values()) - 1.0) <= 1e-12


@pytest.mark.parametrize("choice", ["gbdt", "goss", "dart", "rf"])
def test_deterministic_across_thread_counts(choice):
    X, y = toy_classification()
    c = cfg(choice, n_estimators=40, subsample=0.8, colsample_bytree=0.7, seed=11)
    a = fit(X, y, c, n_jobs=1)
    b = fit(X, y, c, n_jobs=3)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())  # json: leaf thresholds are NaN
    assert a.predict(X).tobytes() == b.predict(X).tobytes()


def test_seed_changes_stochastic_variant():
    X, y = toy_classification()
    a = fit(X, y, cfg("rf", n_estimators=50, seed=1))
    b = fit(X, y, cfg("rf", n_estimators=50, seed=2))
    assert a.predict(X).tobytes() != b.predict(X).tobytes()


def test_gbdt_loss_non_increasing():
    X, y = toy_classification(n=600, seed=5)
    model = fit(X, y, cfg(n_estimators=150, learning_rate=0.3))
    hist = np.array(model.train_loss)
    assert len(hist) == 150
    assert np.all(np.diff(hist) <= 1e-9)


def test_column_permutation_equivariance():
    X, y = toy_classification()
    perm = ["f__cat", "f__x2", "f__x1"]
    Xp = FeatureMatrix.from_columns({c: X.data[c] for c in perm}, categoricals=["f__cat"])
    c = cfg(n_estimators=40, colsample_bytree=0.6, subsample=0.8, seed=4)
    assert fit(X, y, c).predict(X).tobytes() == fit(Xp, y, c).predict(Xp).tobytes()


def test_serialization_round_trip(tmp_path):
    X, y = toy_classification()
    model = fit(X, y, cfg("dart", n_estimators=40))
    model.save(tmp_path / "m.json")
    loaded = FittedModel.load(tmp_path / "m.json")
    assert predict(loaded, X).tobytes() == predict(model, X).tobytes()


def test_min_child_samples_respected():
    x = np.arange(30.0)
    model = fit(FeatureMatrix.from_columns({"x": x}), (x > 14).astype(float),
                cfg(min_child_samples=10, n_estimators=50, max_depth=4))
    for tree in model.trees:
        leaves = tree.apply_codes(model._codes(FeatureMatrix.from_columns({"x": x})))
        _, counts = np.unique(leaves, return_counts=True)
        assert counts.min() >= 10

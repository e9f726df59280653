from __future__ import annotations

import json
from datetime import datetime

import numpy as np
import pandas as pd
import pytest

from relsearch.errors import DuplicateTrialId, ReadOnlyViolation, SqlError
from relsearch.workspace import (
    PREDICTION_COLUMNS,
    TRIAL_COLUMNS,
    LogicalClock,
    PredictionBlock,
    TrialRecord,
    Workspace,
    open_workspace,
)

M = 600


def keys(m=M):
    return pd.DataFrame({"row_id": np.arange(m), "entity": np.arange(1000, 1000 + m),
                         "timestamp": [datetime(2000, 1, 2)] * m})


LABELS = (np.arange(M) % 3 == 0).astype(float)


def trial(tid, score, *, metric="auroc", name=None, kind=None):
    doc = {"status": "ok", "auroc": score} if kind is None else {"status": "failed", "failure_kind": kind}
    return TrialRecord(trial_id=tid, trial_name=name or tid, split="val", model_choice="gbdt",
                       resolved_model_config="{}", feature_query_hash="h", feature_block_names="a,b",
                       primary_metric=metric, primary_score=score, metrics_json=json.dumps(doc),
                       notes="" if kind is None else f"failed [{kind}]: boom")


def preds(seed, m=M, labels=LABELS):
    scores = np.random.default_rng(seed).random(m)
    return PredictionBlock.build(keys(m), labels[:m], scores, "val", classification=True)


@pytest.fixture
def ws(tmp_path):
    with Workspace(tmp_path / "workspace.db", clock=LogicalClock()) as w:
        yield w


def test_schema_exactly_two_tables(ws):
    tables = {r[0] for r in ws.query("SELECT table_name FROM information_schema.tables "
                                     "WHERE table_catalog = 'workspace'").rows}
    assert tables == {"trials", "eval_predictions"}
    assert list(ws.table_frame("trials").columns) == list(TRIAL_COLUMNS)
    assert list(ws.table_frame("eval_predictions").columns) == list(PREDICTION_COLUMNS)


def test_ok_trial_adds_m_predictions(ws):
    ws.append_trial(trial("val_0001", 0.8), preds(1))
    assert ws.n_trials() == 1 and ws.n_predictions() == M


def test_failed_trial_adds_no_predictions(ws):
    ws.append_trial(trial("val_0001", 0.8), preds(1))
    ws.append_trial(trial("val_0002", None, kind="sql_error"))
    assert ws.n_trials() == 2 and ws.n_predictions() == M
    t = ws.trial("val_0002")
    assert not t.ok and t.failure_kind == "sql_error" and "failed" in t.notes


def test_duplicate_trial_id(ws):
    ws.append_trial(trial("val_0001", 0.8), preds(1))
    with pytest.raises(DuplicateTrialId):
        ws.append_trial(trial("val_0001", 0.9), preds(2))
    assert ws.n_trials() == 1 and ws.n_predictions() == M


def test_append_is_atomic(ws):
    bad = preds(1)
    bad.row_id = np.zeros(M, dtype=np.int64)  # violates (trial_id, row_id) uniqueness
    with pytest.raises(Exception):
        ws.append_trial(trial("val_0001", 0.8), bad)
    assert ws.n_trials() == 0 and ws.n_predictions() == 0


def test_cross_trial_join(ws):
    ws.append_trial(trial("val_0001", 0.7), preds(1))
    ws.append_trial(trial("val_0002", 0.9), preds(2))
    rs = ws.query("SELECT a.row_id, a.entity_id = b.entity_id AS same_e, a.label = b.label AS same_y "
                  "FROM eval_predictions a JOIN eval_predictions b ON a.row_id = b.row_id "
                  "WHERE a.trial_id = 'val_0001' AND b.trial_id = 'val_0002' LIMIT 100000")
    assert len(rs.rows) == M
    assert all(r[1] and r[2] for r in rs.rows)


def test_result_cap_500(ws):
    ws.append_trial(trial("val_0001", 0.7), preds(1))
    rs = ws.query("SELECT * FROM eval_predictions")
    assert len(rs.rows) == 500 and rs.truncated


def test_improvement_query_respects_limit(ws):
    for i, s in enumerate([0.7, 0.75, 0.9], 1):
        ws.append_trial(trial(f"val_{i:04d}", s), preds(i))
    sql = """
        SELECT a.row_id, a.entity_id, a.label,
               abs(a.score - CAST(a.label AS DOUBLE)) - abs(b.score - CAST(b.label AS DOUBLE)) AS gain
        FROM eval_predictions a
        JOIN eval_predictions b ON a.row_id = b.row_id
        WHERE a.trial_id = 'val_0001' AND b.trial_id = 'val_0003'
        ORDER BY gain DESC
        LIMIT 20"""
    rs = ws.query(sql)
    assert len(rs.rows) == 20
    gains = [r[3] for r in rs.rows]
    assert gains == sorted(gains, reverse=True)


@pytest.mark.parametrize("sql", ["DELETE FROM trials", "DROP TABLE trials", "UPDATE trials SET notes = 'x'",
                                 "INSERT INTO trials (trial_id) VALUES ('x')", "CREATE TABLE t AS SELECT 1"])
def test_mutating_queries_rejected(ws, sql):
    ws.append_trial(trial("val_0001", 0.7), preds(1))
    with pytest.raises(ReadOnlyViolation):
        ws.query(sql)
    assert ws.n_trials() == 1


def test_sql_errors_pass_through(ws):
    with pytest.raises(SqlError):
        ws.query("SELECT nope FROM trials")


def test_context_tables_visible(tmp_path, triangle_manifest):
    from relsearch.relstore import open_context
    with open_context(triangle_manifest) as ctx:
        with Workspace(tmp_path / "w.db", context_db=ctx.database_path) as w:
            assert w.query("SELECT count(*) FROM train_table").rows == [(1500,)]
            assert w.query("SELECT count(*) FROM R").rows[0][0] > 0
            with pytest.raises(ReadOnlyViolation):
                w.query("DELETE FROM R")


def test_history_empty(ws):
    assert ws.trial_history() == "TRIAL HISTORY\nno trials yet"


def test_history_three_trials(ws):
    ws.append_trial(trial("val_0001", 0.7, name="base"), preds(1))
    ws.append_trial(trial("val_0002", None, kind="timeout"))
    ws.append_trial(trial("val_0003", 0.9, name="better"), preds(3))
    lines = ws.trial_history().splitlines()
    assert lines[0] == "TRIAL HISTORY (3 trials: 2 ok, 1 failed)"
    assert len(lines) == 4
    assert "FAILED (timeout)" in lines[2]
    assert lines[3].startswith("* val_0003") and "better" in lines[3] and "auroc=0.900000" in lines[3]
    assert not lines[1].startswith("*")


def test_history_shows_positive_mae(ws):
    ws.append_trial(trial("val_0001", -0.25, metric="mae"), None)
    assert "mae=0.250000" in ws.trial_history()


def test_best_trial_tie_keeps_earliest(ws):
    ws.append_trial(trial("val_0001", 0.9), preds(1))
    ws.append_trial(trial("val_0002", 0.9), preds(2))
    assert ws.best_trial().trial_id == "val_0001"


def test_prediction_rows_stable_and_typed(ws):
    ws.append_trial(trial("val_0001", 0.7), preds(1))
    p = ws.predictions("val_0001")
    assert p["row_id"].tolist() == list(range(M))
    assert set(p["label"]) == {"0", "1"}
    assert set(p["predicted_class"]) <= {"0", "1"}
    assert (p["predicted_class"] == np.where(p["score"] >= 0.5, "1", "0")).all()
    assert (p["eval_cutoff"] == pd.Timestamp("2000-01-02")).all()


def test_regression_predicted_class_null(ws):
    y = np.linspace(0, 5, 10)
    block = PredictionBlock.build(keys(10), y, y + 1, "val", classification=False)
    ws.append_trial(trial("val_0001", -1.0, metric="mae"), block)
    p = ws.predictions("val_0001")
    assert p["predicted_class"].isna().all()
    assert [float(v) for v in p["label"]] == list(y)


def test_monotone_accumulation(ws):
    snapshots = []
    for i in range(1, 5):
        ws.append_trial(trial(f"val_{i:04d}", None if i == 2 else 0.5 + i / 10,
                              kind="sql_error" if i == 2 else None), None if i == 2 else preds(i))
        snapshots.append((ws.table_frame("trials"), ws.table_frame("eval_predictions")))
    for (t0, p0), (t1, p1) in zip(snapshots, snapshots[1:]):
        assert set(t0["trial_id"]) < set(t1["trial_id"])
        merged = t1.merge(t0, how="inner")
        assert len(merged) == len(t0)
        assert len(p1) >= len(p0)


def test_reopen_resumes_logical_clock(tmp_path):
    with open_workspace(tmp_path, clock=LogicalClock()) as w:
        w.append_trial(trial("val_0001", 0.7), preds(1))
    with open_workspace(tmp_path, clock=LogicalClock()) as w:
        w.append_trial(trial("val_0002", 0.8), preds(2))
        stamps = [t.created_at for t in w.trials()]
    assert stamps[0] < stamps[1]

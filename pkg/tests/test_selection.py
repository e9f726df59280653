from __future__ import annotations

import json
import math
from datetime import datetime, timedelta
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ORDER_COUNT
from relsearch.agent import RolloutConfig, ScriptedPolicy, run_rollout
from relsearch.errors import DeploymentError, NoSuccessfulTrial
from relsearch.featprog import parse_program, program_hash
from relsearch.learner import resolve_config
from relsearch.relstore import TaskManifest, open_context
from relsearch.selection import (
    Champion,
    argmax_trial,
    best_trial,
    cross_rollout_select,
    deploy_champion,
    invariance_audit,
    pick_rollout,
)
from relsearch.synthbench import load_fixture
from relsearch.workspace import LogicalClock, TrialRecord, Workspace

T0 = datetime(2024, 1, 1)


def rec(i, score, metric="auroc"):
    doc = {"status": "ok"} if score is not None else {"status": "failed", "failure_kind": "sql_error"}
    return TrialRecord(f"val_{i:04d}", f"t{i}", "val", "gbdt", "{}", "h", "a", metric, score, json.dumps(doc),
                       created_at=T0 + timedelta(seconds=i))


def ws_with(tmp_path, scores, metric="auroc"):
    ws = Workspace(tmp_path / "workspace.db", clock=LogicalClock())
    for i, s in enumerate(scores, 1):
        ws.append_trial(rec(i, s, metric))
    return ws


# --- best trial ------------------------------------------------------------------

def test_best_trial_argmax(tmp_path):
    with ws_with(tmp_path, [0.7, 0.9, 0.85]) as ws:
        assert best_trial(ws) == "val_0002"


def test_best_trial_regression_orientation(tmp_path):
    # MAEs 0.5 and 0.4 are stored as -0.5 and -0.4
    with ws_with(tmp_path, [-0.5, -0.4], metric="mae") as ws:
        assert best_trial(ws) == "val_0002"


def test_best_trial_tie_goes_to_earlier(tmp_path):
    with ws_with(tmp_path, [0.9, 0.9]) as ws:
        assert best_trial(ws) == "val_0001"


def test_best_trial_none_without_success(tmp_path):
    with ws_with(tmp_path, [None, None]) as ws:
        assert best_trial(ws) is None
    assert argmax_trial([]) is None


def test_failed_trials_ignored():
    assert argmax_trial([rec(1, None), rec(2, 0.1), rec(3, None)]).trial_id == "val_0002"


_TRANSFORMS = [lambda x: 3 * x - 1, math.exp, lambda x: x ** 3 + x, math.atan, lambda x: 1 / (2 - x)]


@settings(max_examples=200)
@given(scores=st.lists(st.one_of(st.none(), st.integers(-1000, 1000).map(lambda v: v / 1000)), min_size=1, max_size=12),
       which=st.integers(0, len(_TRANSFORMS) - 1))
def test_selection_invariant_under_increasing_transform(scores, which):
    f = _TRANSFORMS[which]
    a = argmax_trial([rec(i, s) for i, s in enumerate(scores, 1)])
    b = argmax_trial([rec(i, None if s is None else f(s)) for i, s in enumerate(scores, 1)])
    assert (a is None and b is None) or a.trial_id == b.trial_id


# --- cross-rollout selection -------------------------------------------------------

def test_pick_rollout_max():
    assert pick_rollout([(0, 0.80), (1, 0.82), (2, 0.79)]) == 1


def test_pick_rollout_single():
    assert pick_rollout([(0, 0.3)]) == 0


def test_pick_rollout_ties_and_gaps():
    assert pick_rollout([(2, 0.9), (1, 0.9), (0, None)]) == 1
    assert pick_rollout([(0, None), (1, None)]) is None


def _rollout(tmp_path, triangle_dir, k, program, seed=0):
    script = [{"tool": "validate_program", "args": {"feature_queries_json": json.dumps(program),
                                                     "model_choice": "gbdt"}}] if program else []
    cfg = RolloutConfig(logical_clock=True, seed=seed, max_turns=2)
    return run_rollout(TaskManifest.load(triangle_dir / "manifest.json"), ScriptedPolicy(script), cfg,
                       tmp_path / f"rollout_{k}", index=k)


ONES = [{"name": "ones", "sql": "SELECT row_id, 1 AS one FROM eval_table"}]


def test_cross_rollout_select_picks_best_rollout(tmp_path, triangle_dir):
    programs = [ONES, load_fixture(triangle_dir, "cycle3_raw"), load_fixture(triangle_dir, "degrees")]
    rollouts = [_rollout(tmp_path, triangle_dir, k, p) for k, p in enumerate(programs)]
    champ = cross_rollout_select(rollouts)
    assert champ.rollout == 1 and champ.val_score == pytest.approx(1.0)
    assert champ.program.to_list() == programs[1]
    assert all(champ.val_score >= r.best_score for r in rollouts)


def test_cross_rollout_single(tmp_path, triangle_dir):
    r = _rollout(tmp_path, triangle_dir, 0, load_fixture(triangle_dir, "degrees"))
    champ = cross_rollout_select([r])
    assert champ.trial_id == r.best_trial_id and champ.val_score == r.best_score


def test_cross_rollout_all_empty(tmp_path, triangle_dir):
    rollouts = [_rollout(tmp_path, triangle_dir, k, None) for k in range(2)]
    with pytest.raises(NoSuccessfulTrial):
        cross_rollout_select(rollouts)


def test_cross_rollout_rejects_missing_record(tmp_path, triangle_dir):
    r = _rollout(tmp_path, triangle_dir, 0, ONES)
    fake = SimpleNamespace(index=0, output_dir=r.output_dir, best_trial_id="val_0099", best_score=0.9, renaming=None)
    with pytest.raises(NoSuccessfulTrial):
        cross_rollout_select([fake])


def test_champion_round_trip(tmp_path, triangle_dir):
    champ = make_champion(load_fixture(triangle_dir, "cycle3_raw"))
    champ.save(tmp_path / "champion.json")
    back = Champion.load(tmp_path / "champion.json")
    assert back.to_dict() == champ.to_dict()


def test_champion_hash_checked(tmp_path, triangle_dir):
    d = make_champion(load_fixture(triangle_dir, "cycle3_raw")).to_dict()
    d["program_hash"] = "0" * 64
    with pytest.raises(ValueError):
        Champion.from_dict(d)


# --- audit -----------------------------------------------------------------------

def test_audit_clean_on_aggregates_and_keys(cooc_dir):
    report = invariance_audit(parse_program(load_fixture(cooc_dir, "cooccurrence")), ["child_id"])
    assert report.clean and report.to_dict()["clean"]


def test_audit_flags_rowid_column():
    p = parse_program([{"name": "leak", "sql": "SELECT e.row_id, max(t.child_id) AS m FROM eval_table e "
                                               "JOIN T2 t USING (entity_id) GROUP BY e.row_id"},
                       {"name": "fine", "sql": "SELECT row_id, 1 AS x FROM eval_table"}])
    report = invariance_audit(p, ["child_id"])
    assert not report.clean
    assert report.findings == {"leak": ["child_id"], "fine": []}
    assert "leak: child_id" in report.render()


def test_audit_allows_semantic_ids_and_row_id():
    p = parse_program([{"name": "q", "sql": "SELECT e.row_id, count(o.product_id) AS n FROM eval_table e "
                                            "JOIN orders o ON o.customer_id = e.customer_id GROUP BY e.row_id"}])
    assert invariance_audit(p, ["order_id", "row_id"]).clean


def test_audit_ignores_names_in_strings_and_comments():
    p = parse_program([{"name": "q", "sql": "SELECT row_id, 'child_id' AS s -- child_id\nFROM eval_table"}])
    assert invariance_audit(p, ["child_id"]).clean


# --- deployment ------------------------------------------------------------------

def make_champion(program, task_type="binary_classification", choice="gbdt", config=None):
    prog = parse_program(program)
    return Champion(0, "val_0001", prog, choice, resolve_config(choice, config, task_type), 1.0,
                    program_hash(prog), "auroc" if task_type == "binary_classification" else "mae")


def test_deploy_triangle_task1(triangle_manifest, triangle_dir):
    with open_context(triangle_manifest) as ctx:
        report, model = deploy_champion(ctx, make_champion(load_fixture(triangle_dir, "cycle3_raw")))
        n_test = ctx.n_rows("test")
        n_fit = ctx.n_rows("train") + ctx.n_rows("val")
    assert report.metrics["auroc"] == 1.0
    assert len(report.predictions) == n_test
    assert report.n_fit_rows == n_fit
    assert report.audit.clean and report.importance
    assert "auroc" in report.render()


def test_deploy_cooccurrence(cooc_dir):
    with open_context(TaskManifest.load(cooc_dir / "manifest.json")) as ctx:
        report, _ = deploy_champion(ctx, make_champion(load_fixture(cooc_dir, "cooccurrence")))
    assert report.metrics["auroc"] == 1.0


def test_deploy_twice_bit_identical(triangle_manifest, triangle_dir):
    champ = make_champion(load_fixture(triangle_dir, "degrees"), choice="rf")
    runs = []
    for _ in range(2):
        with open_context(triangle_manifest) as ctx:
            runs.append(deploy_champion(ctx, champ))
    (a, ma), (b, mb) = runs
    sa = np.array([p["score"] for p in a.predictions])
    sb = np.array([p["score"] for p in b.predictions])
    assert sa.tobytes() == sb.tobytes()
    assert json.dumps(ma.to_dict()) == json.dumps(mb.to_dict())


def test_deploy_regression(regression_manifest):
    champ = make_champion([{"name": "o", "sql": ORDER_COUNT}], task_type="regression")
    with open_context(TaskManifest.load(regression_manifest)) as ctx:
        report, _ = deploy_champion(ctx, champ)
        assert report.n_fit_rows == ctx.n_rows("train") + ctx.n_rows("val")
        y = ctx.labels("test")
    scores = np.array([p["score"] for p in report.predictions])
    assert report.metrics["mae"] == pytest.approx(np.mean(np.abs(scores - y)), abs=1e-12)


def test_deploy_failure_kinds(triangle_manifest):
    with open_context(triangle_manifest) as ctx:
        with pytest.raises(DeploymentError) as err:
            deploy_champion(ctx, make_champion([{"name": "x", "sql": "SELECT row_id, nope FROM eval_table"}]))
        assert err.value.kind == "sql_error"
        with pytest.raises(DeploymentError) as err:
            deploy_champion(ctx, make_champion([{"name": "x", "sql": "SELECT row_id FROM train_table"}]))
        assert err.value.kind == "invalid_program"
        with pytest.raises(DeploymentError) as err:
            deploy_champion(ctx, make_champion([{"name": "x", "sql": "SELECT row_id, 'inf'::DOUBLE AS v FROM eval_table"}]))
        assert err.value.kind == "training_error"

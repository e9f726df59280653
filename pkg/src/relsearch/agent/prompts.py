"""Prompt templates for the search loop.

Templates use ``str.format`` fields: entity_col, timestamp_col, target_col,
task_type, task_description, dataset_name, n_val.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..learner import MODEL_CHOICES

_CLASSIFICATION_GOAL = """You are building a predictive pipeline for an ENTITY CLASSIFICATION task.

Objective: find SQL feature queries and a model choice that predict the class label
({target_col}) well for every entity of the validation split. Scores are probabilities in
[0, 1]; the primary metric is AUROC, with F1 and accuracy at threshold 0.5 reported as extra
diagnostics."""

_REGRESSION_GOAL = """You are building a predictive pipeline for an ENTITY REGRESSION task.

Objective: find SQL feature queries and a model choice that predict the numeric target
({target_col}) well for every entity of the validation split. The primary metric is MAE
(mean absolute error, lower is better)."""

_TOOLS_BLOCK = """Tools:
- execute_query(query): read-only SQL exploration. Results without a LIMIT are capped at 200 rows.
- get_table_info(table_name=None): columns, keys and row counts.{validate_tools}"""

_VALIDATE_TOOLS = """
- validate_program(feature_queries_json, model_choice, model_config_json): materializes your
  features for the train and validation splits, fits the chosen learner on train and scores
  validation. Returns metrics, the resolved config, diagnostics and the trial history.
- get_trial_history(): one line per earlier validation with its score."""

_WORKSPACE_TOOL = """
- query_eval_workspace(sql): read-only SQL over the trials and eval_predictions tables
  (results capped at 500 rows)."""

_RULES = """How feature queries work:
- Never guess names; inspect the schema (SHOW TABLES, PRAGMA table_info('t')) first.
- train_table holds labeled training rows ({entity_col}, {timestamp_col}, {target_col}).
- eval_table holds the rows being scored: row_id, {entity_col}, {timestamp_col}. It is rebound
  to the right split on every call, so anchor every feature query on eval_table, never on
  train_table.
- Every feature query returns row_id plus one or more feature columns, at most one row per
  row_id. Rows with no match get nulls.
- The same entity can appear at several prediction times, so aggregate by row_id rather than
  by {entity_col} alone.
- When a source table carries timestamps, only use records with source_time <
  eval_table.{timestamp_col}.
- A program is a JSON list: [{{"name": "block_name", "sql": "SELECT e.row_id, ... FROM eval_table e ..."}}].
  Output columns are named <block_name>__<column>."""

_MENU_HEADER = """Learners (model_choice). All are gradient-boosted tree variants run by the environment:"""

_MENU_ITEMS = {
    "gbdt": "gbdt      standard gradient boosting; a good default",
    "rf": "rf        random-forest style bagging of full-shrinkage trees",
    "dart": "dart      boosting with dropout of earlier trees",
    "goss": "goss      boosting with gradient-based one-side row sampling",
    "xgboost": "xgboost   boosting with xgboost-style parameter names",
    "xgb_dart": "xgb_dart  dropout boosting with xgboost-style names and normalization",
    "catboost": "catboost  boosting with catboost-style regularization name",
}

_CONFIG_KEYS = """Config keys (model_config_json, all optional; out-of-range values are clamped, unknown keys ignored):
  n_estimators (50-500), learning_rate (0.01-0.3), max_depth (2-10), min_child_samples (1-100),
  subsample (0.5-1.0), colsample_bytree (0.5-1.0), lambda_l1 (0.0-10.0), lambda_l2 (0.0-10.0).
  xgboost names: min_child_weight (1-100), reg_alpha (0.0-10.0), reg_lambda (0.0-10.0).
  catboost name: l2_leaf_reg (0.1-10.0).
  categorical_features: list of "<block_name>__<column>" names to treat as categorical
  (bucket very high-cardinality columns in SQL first)."""

_CLASSIFICATION_OBJECTIVE = """  objective: binary logistic loss (fixed for classification)."""

_REGRESSION_OBJECTIVE = """  objective: "regression_l1" (MAE, default), "regression_l2" (MSE);
    xgboost spellings "reg:absoluteerror" and "reg:squarederror" are accepted.
    Huber names are accepted but trained with regression_l1.
  log_transform_target: true fits on log1p(target) and maps predictions back with expm1;
    MAE is always reported on the original scale."""

_CONSTRAINTS = """Constraints: one configuration per validation call; no custom training code,
objectives or ensembles. Splitting, fitting and scoring are handled by the environment."""

_WORKSPACE_BLOCK = """Evaluation workspace (query_eval_workspace):
  trials(trial_id, trial_name, parent_trial_id, created_at, split, model_choice,
         resolved_model_config, feature_query_hash, feature_block_names, primary_metric,
         primary_score, metrics_json, notes)
  eval_predictions(trial_id, row_id, entity_id, label, score, predicted_class, split, eval_cutoff)
primary_score is oriented so that higher is better (AUROC, or minus MAE).
row_id identifies the same validation example in every trial, so two trials can be joined on
row_id for error analysis. The workspace is for analysis only; feature queries cannot read it."""

_NO_FEEDBACK_BLOCK = """There is no validation tool in this mode and you get a single turn.
Output the final program and model configuration directly, as your whole reply, in this JSON form:
{{"feature_queries": [{{"name": "...", "sql": "..."}}], "model_choice": "gbdt", "model_config": {{}}}}"""

EXECUTE_TEMPLATE = """Task type: {task_type}
Task description: {task_description}
Dataset: {dataset_name}

Entity column: {entity_col}
Timestamp column: {timestamp_col}
Target column: {target_col}
Validation rows: {n_val}

You design SQL features and pick a learner; the environment trains and evaluates.
Suggested order: list the tables, inspect train_table and the other tables, look at value
distributions, then write row_id-keyed feature blocks anchored on eval_table and validate them.
Start simple (gbdt, a few features) and improve from the diagnostics.{extra}"""

FOLLOWUP_PROMPT = """Keep improving the pipeline.
- If nothing has been validated yet, call validate_program now.
- Per-row validation results of every trial are in the workspace; use query_eval_workspace for
  error analysis and get_trial_history for an overview.
- Let what you find guide the next feature changes."""

FOLLOWUP_PROMPT_NO_WORKSPACE = """Keep improving the pipeline.
- If nothing has been validated yet, call validate_program now.
- get_trial_history lists every earlier attempt with its score.
- Let the diagnostics guide the next feature changes."""

WRAPUP_PROMPT = """Final turn. If you have not validated anything yet, call validate_program now with your best
queries, learner and configuration. Otherwise call get_trial_history to confirm your best result."""


@dataclass(frozen=True)
class TaskView:
    task_type: str
    task_description: str
    dataset_name: str
    entity_col: str
    timestamp_col: str
    target_col: str
    n_val: int

    @property
    def is_classification(self) -> bool:
        return self.task_type == "binary_classification"

    def fields(self) -> dict[str, object]:
        return dict(vars(self))


@dataclass(frozen=True)
class PromptSet:
    system: str
    execute: str
    followup: str
    wrapup: str


def model_menu(task_type: str, allowed: Sequence[str] | None = None) -> str:
    allowed = list(allowed) if allowed else list(MODEL_CHOICES)
    lines = [_MENU_HEADER]
    lines += [f"  {i}. {_MENU_ITEMS[m]}" for i, m in enumerate(allowed, 1)]
    lines.append(_CONFIG_KEYS)
    lines.append(_CLASSIFICATION_OBJECTIVE if task_type == "binary_classification" else _REGRESSION_OBJECTIVE)
    return "\n".join(lines)


def assemble_prompts(task: TaskView, *, no_feedback: bool = False, no_workspace: bool = False,
                     allowed_models: Sequence[str] | None = None, schema_text: str | None = None) -> PromptSet:
    f = task.fields()
    goal = (_CLASSIFICATION_GOAL if task.is_classification else _REGRESSION_GOAL).format(**f)
    validate_tools = ""
    if not no_feedback:
        validate_tools = _VALIDATE_TOOLS + ("" if no_workspace else _WORKSPACE_TOOL)
    parts = [goal, _TOOLS_BLOCK.format(validate_tools=validate_tools), _RULES.format(**f),
             model_menu(task.task_type, allowed_models), _CONSTRAINTS]
    if no_feedback:
        parts.append(_NO_FEEDBACK_BLOCK.format())
    elif not no_workspace:
        parts.append(_WORKSPACE_BLOCK)
    system = "\n\n".join(parts)

    extra = ""
    if no_feedback:
        extra = "\n\nDatabase schema:\n" + (schema_text or "(unavailable)")
        extra += "\n\n" + _NO_FEEDBACK_BLOCK.format()
    elif not no_workspace:
        extra = "\n\nAfter each validation, query_eval_workspace can compare trials row by row."
    execute = EXECUTE_TEMPLATE.format(extra=extra, **f)
    followup = FOLLOWUP_PROMPT_NO_WORKSPACE if no_workspace else FOLLOWUP_PROMPT
    return PromptSet(system, execute, followup, WRAPUP_PROMPT)

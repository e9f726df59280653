"""Tool schemas, parsed actions and dispatch to the underlying modules."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence, Union

import jsonschema

from ..errors import MissingTable, QueryTimeout, ReadOnlyViolation, SqlError
from ..harness import Harness, ValidationReport, ValidationRequest
from ..learner import MODEL_CHOICES
from ..relstore import ContextHandle
from ..workspace import Workspace

log = logging.getLogger(__name__)

EXECUTE_QUERY = "execute_query"
GET_TABLE_INFO = "get_table_info"
VALIDATE_PROGRAM = "validate_program"
GET_TRIAL_HISTORY = "get_trial_history"
QUERY_EVAL_WORKSPACE = "query_eval_workspace"


def _fn(name: str, description: str, properties: dict, required: Sequence[str]) -> dict[str, Any]:
    return {
        "type": "function",
        "function": {
            "name": name,
            "description": description,
            "parameters": {"type": "object", "properties": properties, "required": list(required),
                           "additionalProperties": False},
        },
    }


def tool_schemas(entity_col: str, timestamp_col: str, *, allowed_models: Sequence[str] | None = None,
                 no_feedback: bool = False, no_workspace: bool = False) -> list[dict[str, Any]]:
    models = list(allowed_models) if allowed_models else list(MODEL_CHOICES)
    tools = [
        _fn(EXECUTE_QUERY,
            "Run one read-only SQL statement (SELECT, WITH, SHOW, DESCRIBE, PRAGMA table_info, ...) and "
            "return the rows as a JSON list of objects. Statements without LIMIT return at most 200 rows. "
            "Errors come back as text starting with 'Error:'.",
            {"query": {"type": "string", "description": "SQL statement to run."}}, ["query"]),
        _fn(GET_TABLE_INFO,
            "Describe one table, or every table when table_name is omitted: columns with types, "
            "primary and foreign keys, and row counts.",
            {"table_name": {"type": ["string", "null"], "description": "Table to describe."}}, []),
    ]
    if no_feedback:
        return tools
    tools.append(_fn(
        VALIDATE_PROGRAM,
        "Train and score a feature program with a learner on the validation split.\n"
        "feature_queries_json: JSON list [{\"name\": ..., \"sql\": ...}]. Each query is anchored on "
        f"eval_table (row_id, {entity_col}, {timestamp_col}), returns row_id and feature columns, and for "
        f"timestamped sources keeps only records before eval_table.{timestamp_col}. train_table holds "
        "labeled training rows.\n"
        f"model_choice: one of {', '.join(models)}.\n"
        "model_config_json: optional JSON object of hyperparameters; out-of-range values are clamped and "
        "unknown keys ignored.\nReturns the metrics, resolved config, diagnostics and trial history as text.",
        {
            "feature_queries_json": {"type": "string"},
            "model_choice": {"type": "string", "enum": models},
            "model_config_json": {"type": ["string", "null"]},
            "trial_name": {"type": ["string", "null"]},
            "parent_trial_id": {"type": ["string", "null"]},
        },
        ["feature_queries_json", "model_choice"]))
    tools.append(_fn(GET_TRIAL_HISTORY, "Summarize every earlier validation trial and its score.", {}, []))
    if not no_workspace:
        tools.append(_fn(
            QUERY_EVAL_WORKSPACE,
            "Run a read-only SELECT over the evaluation workspace: trials(trial_id, trial_name, "
            "parent_trial_id, created_at, split, model_choice, resolved_model_config, feature_query_hash, "
            "feature_block_names, primary_metric, primary_score, metrics_json, notes) and "
            "eval_predictions(trial_id, row_id, entity_id, label, score, predicted_class, split, eval_cutoff). "
            "row_id is stable across trials of a split. These tables are for analysis only and cannot be "
            "used inside feature queries. Returns at most 500 rows.",
            {"sql": {"type": "string"}}, ["sql"]))
    return tools


# --- actions -----------------------------------------------------------------

@dataclass(frozen=True)
class ExecuteQuery:
    sql: str


@dataclass(frozen=True)
class GetTableInfo:
    table: str | None = None


@dataclass(frozen=True)
class ValidateProgram:
    feature_queries_json: str
    model_choice: str
    model_config_json: str | None = None
    trial_name: str | None = None
    parent_trial_id: str | None = None


@dataclass(frozen=True)
class GetTrialHistory:
    pass


@dataclass(frozen=True)
class QueryEvalWorkspace:
    sql: str


@dataclass(frozen=True)
class FinalText:
    text: str


@dataclass(frozen=True)
class InvalidCall:
    """A tool call that could not be turned into an action."""

    tool: str
    error: str


Action = Union[ExecuteQuery, GetTableInfo, ValidateProgram, GetTrialHistory, QueryEvalWorkspace, FinalText]

_BUILDERS: dict[str, Callable[[dict], Action]] = {
    EXECUTE_QUERY: lambda a: ExecuteQuery(a["query"]),
    GET_TABLE_INFO: lambda a: GetTableInfo(a.get("table_name")),
    VALIDATE_PROGRAM: lambda a: ValidateProgram(a["feature_queries_json"], a["model_choice"],
                                                a.get("model_config_json"), a.get("trial_name"),
                                                a.get("parent_trial_id")),
    GET_TRIAL_HISTORY: lambda a: GetTrialHistory(),
    QUERY_EVAL_WORKSPACE: lambda a: QueryEvalWorkspace(a["sql"]),
}


def _coerce_json_fields(args: dict) -> dict:
    # models often send the program / config as structured JSON instead of a string
    out = dict(args)
    for key in ("feature_queries_json", "model_config_json"):
        if isinstance(out.get(key), (list, dict)):
            out[key] = json.dumps(out[key])
    return out


def parse_tool_call(name: str, arguments: str | dict | None, schemas: Sequence[dict]) -> Action | InvalidCall:
    by_name = {s["function"]["name"]: s["function"] for s in schemas}
    if name not in by_name:
        return InvalidCall(name, f"unknown tool {name!r}; available: {', '.join(by_name)}")
    if arguments is None or arguments == "":
        args: Any = {}
    elif isinstance(arguments, str):
        try:
            args = json.loads(arguments)
        except json.JSONDecodeError as e:
            return InvalidCall(name, f"invalid JSON in tool arguments: {e}")
    else:
        args = arguments
    if not isinstance(args, dict):
        return InvalidCall(name, "tool arguments must be a JSON object")
    args = _coerce_json_fields(args)
    try:
        jsonschema.validate(args, by_name[name]["parameters"])
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "arguments"
        return InvalidCall(name, f"invalid arguments for {name} ({where}): {e.message}")
    return _BUILDERS[name](args)


def tool_name(action: Action | InvalidCall) -> str:
    if isinstance(action, InvalidCall):
        return action.tool
    return {ExecuteQuery: EXECUTE_QUERY, GetTableInfo: GET_TABLE_INFO, ValidateProgram: VALIDATE_PROGRAM,
            GetTrialHistory: GET_TRIAL_HISTORY, QueryEvalWorkspace: QUERY_EVAL_WORKSPACE,
            FinalText: "final_text"}[type(action)]


@dataclass
class Observation:
    tool: str
    payload: str
    error: bool = False
    report: ValidationReport | None = None

    def __post_init__(self):
        if not self.payload:
            self.payload = "(empty result)"


class ToolBox:
    """Routes actions to relstore, the harness and the workspace."""

    def __init__(self, ctx: ContextHandle, ws: Workspace, harness: Harness, *,
                 allowed_models: Sequence[str] | None = None, no_workspace: bool = False,
                 query_log: Path | None = None):
        self.ctx = ctx
        self.ws = ws
        self.harness = harness
        self.allowed_models = list(allowed_models) if allowed_models else list(MODEL_CHOICES)
        self.no_workspace = no_workspace
        self.query_log = query_log
        self.turn = 0

    def _log_workspace_query(self, sql: str) -> None:
        if self.query_log is None:
            return
        with open(self.query_log, "a") as fh:
            fh.write(f"-- turn {self.turn}\n{sql.strip()}\n\n")

    def dispatch(self, action: Action | InvalidCall) -> Observation:
        name = tool_name(action)
        if isinstance(action, InvalidCall):
            return Observation(name, f"Error: {action.error}", True)
        try:
            if isinstance(action, (ExecuteQuery, GetTableInfo)) and self.ctx.split != "val":
                self.ctx.bind_split("val")  # exploration always sees the validation keys
            if isinstance(action, ExecuteQuery):
                return Observation(name, self.ctx.execute_exploration(action.sql).render())
            if isinstance(action, GetTableInfo):
                return Observation(name, self.ctx.get_table_info(action.table).render())
            if isinstance(action, ValidateProgram):
                if action.model_choice not in self.allowed_models:
                    return Observation(name, f"Error: model_choice {action.model_choice!r} is not available "
                                             f"in this run; choose one of {', '.join(self.allowed_models)}", True)
                report = self.harness.validate(ValidationRequest(
                    action.feature_queries_json, action.model_choice, action.model_config_json,
                    trial_name=action.trial_name or "", parent_trial_id=action.parent_trial_id))
                return Observation(name, report.render(), not report.ok, report)
            if isinstance(action, GetTrialHistory):
                return Observation(name, self.ws.trial_history())
            if isinstance(action, QueryEvalWorkspace):
                if self.no_workspace:
                    return Observation(name, "Error: the evaluation workspace is disabled in this run", True)
                self._log_workspace_query(action.sql)
                return Observation(name, self.ws.query(action.sql).render())
            if isinstance(action, FinalText):
                return Observation(name, action.text)
        except (SqlError, QueryTimeout, ReadOnlyViolation, MissingTable) as e:
            return Observation(name, f"Error: {e}", True)
        raise TypeError(f"unsupported action {action!r}")

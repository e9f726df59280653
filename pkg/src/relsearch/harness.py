"""Program validation: materialize, fit, score, diagnose, record, report."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import duckdb
import numpy as np

from .errors import (
    LearnerError,
    MetricError,
    ObjectiveMismatch,
    ProgramError,
    QueryTimeout,
    SqlError,
)
from .featprog import (
    PARSE_ERROR,
    FeatureMatrix,
    FeatureProgram,
    check_anchoring,
    materialize,
    parse_program,
    program_hash,
)
from .learner import ResolvedConfig, fit, resolve_config
from .metrics import MetricBundle, bundle_for
from .relstore import ContextHandle
from .workspace import PredictionBlock, TrialRecord, Workspace

log = logging.getLogger(__name__)

VALIDATION_BUDGET_S = 600.0
TOP_K = 5

SQL_ERROR = "sql_error"
TIMEOUT = "timeout"
TRAINING_ERROR = "training_error"
INVALID_PROGRAM = "invalid_program"
INVALID_CONFIG = "invalid_config"


@dataclass
class ValidationRequest:
    feature_queries_json: str | list
    model_choice: str
    model_config_json: str | dict | None = None
    trial_name: str = ""
    split: str = "val"
    parent_trial_id: str | None = None


@dataclass
class Diagnostics:
    query_rows: dict[str, int]
    n_rows: int
    missingness: dict[str, float]
    constant_columns: list[str]
    warnings: list[str]
    best_examples: list[dict[str, Any]]
    worst_examples: list[dict[str, Any]]
    importance: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in ("query_rows", "n_rows", "missingness", "constant_columns",
                                               "warnings", "best_examples", "worst_examples", "importance")}

    def render(self) -> str:
        lines = [f"rows evaluated: {self.n_rows}"]
        for q, n in self.query_rows.items():
            lines.append(f"query {q}: {n} of {self.n_rows} rows matched ({n / max(self.n_rows, 1):.1%})")
        lines.append("missingness:")
        for c, r in self.missingness.items():
            imp = f", importance {self.importance[c]:.3f}" if c in self.importance else ""
            lines.append(f"  {c}: {r:.3f}{imp}")
        for w in self.warnings:
            lines.append(f"warning: {w}")

        def fmt(rows):
            return [f"  row_id={r['row_id']} entity={r['entity']} label={r['label']} "
                    f"score={r['score']:.4f} error={r['error']:.4f}" for r in rows]

        lines.append("best predictions:")
        lines += fmt(self.best_examples)
        lines.append("worst predictions:")
        lines += fmt(self.worst_examples)
        return "\n".join(lines)


def compute_diagnostics(X: FeatureMatrix, scores: np.ndarray, labels: np.ndarray, *,
                        row_ids: np.ndarray | None = None, entities=None, k: int = TOP_K) -> Diagnostics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = len(scores)
    if len(labels) != n or X.n_rows != n:
        raise ValueError("diagnostics inputs are not aligned")
    k = min(k, 10)
    missingness, constant, warnings = {}, [], []
    for c in X.columns:
        miss = X.missing_mask(c)
        missingness[c] = float(miss.mean()) if n else 0.0
        present = X.data[c][~miss]
        if len(set(present.tolist())) <= 1:
            constant.append(c)
            warnings.append(f"column {c} is constant on this split and cannot help the model")
        elif missingness[c] > 0.9:
            warnings.append(f"column {c} is {missingness[c]:.0%} null")
    err = np.abs(scores - labels)
    order = np.argsort(err, kind="stable")
    rid = np.arange(n) if row_ids is None else np.asarray(row_ids)
    ent = [None] * n if entities is None else list(entities)

    def ex(i):
        lab = labels[i]
        return {"row_id": int(rid[i]), "entity": None if ent[i] is None else str(ent[i]),
                "label": float(lab), "score": float(scores[i]), "error": float(err[i])}

    best = [ex(i) for i in order[:k]]
    worst = [ex(i) for i in order[::-1][:k]]
    return Diagnostics(dict(X.query_rows), n, missingness, constant, warnings, best, worst)


@dataclass
class ValidationReport:
    trial_id: str
    status: str
    failure_kind: str | None = None
    message: str = ""
    metrics: MetricBundle | None = None
    diagnostics: Diagnostics | None = None
    config: ResolvedConfig | None = None
    history: str = ""
    program_hash: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def primary_score(self) -> float | None:
        return self.metrics.oriented_score if self.metrics is not None else None

    def render(self) -> str:
        out = [f"TRIAL {self.trial_id}: {self.status.upper()}"]
        if not self.ok:
            out.append(f"failure: {self.failure_kind}")
            out.append(self.message)
        out.append("")
        out.append("METRICS")
        out.append(self.metrics.render() if self.metrics else "(none)")
        out.append("")
        out.append("RESOLVED CONFIG")
        if self.config is not None:
            out.append(f"model_choice: {self.config.model_choice}")
            out.append(self.config.render())
            for w in self.config.warnings:
                out.append(f"note: {w}")
        else:
            out.append("(not resolved)")
        out.append("")
        out.append("DIAGNOSTICS")
        out.append(self.diagnostics.render() if self.diagnostics else "(none)")
        out.append("")
        out.append(self.history)
        return "\n".join(out)


class _Failure(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class Harness:
    """Validates (program, model) submissions for one rollout."""

    def __init__(self, ctx: ContextHandle, ws: Workspace, *, seed: int = 0, n_jobs: int = 1,
                 budget_s: float = VALIDATION_BUDGET_S, program_dir: str | Path | None = None):
        self.ctx = ctx
        self.ws = ws
        self.seed = seed
        self.n_jobs = n_jobs
        self.budget_s = budget_s
        self.program_dir = Path(program_dir) if program_dir else None
        self._cache: dict[tuple, FeatureMatrix] = {}
        self._counter = ws.n_trials()

    def next_trial_id(self) -> str:
        self._counter += 1
        return f"val_{self._counter:04d}"

    def _materialize(self, program: FeatureProgram, h: str, split: str, cats: tuple, deadline: float
                     ) -> FeatureMatrix:
        key = (h, split, cats)
        if key not in self._cache:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise _Failure(TIMEOUT, f"validation budget of {self.budget_s:g}s exhausted")
            self._cache[key] = materialize(self.ctx, program, split, cats, timeout=remaining)
        return self._cache[key]

    def _explain(self, program: FeatureProgram, fallback: str) -> None:
        for q in program.queries:
            try:
                self.ctx.connection.extract_statements(q.sql)
            except duckdb.Error as e:
                raise _Failure(SQL_ERROR, f"[{q.name}] {e}") from None
        raise _Failure(INVALID_PROGRAM, fallback)

    def _store_program(self, program: FeatureProgram, h: str) -> None:
        if self.program_dir is None:
            return
        self.program_dir.mkdir(parents=True, exist_ok=True)
        path = self.program_dir / f"{h}.json"
        if not path.exists():
            path.write_text(program.to_json(indent=2) + "\n")

    def validate(self, request: ValidationRequest) -> ValidationReport:
        trial_id = self.next_trial_id()
        split = request.split
        if split != "val":
            raise ValueError("search-time validation only runs on the val split")
        started = time.monotonic()
        deadline = started + self.budget_s
        m = self.ctx.manifest
        program = cfg = h = None
        metrics = diag = None
        preds = None
        try:
            try:
                program = parse_program(request.feature_queries_json)
            except ProgramError as e:
                raise _Failure(INVALID_PROGRAM, str(e)) from None
            h = program_hash(program)
            anchor = check_anchoring(program)
            if not anchor.passed:
                if any(v.verdict != PARSE_ERROR for v in anchor.failures()):
                    raise _Failure(INVALID_PROGRAM, anchor.render())
                # unparseable text: let the engine name the syntax error
                self._explain(program, anchor.render())
            try:
                cfg = resolve_config(request.model_choice, request.model_config_json, m.task_type, seed=self.seed)
            except (ObjectiveMismatch, ValueError, json.JSONDecodeError) as e:
                raise _Failure(INVALID_CONFIG, str(e)) from None
            self._store_program(program, h)
            try:
                X_train = self._materialize(program, h, "train", cfg.categorical_features, deadline)
                X_val = self._materialize(program, h, split, cfg.categorical_features, deadline)
            except _Failure:
                raise
            except QueryTimeout as e:
                raise _Failure(TIMEOUT, str(e)) from None
            except SqlError as e:
                raise _Failure(SQL_ERROR, str(e)) from None
            except Exception as e:  # unexpected result shapes still become a recorded failure
                log.exception("materialization failed")
                raise _Failure(SQL_ERROR, f"{type(e).__name__}: {e}") from None
            y_train, y_val = self.ctx.labels("train"), self.ctx.labels(split)
            try:
                model = fit(X_train, y_train, cfg, n_jobs=self.n_jobs)
                scores = model.predict(X_val)
                metrics = bundle_for(m.task_type, scores, y_val)
            except (LearnerError, MetricError) as e:
                raise _Failure(TRAINING_ERROR, f"{type(e).__name__}: {e}") from None
            except Exception as e:
                log.exception("training failed")
                raise _Failure(TRAINING_ERROR, f"{type(e).__name__}: {e}") from None
            if time.monotonic() > deadline:
                raise _Failure(TIMEOUT, f"validation exceeded the {self.budget_s:g}s budget")
            keys = self.ctx.split_keys(split)
            diag = compute_diagnostics(X_val, scores, y_val, row_ids=keys["row_id"].to_numpy(),
                                       entities=keys["entity"].tolist())
            diag.importance = model.feature_importance()
            preds = PredictionBlock.build(keys, y_val, scores, split, m.is_classification)
            status, kind, message = "ok", None, ""
        except _Failure as f:
            status, kind, message = "failed", f.kind, str(f)
            metrics = diag = preds = None

        log.info("%s %s in %.2fs", trial_id, status, time.monotonic() - started)
        if status == "ok":
            metrics_doc = {**metrics.to_dict(), "status": "ok"}
            notes = "; ".join(diag.warnings)
        else:
            metrics_doc = {"status": "failed", "failure_kind": kind, "message": message}
            notes = f"failed [{kind}]: {message}"
        record = TrialRecord(
            trial_id=trial_id,
            trial_name=request.trial_name or trial_id,
            parent_trial_id=request.parent_trial_id,
            split=split,
            model_choice=request.model_choice,
            resolved_model_config=json.dumps(cfg.to_dict(), sort_keys=True) if cfg else "",
            feature_query_hash=h or "",
            feature_block_names=",".join(program.names) if program else "",
            primary_metric=m.primary_metric,
            primary_score=metrics.oriented_score if metrics else None,
            metrics_json=json.dumps(metrics_doc, sort_keys=True, default=str),
            notes=notes,
        )
        self.ws.append_trial(record, preds)
        return ValidationReport(trial_id, status, kind, message, metrics, diag, cfg,
                                self.ws.trial_history(), h)

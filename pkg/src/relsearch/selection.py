"""Inference phase: pick the best validated trial, refit on train+val, score the test split."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .errors import DeploymentError, LearnerError, NoSuccessfulTrial, ProgramError, QueryTimeout, SqlError
from .featprog import FeatureProgram, check_anchoring, materialize, parse_program, program_hash
from .learner import FittedModel, ResolvedConfig, fit
from .metrics import bundle_for
from .relstore import ContextHandle, SchemaRenaming
from .sqltext import identifier_names
from .workspace import TrialRecord, Workspace

log = logging.getLogger(__name__)

CHAMPION_FILE = "champion.json"
TEST_REPORT_FILE = "test_report.json"
MODEL_FILE = "model.json"


# --- best trial --------------------------------------------------------------

def argmax_trial(trials: Iterable[TrialRecord]) -> TrialRecord | None:
    """Highest oriented score among successful trials; earliest created_at wins ties."""
    ranked = sorted((t for t in trials if t.ok), key=lambda t: (t.created_at, t.trial_id))
    best = None
    for t in ranked:
        if best is None or t.primary_score > best.primary_score:
            best = t
    return best


def best_trial(ws: Workspace) -> str | None:
    t = argmax_trial(ws.trials())
    return t.trial_id if t else None


# --- champion ----------------------------------------------------------------

@dataclass
class Champion:
    rollout: int
    trial_id: str
    program: FeatureProgram
    model_choice: str
    config: ResolvedConfig
    val_score: float
    program_hash: str
    primary_metric: str = ""
    renaming: dict[str, Any] | None = None  # schema renaming the program was written against

    def to_dict(self) -> dict[str, Any]:
        return {
            "rollout": self.rollout,
            "trial_id": self.trial_id,
            "program_hash": self.program_hash,
            "program": self.program.to_list(),
            "model_choice": self.model_choice,
            "config": self.config.to_dict(),
            "primary_metric": self.primary_metric,
            "val_score": self.val_score,
            "renaming": self.renaming,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Champion":
        program = parse_program(d["program"])
        h = program_hash(program)
        if d.get("program_hash") not in (None, h):
            raise ValueError("champion program does not match its recorded hash")
        return cls(int(d["rollout"]), d["trial_id"], program, d["model_choice"],
                   ResolvedConfig.from_dict(d["config"]), float(d["val_score"]), h, d.get("primary_metric", ""),
                   d.get("renaming"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Champion":
        return cls.from_dict(json.loads(Path(path).read_text()))


class RolloutLike(Protocol):
    index: int
    output_dir: str
    best_trial_id: str | None
    best_score: float | None
    renaming: dict[str, Any] | None


def champion_from_trial(rollout: int, record: TrialRecord, program_dir: str | Path) -> Champion:
    path = Path(program_dir) / f"{record.feature_query_hash}.json"
    program = parse_program(json.loads(path.read_text()))
    return Champion(rollout, record.trial_id, program, record.model_choice,
                    ResolvedConfig.from_dict(json.loads(record.resolved_model_config)),
                    float(record.primary_score), record.feature_query_hash, record.primary_metric)


def pick_rollout(bests: Sequence[tuple[int, float | None]]) -> int | None:
    """Index of the highest best score; lowest rollout index wins ties."""
    chosen = None
    for idx, score in sorted(bests, key=lambda b: b[0]):
        if score is None:
            continue
        if chosen is None or score > chosen[1]:
            chosen = (idx, score)
    return None if chosen is None else chosen[0]


def cross_rollout_select(rollouts: Sequence[RolloutLike]) -> Champion:
    idx = pick_rollout([(r.index, r.best_score) for r in rollouts])
    if idx is None:
        raise NoSuccessfulTrial(f"none of {len(rollouts)} rollouts produced a successful trial")
    r = next(r for r in rollouts if r.index == idx)
    out = Path(r.output_dir)
    with Workspace(out / "workspace.db") as ws:
        record = ws.trial(r.best_trial_id)
    if record is None or not record.ok:
        raise NoSuccessfulTrial(f"rollout {idx} reports {r.best_trial_id} but the workspace has no such success")
    champion = champion_from_trial(idx, record, out / "programs")
    champion.renaming = r.renaming
    return champion


# --- audit -------------------------------------------------------------------

@dataclass
class AuditReport:
    findings: dict[str, list[str]]

    @property
    def clean(self) -> bool:
        return all(not v for v in self.findings.values())

    def to_dict(self) -> dict[str, Any]:
        return {"clean": self.clean, "findings": self.findings}

    def render(self) -> str:
        if self.clean:
            return "invariance audit: clean (no row-identifier columns referenced)"
        lines = ["invariance audit: row-identifier columns referenced"]
        for q, cols in self.findings.items():
            if cols:
                lines.append(f"  {q}: {', '.join(cols)}")
        return "\n".join(lines)


def invariance_audit(program: FeatureProgram, rowid_columns: Iterable[str]) -> AuditReport:
    watched = {c.lower() for c in rowid_columns} - {"row_id"}
    findings = {}
    for q in program.queries:
        names = identifier_names(q.sql)
        findings[q.name] = sorted({n for n in names if n in watched})
    return AuditReport(findings)


# --- deployment --------------------------------------------------------------

@dataclass
class TestReport:
    __test__ = False  # not a pytest class

    trial_id: str
    metrics: dict[str, float]
    predictions: list[dict[str, Any]]
    importance: dict[str, float]
    program: list[dict[str, str]]
    audit: AuditReport
    n_fit_rows: int
    model_choice: str
    config: dict[str, Any]
    created_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))

    def to_dict(self) -> dict[str, Any]:
        return {
            "trial_id": self.trial_id,
            "model_choice": self.model_choice,
            "config": self.config,
            "metrics": self.metrics,
            "n_fit_rows": self.n_fit_rows,
            "importance": self.importance,
            "audit": self.audit.to_dict(),
            "program": self.program,
            "predictions": self.predictions,
            "created_at": self.created_at,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def render(self) -> str:
        lines = [f"champion {self.trial_id} ({self.model_choice}), refit on {self.n_fit_rows} rows",
                 "test metrics:"]
        lines += [f"  {k}: {v:.6f}" for k, v in self.metrics.items()]
        lines.append("feature importance (normalized split gain):")
        for name, v in sorted(self.importance.items(), key=lambda kv: (-kv[1], kv[0])):
            lines.append(f"  {v:8.4f}  {'#' * int(round(v * 40))} {name}")
        lines.append(self.audit.render())
        lines.append("program:")
        for q in self.program:
            lines.append(f"-- {q['name']}")
            lines.append(q["sql"])
        return "\n".join(lines)


def deploy_champion(ctx: ContextHandle, champion: Champion, *, n_jobs: int = 1,
                    timeout: float | None = None) -> tuple[TestReport, FittedModel]:
    program, cfg = champion.program, champion.config
    if champion.renaming:
        ctx.apply_renaming(SchemaRenaming(**champion.renaming))
    anchor = check_anchoring(program)
    if not anchor.passed:
        raise DeploymentError("invalid_program", anchor.render())
    try:
        kw = {"timeout": timeout} if timeout else {}
        cats = cfg.categorical_features
        X_train = materialize(ctx, program, "train", cats, **kw)
        X_val = materialize(ctx, program, "val", cats, **kw)
        X_test = materialize(ctx, program, "test", cats, **kw)
    except QueryTimeout as e:
        raise DeploymentError("timeout", str(e)) from None
    except (SqlError, ProgramError) as e:
        raise DeploymentError("sql_error", str(e)) from None
    X = X_train.concat(X_val)
    y = np.concatenate([ctx.labels("train"), ctx.labels("val")])
    try:
        model = fit(X, y, cfg, n_jobs=n_jobs)
        scores = model.predict(X_test)
        y_test = ctx.labels("test")
        metrics = bundle_for(ctx.manifest.task_type, scores, y_test)
    except LearnerError as e:
        raise DeploymentError("training_error", f"{type(e).__name__}: {e}") from None
    keys = ctx.split_keys("test")
    preds = [{"row_id": int(r), "entity_id": str(e), "score": float(s)}
             for r, e, s in zip(keys["row_id"], keys["entity"], scores)]
    report = TestReport(
        trial_id=champion.trial_id,
        metrics=metrics.to_dict(),
        predictions=preds,
        importance=model.feature_importance(),
        program=program.to_list(),
        audit=invariance_audit(program, ctx.manifest.rowid_columns),
        n_fit_rows=X.n_rows,
        model_choice=champion.model_choice,
        config=cfg.to_dict(),
    )
    return report, model

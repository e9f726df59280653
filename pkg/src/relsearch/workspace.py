"""Per-rollout evaluation workspace: trial records, per-row predictions, read-only queries."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Sequence

import duckdb
import numpy as np
import pandas as pd

from .errors import DuplicateTrialId
from .relstore import RowSet, _literal, ensure_read_only, fetch_capped

log = logging.getLogger(__name__)

WORKSPACE_ROW_CAP = 500
WORKSPACE_FILE = "workspace.db"

TRIALS_DDL = """
CREATE TABLE IF NOT EXISTS trials (
    trial_id VARCHAR PRIMARY KEY,
    trial_name VARCHAR,
    parent_trial_id VARCHAR,
    created_at TIMESTAMP,
    split VARCHAR,
    model_choice VARCHAR,
    resolved_model_config VARCHAR,
    feature_query_hash VARCHAR,
    feature_block_names VARCHAR,
    primary_metric VARCHAR,
    primary_score DOUBLE,
    metrics_json VARCHAR,
    notes VARCHAR
)"""

PREDICTIONS_DDL = """
CREATE TABLE IF NOT EXISTS eval_predictions (
    trial_id VARCHAR,
    row_id BIGINT,
    entity_id VARCHAR,
    label VARCHAR,
    score DOUBLE,
    predicted_class VARCHAR,
    split VARCHAR,
    eval_cutoff TIMESTAMP,
    PRIMARY KEY (trial_id, row_id)
)"""

TRIAL_COLUMNS = ("trial_id", "trial_name", "parent_trial_id", "created_at", "split", "model_choice",
                 "resolved_model_config", "feature_query_hash", "feature_block_names", "primary_metric",
                 "primary_score", "metrics_json", "notes")
PREDICTION_COLUMNS = ("trial_id", "row_id", "entity_id", "label", "score", "predicted_class", "split",
                      "eval_cutoff")


@dataclass
class TrialRecord:
    trial_id: str
    trial_name: str
    split: str
    model_choice: str
    resolved_model_config: str
    feature_query_hash: str
    feature_block_names: str
    primary_metric: str
    primary_score: float | None
    metrics_json: str
    notes: str = ""
    parent_trial_id: str | None = None
    created_at: datetime | None = None

    @property
    def ok(self) -> bool:
        return self.primary_score is not None

    @property
    def failure_kind(self) -> str | None:
        if self.ok:
            return None
        try:
            return json.loads(self.metrics_json).get("failure_kind")
        except (json.JSONDecodeError, AttributeError):
            return None


@dataclass
class PredictionBlock:
    """Per-row predictions of one trial, column-oriented."""

    row_id: np.ndarray
    entity_id: Sequence[str]
    label: Sequence[str]
    score: np.ndarray
    predicted_class: Sequence[str | None]
    split: str
    eval_cutoff: Sequence

    def __len__(self) -> int:
        return len(self.row_id)

    @classmethod
    def build(cls, keys: pd.DataFrame, labels: np.ndarray, scores: np.ndarray, split: str,
              classification: bool) -> "PredictionBlock":
        if classification:
            label_text = [str(int(v)) for v in labels]
            predicted = ["1" if s >= 0.5 else "0" for s in scores]
        else:
            label_text = [repr(float(v)) for v in labels]
            predicted = [None] * len(scores)
        cutoff = pd.to_datetime(keys["timestamp"], errors="coerce")
        if getattr(cutoff.dt, "tz", None) is not None:
            cutoff = cutoff.dt.tz_convert("UTC").dt.tz_localize(None)
        return cls(keys["row_id"].to_numpy(np.int64), [str(v) for v in keys["entity"]], label_text,
                   np.asarray(scores, dtype=np.float64), predicted, split, list(cutoff))

    def frame(self, trial_id: str) -> pd.DataFrame:
        n = len(self)
        return pd.DataFrame({
            "trial_id": [trial_id] * n,
            "row_id": self.row_id,
            "entity_id": pd.Series(list(self.entity_id), dtype=object),
            "label": pd.Series(list(self.label), dtype=object),
            "score": self.score,
            "predicted_class": pd.Series(list(self.predicted_class), dtype=object),
            "split": [self.split] * n,
            "eval_cutoff": pd.Series(list(self.eval_cutoff), dtype="datetime64[us]"),
        })


class LogicalClock:
    """Deterministic timestamps: a fixed origin plus one second per reading."""

    def __init__(self, origin: datetime = datetime(2000, 1, 1)):
        self.origin = origin
        self.ticks = 0

    def __call__(self) -> datetime:
        t = self.origin + timedelta(seconds=self.ticks)
        self.ticks += 1
        return t


def wall_clock() -> datetime:
    return datetime.now().replace(microsecond=0)


class Workspace:
    """Writable only through :meth:`append_trial`; every other access is read-only."""

    def __init__(self, path: str | Path, *, context_db: str | Path | None = None,
                 clock: Callable[[], datetime] | None = None, query_timeout: float = 60.0):
        self.path = Path(path)
        self.clock = clock or wall_clock
        self.query_timeout = query_timeout
        self._con = duckdb.connect(str(self.path))
        self._con.execute(TRIALS_DDL)
        self._con.execute(PREDICTIONS_DDL)
        if context_db is not None:
            self._con.execute(f"ATTACH {_literal(str(context_db))} AS ctx (READ_ONLY)")
            self._con.execute("SET search_path = 'main,ctx.main'")
        self._con.execute("SET enable_external_access = false")
        if isinstance(self.clock, LogicalClock):  # resume after the trials already on disk
            self.clock.ticks = max(self.clock.ticks, self.n_trials())

    # -- writes -------------------------------------------------------------

    def append_trial(self, trial: TrialRecord, preds: PredictionBlock | None = None) -> None:
        con = self._con
        if con.execute("SELECT count(*) FROM trials WHERE trial_id = ?", [trial.trial_id]).fetchone()[0]:
            raise DuplicateTrialId(f"trial {trial.trial_id} already recorded")
        if trial.created_at is None:
            trial.created_at = self.clock()
        row = asdict(trial)
        con.execute("BEGIN TRANSACTION")
        try:
            con.execute(f"INSERT INTO trials ({', '.join(TRIAL_COLUMNS)}) VALUES "
                        f"({', '.join('?' * len(TRIAL_COLUMNS))})", [row[c] for c in TRIAL_COLUMNS])
            if preds is not None and len(preds):
                frame = preds.frame(trial.trial_id)
                con.register("_new_predictions", frame)
                try:
                    con.execute(f"INSERT INTO eval_predictions SELECT {', '.join(PREDICTION_COLUMNS)} "
                                f"FROM _new_predictions")
                finally:
                    con.unregister("_new_predictions")
            con.execute("COMMIT")
        except BaseException:
            con.execute("ROLLBACK")
            raise

    # -- reads --------------------------------------------------------------

    def query(self, sql: str, *, cap: int = WORKSPACE_ROW_CAP) -> RowSet:
        ensure_read_only(self._con, sql)
        self._con.execute("BEGIN TRANSACTION")
        try:
            return fetch_capped(self._con, sql, cap, self.query_timeout)
        finally:
            self._con.execute("ROLLBACK")

    def trials(self) -> list[TrialRecord]:
        cur = self._con.execute(f"SELECT {', '.join(TRIAL_COLUMNS)} FROM trials ORDER BY created_at, trial_id")
        return [TrialRecord(**dict(zip(TRIAL_COLUMNS, r))) for r in cur.fetchall()]

    def trial(self, trial_id: str) -> TrialRecord | None:
        for t in self.trials():
            if t.trial_id == trial_id:
                return t
        return None

    def n_trials(self) -> int:
        return self._con.execute("SELECT count(*) FROM trials").fetchone()[0]

    def n_predictions(self, trial_id: str | None = None) -> int:
        if trial_id is None:
            return self._con.execute("SELECT count(*) FROM eval_predictions").fetchone()[0]
        return self._con.execute("SELECT count(*) FROM eval_predictions WHERE trial_id = ?",
                                 [trial_id]).fetchone()[0]

    def predictions(self, trial_id: str) -> pd.DataFrame:
        return self._con.execute(
            f"SELECT {', '.join(PREDICTION_COLUMNS)} FROM eval_predictions WHERE trial_id = ? ORDER BY row_id",
            [trial_id]).df()

    def table_frame(self, name: str) -> pd.DataFrame:
        """Full contents of ``trials`` or ``eval_predictions`` in a canonical order."""
        order = {"trials": "trial_id", "eval_predictions": "trial_id, row_id"}[name]
        return self._con.execute(f"SELECT * FROM {name} ORDER BY {order}").df()

    def best_trial(self) -> TrialRecord | None:
        best = None
        for t in self.trials():  # already in created_at order, so ties keep the earliest
            if t.ok and (best is None or t.primary_score > best.primary_score):
                best = t
        return best

    def trial_history(self) -> str:
        trials = self.trials()
        lines = ["TRIAL HISTORY"]
        if not trials:
            lines.append("no trials yet")
            return "\n".join(lines)
        n_ok = sum(t.ok for t in trials)
        lines[0] += f" ({len(trials)} trials: {n_ok} ok, {len(trials) - n_ok} failed)"
        best = self.best_trial()
        for t in trials:
            mark = "*" if best is not None and t.trial_id == best.trial_id else " "
            if t.ok:
                # stored oriented; show MAE on its natural scale
                value = -t.primary_score if t.primary_metric == "mae" else t.primary_score
                score = f"{t.primary_metric}={value:.6f}"
            else:
                score = f"FAILED ({t.failure_kind})"
            lines.append(f"{mark} {t.trial_id}  {t.trial_name}  {t.model_choice}  {score}  "
                         f"[{t.feature_block_names}]")
        return "\n".join(lines)

    def close(self) -> None:
        if self._con is not None:
            self._con.close()
            self._con = None

    def __enter__(self) -> "Workspace":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_workspace(directory: str | Path, **kwargs) -> Workspace:
    return Workspace(Path(directory) / WORKSPACE_FILE, **kwargs)

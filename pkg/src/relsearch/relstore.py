"""Embedded relational context: task manifests, split binding and read-only SQL.

A :class:`ContextHandle` never exposes the task database file directly.  On
open it copies the context tables, the labeled training target (as
``train_table``) and the label-free split keys into a private database file,
then attaches that copy read-only with external file access disabled.  The
validation and test labels live only in Python memory.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, TypeVar

import duckdb
import numpy as np
import pandas as pd

from .errors import (
    CutoffViolation,
    ManifestError,
    MissingColumn,
    MissingTable,
    QueryTimeout,
    ReadOnlyViolation,
    SqlError,
)
from .sqltext import READ_ONLY_KEYWORDS, first_keyword, has_outer_limit, tokenize

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
TASK_TYPES = {"binary_classification": "auroc", "regression": "mae"}
EXPLORATION_ROW_CAP = 200
DEFAULT_EXPLORATION_TIMEOUT = 60.0
_KEY_SCHEMA = "_keys"
_ALLOWED_PRAGMAS = {"table_info", "show_tables", "show_tables_expanded", "show", "database_list"}

T = TypeVar("T")


@dataclass(frozen=True)
class TargetSpec:
    table: str
    entity_col: str
    timestamp_col: str
    target_col: str

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TargetSpec":
        try:
            return cls(str(data["table"]), str(data["entity_col"]),
                       str(data["timestamp_col"]), str(data["target_col"]))
        except KeyError as e:
            raise ManifestError(f"target spec missing field {e.args[0]!r}") from None


@dataclass(frozen=True)
class TaskManifest:
    database_uri: str
    context_tables: tuple[str, ...]
    train: TargetSpec
    val: TargetSpec
    test: TargetSpec
    task_type: str
    primary_metric: str
    rowid_columns: tuple[str, ...] = ()
    rng_seed: int = 0
    dataset_name: str = ""
    task_description: str = ""

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ManifestError(f"unknown task_type {self.task_type!r}")
        if TASK_TYPES[self.task_type] != self.primary_metric:
            raise ManifestError(
                f"task_type {self.task_type} requires primary_metric "
                f"{TASK_TYPES[self.task_type]}, got {self.primary_metric!r}")
        if not self.context_tables:
            raise ManifestError("context_tables is empty")

    @property
    def is_classification(self) -> bool:
        return self.task_type == "binary_classification"

    def target(self, split: str) -> TargetSpec:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: str | os.PathLike | None = None) -> "TaskManifest":
        try:
            uri = str(data["database_uri"])
            if base_dir is not None and not os.path.isabs(uri):
                uri = str(Path(base_dir) / uri)
            return cls(
                database_uri=uri,
                context_tables=tuple(data["context_tables"]),
                train=TargetSpec.from_dict(data["train"]),
                val=TargetSpec.from_dict(data["val"]),
                test=TargetSpec.from_dict(data["test"]),
                task_type=data["task_type"],
                primary_metric=data["primary_metric"],
                rowid_columns=tuple(data.get("rowid_columns", ())),
                rng_seed=int(data.get("rng_seed", 0)),
                dataset_name=data.get("dataset_name", ""),
                task_description=data.get("task_description", ""),
            )
        except KeyError as e:
            raise ManifestError(f"manifest missing field {e.args[0]!r}") from None

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TaskManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ManifestError(f"cannot read manifest {path}: {e}") from e
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self, relative_to: str | os.PathLike | None = None) -> dict[str, Any]:
        uri = self.database_uri
        if relative_to is not None:
            uri = os.path.relpath(uri, relative_to)
        return {
            "database_uri": uri,
            "context_tables": list(self.context_tables),
            **{s: vars(self.target(s)).copy() for s in SPLITS},
            "task_type": self.task_type,
            "primary_metric": self.primary_metric,
            "rowid_columns": list(self.rowid_columns),
            "rng_seed": self.rng_seed,
            "dataset_name": self.dataset_name,
            "task_description": self.task_description,
        }

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(relative_to=path.parent), indent=2) + "\n")


@dataclass(frozen=True)
class SchemaRenaming:
    """Original -> agent-visible names for tables, columns and role columns."""

    tables: dict[str, str] = field(default_factory=dict)
    columns: dict[str, dict[str, str]] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)

    def table(self, name: str) -> str:
        return self.tables.get(name, name)

    def column(self, table: str, col: str) -> str:
        return self.columns.get(table, {}).get(col, col)

    def role(self, col: str) -> str:
        return self.roles.get(col, col)

    def to_dict(self) -> dict[str, Any]:
        return {"tables": self.tables, "columns": self.columns, "roles": self.roles}


@dataclass
class RowSet:
    columns: list[str]
    rows: list[tuple]
    truncated: bool = False

    def records(self) -> list[dict[str, Any]]:
        return [dict(zip(self.columns, r)) for r in self.rows]

    def render(self) -> str:
        body = json.dumps(self.records(), default=str, indent=None)
        if self.truncated:
            body += f"\n(truncated to {len(self.rows)} rows; add a LIMIT clause to control the size)"
        return body


@dataclass
class ColumnInfo:
    name: str
    type: str


@dataclass
class TableInfo:
    name: str
    columns: list[ColumnInfo]
    primary_key: list[str]
    foreign_keys: list[dict[str, Any]]
    row_count: int


@dataclass
class SchemaReport:
    tables: list[TableInfo]

    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def render(self) -> str:
        lines = []
        for t in self.tables:
            lines.append(f"TABLE {t.name} ({t.row_count} rows)")
            for c in t.columns:
                lines.append(f"  {c.name} {c.type}")
            if t.primary_key:
                lines.append(f"  PRIMARY KEY ({', '.join(t.primary_key)})")
            for fk in t.foreign_keys:
                lines.append(f"  FOREIGN KEY ({', '.join(fk['columns'])}) "
                             f"REFERENCES {fk['table']}({', '.join(fk['ref_columns'])})")
        return "\n".join(lines)


def _quote(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def _literal(text: str) -> str:
    return "'" + text.replace("'", "''") + "'"


def ensure_read_only(con: duckdb.DuckDBPyConnection, sql: str) -> None:
    """Reject anything but a single read-only statement.

    Keyword allowlist first, then the engine's own statement classification.
    """
    kw = first_keyword(sql)
    if kw is None:
        raise SqlError("empty statement")
    if kw not in READ_ONLY_KEYWORDS:
        raise ReadOnlyViolation(f"{kw.upper()} statements are not allowed; only read-only queries can run here")
    if kw == "pragma":
        names = [t.name for t in tokenize(sql) if t.name]
        if len(names) < 2 or names[1] not in _ALLOWED_PRAGMAS:
            raise ReadOnlyViolation("only schema PRAGMAs (table_info, show_tables) are allowed")
    try:
        statements = con.extract_statements(sql)
    except duckdb.Error as e:
        raise SqlError(str(e)) from None
    if len(statements) != 1:
        raise ReadOnlyViolation("exactly one statement per call is allowed")
    if statements[0].type not in (duckdb.StatementType.SELECT, duckdb.StatementType.EXPLAIN):
        raise ReadOnlyViolation(f"statement type {statements[0].type.name} is not read-only")


def run_with_timeout(con: duckdb.DuckDBPyConnection, fn: Callable[[], T], timeout: float | None,
                     label: str | None = None) -> T:
    timer = None
    if timeout:
        timer = threading.Timer(timeout, con.interrupt)
        timer.daemon = True
        timer.start()
    try:
        return fn()
    except duckdb.InterruptException:
        raise QueryTimeout(f"query exceeded {timeout:g}s", label) from None
    except duckdb.Error as e:
        raise SqlError(str(e), label) from None
    finally:
        if timer is not None:
            timer.cancel()


def fetch_capped(con: duckdb.DuckDBPyConnection, sql: str, cap: int, timeout: float | None) -> RowSet:
    limited = has_outer_limit(sql)

    def go():
        cur = con.execute(sql)
        cols = [d[0] for d in cur.description] if cur.description else []
        if limited:
            return cols, cur.fetchall(), False
        rows = cur.fetchmany(cap + 1)
        return cols, rows[:cap], len(rows) > cap

    cols, rows, truncated = run_with_timeout(con, go, timeout)
    return RowSet(cols, rows, truncated)


class ContextHandle:
    """One worker's view of the augmented context database."""

    def __init__(self, manifest: TaskManifest, *, exploration_timeout: float = DEFAULT_EXPLORATION_TIMEOUT,
                 renaming: SchemaRenaming | None = None):
        self.manifest = manifest
        self.exploration_timeout = exploration_timeout
        self.renaming = renaming or SchemaRenaming()
        self.split: str | None = None
        self._tmpdir = Path(tempfile.mkdtemp(prefix="relsearch_ctx_"))
        self._builds = 0
        self._con: duckdb.DuckDBPyConnection | None = None
        try:
            self._load_source()
            self._build()
        except BaseException:
            self.close()
            raise

    # -- construction -----------------------------------------------------

    def _load_source(self) -> None:
        m = self.manifest
        db = Path(m.database_uri)
        if not db.is_file():
            raise ManifestError(f"database file not found: {db}")
        src = duckdb.connect()
        try:
            src.execute(f"ATTACH {_literal(str(db))} AS src (READ_ONLY)")
            cols = src.execute(
                "SELECT table_name, column_name, data_type FROM information_schema.columns "
                "WHERE table_catalog = 'src' AND table_schema = 'main' ORDER BY table_name, ordinal_position"
            ).fetchall()
            schema: dict[str, list[tuple[str, str]]] = {}
            for t, c, ty in cols:
                schema.setdefault(t, []).append((c, ty))
            by_lower = {t.lower(): t for t in schema}

            def table(name: str) -> str:
                if name.lower() not in by_lower:
                    raise MissingTable(f"table {name!r} not found in {db.name}")
                return by_lower[name.lower()]

            def column(tbl: str, name: str) -> str:
                for c, _ in schema[tbl]:
                    if c.lower() == name.lower():
                        return c
                raise MissingColumn(f"column {name!r} not found in table {tbl!r}")

            self.context_tables = [table(t) for t in m.context_tables]
            self.source_schema = {t: schema[t] for t in self.context_tables}
            self._targets: dict[str, pd.DataFrame] = {}
            self._target_sql: dict[str, str] = {}
            for split in SPLITS:
                spec = m.target(split)
                tbl = table(spec.table)
                e, ts, y = (column(tbl, spec.entity_col), column(tbl, spec.timestamp_col),
                            column(tbl, spec.target_col))
                self._target_sql[split] = (
                    f"SELECT CAST(row_number() OVER (ORDER BY rowid) - 1 AS BIGINT) AS row_id, "
                    f"{_quote(e)} AS e, {_quote(ts)} AS ts, {_quote(y)} AS y "
                    f"FROM src.main.{_quote(tbl)} ORDER BY rowid")
                frame = src.execute(self._target_sql[split]).df()
                assert (frame["row_id"].to_numpy() == np.arange(len(frame))).all()
                self._targets[split] = frame
            for a, b in (("train", "val"), ("val", "test")):
                ok = src.execute(
                    f"SELECT (SELECT max(ts) FROM ({self._target_sql[a]})) < "
                    f"(SELECT min(ts) FROM ({self._target_sql[b]}))").fetchone()[0]
                if ok is False:
                    raise CutoffViolation(f"{a} timestamps are not strictly before {b} timestamps")
            cons = src.execute(
                "SELECT table_name, constraint_type, constraint_column_names, referenced_table, "
                "referenced_column_names FROM duckdb_constraints() WHERE database_name = 'src' "
                "AND constraint_type IN ('PRIMARY KEY', 'FOREIGN KEY')").fetchall()
            self._constraints = cons
        finally:
            src.close()

    def _build(self) -> None:
        """Write the sanitized context copy and (re)attach it read-only."""
        if self._con is not None:
            self._con.close()
            self._con = None
        m, rn = self.manifest, self.renaming
        self._builds += 1
        path = self._tmpdir / f"context_{self._builds}.duckdb"
        e, ts, y = self.entity_col, self.timestamp_col, self.target_col
        w = duckdb.connect(str(path))
        try:
            w.execute(f"ATTACH {_literal(m.database_uri)} AS src (READ_ONLY)")
            for tbl in self.context_tables:
                sel = ", ".join(f"{_quote(c)} AS {_quote(rn.column(tbl, c))}" for c, _ in self.source_schema[tbl])
                w.execute(f"CREATE TABLE {_quote(rn.table(tbl))} AS SELECT {sel} "
                          f"FROM src.main.{_quote(tbl)} ORDER BY rowid")
            w.execute(f"CREATE TABLE train_table AS SELECT e AS {_quote(e)}, ts AS {_quote(ts)}, "
                      f"y AS {_quote(y)} FROM ({self._target_sql['train']}) ORDER BY row_id")
            w.execute(f"CREATE SCHEMA {_KEY_SCHEMA}")
            for split in SPLITS:
                w.execute(
                    f"CREATE TABLE {_KEY_SCHEMA}.{split} AS SELECT row_id, e AS {_quote(e)}, "
                    f"ts AS {_quote(ts)} FROM ({self._target_sql[split]}) ORDER BY row_id")
                n = w.execute(f"SELECT count(*) FROM {_KEY_SCHEMA}.{split}").fetchone()[0]
                assert n == len(self._targets[split])
            w.execute("DETACH src")
        finally:
            w.close()
        con = duckdb.connect()
        con.execute(f"ATTACH {_literal(str(path))} AS ctx (READ_ONLY)")
        con.execute("USE ctx")
        con.execute("SET enable_external_access = false")
        self._con = con
        self.database_path = path
        if self.split is not None:
            self.bind_split(self.split)

    def apply_renaming(self, renaming: SchemaRenaming) -> None:
        self.renaming = renaming
        self._build()

    # -- role names as seen by the agent -----------------------------------

    @property
    def entity_col(self) -> str:
        return self.renaming.role(self.manifest.train.entity_col)

    @property
    def timestamp_col(self) -> str:
        return self.renaming.role(self.manifest.train.timestamp_col)

    @property
    def target_col(self) -> str:
        return self.renaming.role(self.manifest.train.target_col)

    @property
    def connection(self) -> duckdb.DuckDBPyConnection:
        if self._con is None:
            raise RuntimeError("context handle is closed")
        return self._con

    # -- splits -----------------------------------------------------------

    def bind_split(self, split: str) -> None:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        self.connection.execute(
            f"CREATE OR REPLACE TEMP VIEW eval_table AS SELECT * FROM ctx.{_KEY_SCHEMA}.{split}")
        self.split = split

    def n_rows(self, split: str) -> int:
        return len(self._targets[split])

    def split_keys(self, split: str) -> pd.DataFrame:
        """row_id, entity and timestamp per target row (no labels)."""
        return self._targets[split][["row_id", "e", "ts"]].rename(columns={"e": "entity", "ts": "timestamp"})

    def labels(self, split: str) -> np.ndarray:
        y = self._targets[split]["y"].to_numpy()
        try:
            return y.astype(np.float64)
        except (TypeError, ValueError):
            return y

    # -- queries ----------------------------------------------------------

    def execute_exploration(self, sql: str, *, cap: int = EXPLORATION_ROW_CAP,
                            timeout: float | None = None) -> RowSet:
        ensure_read_only(self.connection, sql)
        return fetch_capped(self.connection, sql, cap, timeout or self.exploration_timeout)

    def run_feature_query(self, sql: str, *, timeout: float | None, label: str | None = None
                          ) -> tuple[list[str], list[str], pd.DataFrame]:
        """Run one SELECT; returns (column names, engine type ids, frame)."""
        try:
            ensure_read_only(self.connection, sql)
        except (ReadOnlyViolation, SqlError) as e:
            raise SqlError(str(e), label) from None

        def go():
            rel = self.connection.sql(sql)
            if rel is None:
                raise SqlError("statement produced no result set", label)
            return list(rel.columns), [t.id for t in rel.types], rel.df()

        return run_with_timeout(self.connection, go, timeout, label)

    def visible_tables(self) -> list[str]:
        names = [r[0] for r in self.connection.execute(
            "SELECT table_name FROM information_schema.tables WHERE table_catalog = 'ctx' "
            "AND table_schema = 'main' ORDER BY table_name").fetchall()]
        if self.split is not None:
            names.append("eval_table")
        return names

    def get_table_info(self, table: str | None = None) -> SchemaReport:
        visible = self.visible_tables()
        if table is not None:
            match = [t for t in visible if t.lower() == table.lower()]
            if not match:
                raise MissingTable(f"table {table!r} not found")
            visible = match
        # constraint names are stored in original terms; translate to visible ones
        orig_of = {self.renaming.table(t): t for t in self.context_tables}
        out = []
        for name in visible:
            desc = self.connection.execute(f"DESCRIBE SELECT * FROM {_quote(name)}").fetchall()
            count = self.connection.execute(f"SELECT count(*) FROM {_quote(name)}").fetchone()[0]
            pk, fks = [], []
            orig = orig_of.get(name)
            if orig is not None:
                for tbl, kind, cols, ref_tbl, ref_cols in self._constraints:
                    if tbl != orig:
                        continue
                    cols = [self.renaming.column(tbl, c) for c in cols]
                    if kind == "PRIMARY KEY":
                        pk = cols
                    else:
                        fks.append({"columns": cols, "table": self.renaming.table(ref_tbl),
                                    "ref_columns": [self.renaming.column(ref_tbl, c) for c in ref_cols]})
            out.append(TableInfo(name, [ColumnInfo(r[0], r[1]) for r in desc], pk, fks, int(count)))
        return SchemaReport(out)

    # -- lifecycle --------------------------------------------------------

    def close(self) -> None:
        if self._con is not None:
            self._con.close()
            self._con = None
        shutil.rmtree(self._tmpdir, ignore_errors=True)

    def __enter__(self) -> "ContextHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_context(manifest: TaskManifest, **kwargs) -> ContextHandle:
    return ContextHandle(manifest, **kwargs)

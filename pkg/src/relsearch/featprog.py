"""SQL feature programs: parsing, anchoring checks, hashing and materialization."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import pandas as pd

from .errors import DuplicateName, DuplicateRowId, EmptyProgram, JsonError, SqlError
from .relstore import ContextHandle
from .sqltext import first_keyword, outer_select_list, references, strip_trailing_semicolons

log = logging.getLogger(__name__)

DEFAULT_QUERY_TIMEOUT = 300.0

_NUMERIC_TYPES = {
    "boolean", "tinyint", "smallint", "integer", "bigint", "hugeint",
    "utinyint", "usmallint", "uinteger", "ubigint", "uhugeint",
    "float", "double", "decimal",
}
_TEXT_TYPES = {"varchar", "enum", "uuid", "char", "blob", "bit"}
_TEMPORAL_TYPES = {"date", "timestamp", "timestamp with time zone", "timestamp_s", "timestamp_ms",
                   "timestamp_ns", "time"}


@dataclass(frozen=True)
class FeatureQuery:
    name: str
    sql: str


@dataclass(frozen=True)
class FeatureProgram:
    queries: tuple[FeatureQuery, ...]

    def __post_init__(self):
        if not self.queries:
            raise EmptyProgram("a feature program needs at least one query")
        seen = set()
        for q in self.queries:
            if not q.name:
                raise JsonError("feature query name must be nonempty")
            if q.name in seen:
                raise DuplicateName(f"duplicate feature query name {q.name!r}")
            seen.add(q.name)

    @property
    def names(self) -> list[str]:
        return [q.name for q in self.queries]

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_list(), **kwargs)

    def to_list(self) -> list[dict[str, str]]:
        return [{"name": q.name, "sql": q.sql} for q in self.queries]

    def __len__(self) -> int:
        return len(self.queries)


def parse_program(json_text: str | list) -> FeatureProgram:
    """Parse ``[{"name": ..., "sql": ...}, ...]`` preserving order."""
    if isinstance(json_text, str):
        try:
            data = json.loads(json_text)
        except json.JSONDecodeError as e:
            raise JsonError(f"feature_queries_json is not valid JSON: {e}") from None
    else:
        data = json_text
    if not isinstance(data, list):
        raise JsonError("feature_queries_json must be a JSON array of {name, sql} objects")
    queries = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or not isinstance(item.get("name"), str) or not isinstance(item.get("sql"), str):
            raise JsonError(f"entry {i} must be an object with string fields 'name' and 'sql'")
        queries.append(FeatureQuery(item["name"], item["sql"]))
    return FeatureProgram(tuple(queries))


def program_hash(program: FeatureProgram) -> str:
    payload = json.dumps([[q.name, q.sql] for q in program.queries], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# --- anchoring ----------------------------------------------------------

OK = "ok"
MISSING_ROW_ID = "missing_row_id"
NOT_ANCHORED = "not_anchored_on_eval_table"
PARSE_ERROR = "parse_error"


@dataclass
class QueryVerdict:
    name: str
    verdict: str
    message: str = ""


@dataclass
class AnchorReport:
    verdicts: list[QueryVerdict]

    @property
    def passed(self) -> bool:
        return all(v.verdict == OK for v in self.verdicts)

    def failures(self) -> list[QueryVerdict]:
        return [v for v in self.verdicts if v.verdict != OK]

    def render(self) -> str:
        return "\n".join(f"{v.name}: {v.verdict}" + (f" ({v.message})" if v.message else "")
                         for v in self.verdicts)


def _check_query(q: FeatureQuery) -> QueryVerdict:
    kw = first_keyword(q.sql)
    if kw not in ("select", "with", "from"):
        return QueryVerdict(q.name, PARSE_ERROR, "feature queries must be a single SELECT statement")
    if not references(q.sql, "eval_table"):
        return QueryVerdict(q.name, NOT_ANCHORED, "query must read from eval_table")
    select_list = outer_select_list(q.sql)
    if select_list is None:
        return QueryVerdict(q.name, PARSE_ERROR, "no top-level SELECT found")
    has_row_id = any(t.name == "row_id" or (t.kind == "op" and t.text == "*") for t in select_list)
    if not has_row_id:
        return QueryVerdict(q.name, MISSING_ROW_ID, "outer SELECT list must include row_id")
    return QueryVerdict(q.name, OK)


def check_anchoring(program: FeatureProgram) -> AnchorReport:
    return AnchorReport([_check_query(q) for q in program.queries])


# --- materialization ----------------------------------------------------

@dataclass
class FeatureMatrix:
    row_ids: np.ndarray
    columns: list[str]
    data: dict[str, np.ndarray]  # float64, or object arrays of str/None for categoricals
    categoricals: frozenset[str] = frozenset()
    query_rows: dict[str, int] = field(default_factory=dict)
    arity: dict[str, int] = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return len(self.row_ids)

    @property
    def n_cols(self) -> int:
        return len(self.columns)

    def is_categorical(self, col: str) -> bool:
        return col in self.categoricals

    def missing_mask(self, col: str) -> np.ndarray:
        v = self.data[col]
        if v.dtype == object:
            return np.array([x is None for x in v], dtype=bool)
        return np.isnan(v)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({c: self.data[c] for c in self.columns}, index=self.row_ids)

    def concat(self, other: "FeatureMatrix") -> "FeatureMatrix":
        """Stack rows of two matrices from the same program (for train+val refit)."""
        if self.columns != other.columns:
            raise ValueError("cannot concatenate matrices with different columns")
        data = {}
        for c in self.columns:
            a, b = self.data[c], other.data[c]
            if (a.dtype == object) != (b.dtype == object):
                a, b = a.astype(object), b.astype(object)
            data[c] = np.concatenate([a, b])
        return FeatureMatrix(
            row_ids=np.arange(self.n_rows + other.n_rows, dtype=np.int64),
            columns=list(self.columns), data=data,
            categoricals=self.categoricals | other.categoricals,
            arity=dict(self.arity))

    @classmethod
    def from_columns(cls, columns: dict[str, Iterable], categoricals: Iterable[str] = ()) -> "FeatureMatrix":
        """Build a matrix directly from arrays (tests, ad-hoc use)."""
        cats = frozenset(categoricals)
        data = {}
        for name, values in columns.items():
            if name in cats:
                data[name] = np.array([None if v is None else str(v) for v in values], dtype=object)
            else:
                data[name] = np.array([np.nan if v is None else v for v in values], dtype=np.float64)
        n = len(next(iter(data.values()))) if data else 0
        return cls(np.arange(n, dtype=np.int64), list(data), data, cats)


def _as_float(values: pd.Series, type_id: str) -> np.ndarray:
    if type_id in _TEMPORAL_TYPES:
        ts = pd.to_datetime(values, errors="coerce", utc=True)
        out = (ts - pd.Timestamp(0, tz="UTC")).dt.total_seconds()
        return out.to_numpy(dtype=np.float64, na_value=np.nan)
    if type_id == "interval":
        return pd.to_timedelta(values, errors="coerce").dt.total_seconds().to_numpy(dtype=np.float64, na_value=np.nan)
    return pd.to_numeric(values, errors="coerce").astype("float64").to_numpy(na_value=np.nan)


def _as_text(values: pd.Series) -> np.ndarray:
    out = np.empty(len(values), dtype=object)
    for i, v in enumerate(values.tolist()):
        out[i] = None if v is None or (isinstance(v, float) and np.isnan(v)) or v is pd.NaT else str(v)
    return out


def materialize(ctx: ContextHandle, program: FeatureProgram, split: str,
                categoricals: Iterable[str] = (), *, timeout: float | None = DEFAULT_QUERY_TIMEOUT
                ) -> FeatureMatrix:
    """Run every query against ``split`` and align outputs on the split's row_ids.

    Queries run sequentially; assembly order follows program order.
    """
    declared = set(categoricals)
    ctx.bind_split(split)
    m = ctx.n_rows(split)
    columns: list[str] = []
    data: dict[str, np.ndarray] = {}
    cats: set[str] = set()
    query_rows: dict[str, int] = {}
    arity: dict[str, int] = {}
    for q in program.queries:
        sql = strip_trailing_semicolons(q.sql)
        names, types, frame = ctx.run_feature_query(sql, timeout=timeout, label=q.name)
        lowered = [n.lower() for n in names]
        if "row_id" not in lowered:
            raise SqlError("result has no row_id column", q.name)
        if lowered.count("row_id") > 1:
            raise SqlError("result has more than one row_id column", q.name)
        rid_pos = lowered.index("row_id")
        rid = pd.to_numeric(frame.iloc[:, rid_pos], errors="coerce").to_numpy(dtype=np.float64, na_value=np.nan)
        keep = ~np.isnan(rid)
        rid_int = rid[keep].astype(np.int64)
        in_range = (rid_int >= 0) & (rid_int < m)
        if not in_range.all():
            log.warning("query %s returned %d rows with unknown row_id; dropped", q.name, int((~in_range).sum()))
        positions = np.flatnonzero(keep)[in_range]
        rid_int = rid_int[in_range]
        counts = np.bincount(rid_int, minlength=m)
        if (counts > 1).any():
            dup = int(np.flatnonzero(counts > 1)[0])
            raise DuplicateRowId(f"row_id {dup} appears {int(counts[dup])} times; "
                                 "each feature query must return at most one row per row_id", q.name)
        query_rows[q.name] = int(len(rid_int))
        d_q = 0
        for j, (col, type_id) in enumerate(zip(names, types)):
            if j == rid_pos:
                continue
            out_name = f"{q.name}__{col}"
            if out_name in data:
                raise SqlError(f"duplicate output column {col!r}", q.name)
            series = frame.iloc[:, j]
            if out_name in declared or col in declared or type_id in _TEXT_TYPES:
                src = _as_text(series)
                full = np.full(m, None, dtype=object)
                cats.add(out_name)
            else:
                if type_id not in _NUMERIC_TYPES and type_id not in _TEMPORAL_TYPES and type_id != "interval":
                    src = _as_text(series)
                    full = np.full(m, None, dtype=object)
                    cats.add(out_name)
                else:
                    src = _as_float(series, type_id)
                    full = np.full(m, np.nan, dtype=np.float64)
            full[rid_int] = src[positions]
            data[out_name] = full
            columns.append(out_name)
            d_q += 1
        arity[q.name] = d_q
    produced = set(columns) | {c.split("__", 1)[1] for c in columns}
    unknown = declared - produced
    if unknown:
        log.warning("categorical_features not produced by the program: %s", sorted(unknown))
    return FeatureMatrix(np.arange(m, dtype=np.int64), columns, data, frozenset(cats), query_rows, arity)

"""Synthetic relational tasks with exact ground truth.

Two families:

* directed triangle membership over random graphs stored as an edge table
  ``R(src, dst)``, optionally with self-loops that make the naive three-way
  self-join over-count;
* a parent/child co-occurrence task whose label depends on two child columns
  jointly while every single-column aggregate is identical across classes.

Each generator writes a task directory holding ``task.duckdb``,
``manifest.json`` and reference feature programs under ``fixtures/``.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import duckdb
import numpy as np
import pandas as pd

from .errors import DegenerateLabels
from .relstore import SPLITS, TargetSpec, TaskManifest

log = logging.getLogger(__name__)

DB_FILE = "task.duckdb"
MANIFEST_FILE = "manifest.json"
FIXTURE_DIR = "fixtures"
MAX_RESEEDS = 20
TRIANGLE_VALIDATION_BUDGET = 30
TRIANGLE_PREFIX = "triangle_psl"

# one constant prediction time per split keeps the chronological-split check satisfied
SPLIT_TIMES = {"train": "2000-01-01", "val": "2000-01-02", "test": "2000-01-03"}


# --- oracles -----------------------------------------------------------------

def _adjacency(edges: Iterable[tuple[int, int]]) -> dict[int, set[int]]:
    out: dict[int, set[int]] = defaultdict(set)
    for s, d in edges:
        out[int(s)].add(int(d))
    return out


def label_proper_cycle(edges: Iterable[tuple[int, int]], nodes: Iterable[int]) -> dict[int, int]:
    """1 iff the node lies on a directed 3-cycle through two other distinct nodes."""
    out = _adjacency(edges)
    labels = {}
    for x in nodes:
        hit = 0
        for y in out.get(x, ()):
            if y == x:
                continue
            for z in out.get(y, ()):
                if z != x and z != y and x in out.get(z, ()):
                    hit = 1
                    break
            if hit:
                break
        labels[int(x)] = hit
    return labels


def label_three_walk(edges: Iterable[tuple[int, int]], nodes: Iterable[int]) -> dict[int, int]:
    """1 iff some closed walk x->y->z->x exists, self-loops allowed."""
    out = _adjacency(edges)
    labels = {}
    for x in nodes:
        labels[int(x)] = int(any(x in out.get(z, ()) for y in out.get(x, ()) for z in out.get(y, ())))
    return labels


# --- triangle tasks ----------------------------------------------------------

@dataclass(frozen=True)
class TriangleSpec:
    n: int = 300
    p: float = 0.02
    p_sl: float = 0.0
    n_train_graphs: int = 5
    n_val_graphs: int = 2
    n_test_graphs: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("n must be at least 3")
        for name in ("p", "p_sl"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if min(self.n_train_graphs, self.n_val_graphs, self.n_test_graphs) < 1:
            raise ValueError("every split needs at least one graph")

    def graph_counts(self) -> dict[str, int]:
        return {"train": self.n_train_graphs, "val": self.n_val_graphs, "test": self.n_test_graphs}


def sample_triangle_graphs(spec: TriangleSpec, seed: int) -> tuple[pd.DataFrame, dict[str, pd.DataFrame]]:
    """Edges of all graphs plus per-split node/label frames."""
    rng = np.random.default_rng(seed)
    n = spec.n
    edge_parts, targets = [], {}
    g = 0
    for split, count in spec.graph_counts().items():
        nodes_split, labels_split = [], []
        for _ in range(count):
            offset = g * n
            adj = rng.random((n, n)) < spec.p
            np.fill_diagonal(adj, False)
            loops = rng.random(n) < spec.p_sl
            adj[np.arange(n), np.arange(n)] = loops
            src, dst = np.nonzero(adj)
            edges = np.column_stack([src + offset, dst + offset])
            nodes = np.arange(n) + offset
            lab = label_proper_cycle(map(tuple, edges), nodes)
            edge_parts.append(edges)
            nodes_split.append(nodes)
            labels_split.append([lab[int(v)] for v in nodes])
            g += 1
        targets[split] = pd.DataFrame({
            "node_id": np.concatenate(nodes_split).astype(np.int64),
            "timestamp": pd.Timestamp(SPLIT_TIMES[split]),
            "label": np.concatenate(labels_split).astype(np.int64),
        })
    edges = np.concatenate(edge_parts) if edge_parts else np.empty((0, 2), dtype=np.int64)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    frame = pd.DataFrame({"src": edges[order, 0].astype(np.int64), "dst": edges[order, 1].astype(np.int64)})
    return frame, targets


def _check_balance(targets: dict[str, pd.DataFrame]) -> str | None:
    for split, frame in targets.items():
        if frame["label"].nunique() < 2:
            return split
    return None


def _write_database(path: Path, tables: dict[str, pd.DataFrame], ddl: dict[str, str]) -> None:
    if path.exists():
        path.unlink()
    con = duckdb.connect(str(path))
    try:
        for name, frame in tables.items():
            con.register("_frame", frame)
            con.execute(ddl[name])
            con.execute(f'INSERT INTO "{name}" SELECT * FROM _frame')
            con.unregister("_frame")
        con.execute("CHECKPOINT")
    finally:
        con.close()


def _target_ddl(entity: str, entity_type: str) -> str:
    return f'({entity} {entity_type}, "timestamp" TIMESTAMP, label BIGINT)'


def _write_fixtures(task_dir: Path, programs: dict[str, list[dict[str, str]]]) -> None:
    fx = task_dir / FIXTURE_DIR
    fx.mkdir(parents=True, exist_ok=True)
    for name, queries in programs.items():
        (fx / f"{name}.json").write_text(json.dumps(queries, indent=2) + "\n")


def _manifest(task_dir: Path, context_tables: list[str], entity: str, *, rowid_columns=(), seed: int,
              dataset_name: str, description: str) -> TaskManifest:
    specs = {s: TargetSpec(f"__target_{s}", entity, "timestamp", "label") for s in SPLITS}
    return TaskManifest(
        database_uri=str(task_dir / DB_FILE), context_tables=tuple(context_tables),
        train=specs["train"], val=specs["val"], test=specs["test"],
        task_type="binary_classification", primary_metric="auroc",
        rowid_columns=tuple(rowid_columns), rng_seed=seed, dataset_name=dataset_name,
        task_description=description)


CYCLE3_RAW = """WITH cycle3 AS (
  SELECT e1.src AS node_id, COUNT(*) AS cycle3_cnt
  FROM R e1
  JOIN R e2 ON e2.src = e1.dst
  JOIN R e3 ON e3.src = e2.dst AND e3.dst = e1.src
  GROUP BY e1.src
)
SELECT e.row_id, COALESCE(c.cycle3_cnt, 0) AS cycle3_cnt
FROM eval_table e LEFT JOIN cycle3 c USING (node_id)"""

CYCLE3_FILTERED = """WITH edges AS (SELECT src, dst FROM R WHERE src != dst),
cycle3 AS (
  SELECT e1.src AS node_id, COUNT(*) AS cycle3_cnt
  FROM edges e1
  JOIN edges e2 ON e2.src = e1.dst
  JOIN edges e3 ON e3.src = e2.dst AND e3.dst = e1.src
  GROUP BY e1.src
)
SELECT e.row_id, COALESCE(c.cycle3_cnt, 0) AS cycle3_cnt
FROM eval_table e LEFT JOIN cycle3 c USING (node_id)"""

DEGREES = """SELECT e.row_id,
  (SELECT COUNT(*) FROM R WHERE R.src = e.node_id) AS out_degree,
  (SELECT COUNT(*) FROM R WHERE R.dst = e.node_id) AS in_degree
FROM eval_table e"""


def triangle_programs() -> dict[str, list[dict[str, str]]]:
    return {
        "cycle3_raw": [{"name": "cycle3", "sql": CYCLE3_RAW}],
        "cycle3_filtered": [{"name": "cycle3", "sql": CYCLE3_FILTERED}],
        "degrees": [{"name": "degrees", "sql": DEGREES}],
    }


def gen_triangle_task(spec: TriangleSpec, out_dir: str | Path) -> TaskManifest:
    task_dir = Path(out_dir)
    task_dir.mkdir(parents=True, exist_ok=True)
    for attempt in range(MAX_RESEEDS):
        seed = spec.seed + attempt
        edges, targets = sample_triangle_graphs(spec, seed)
        bad = _check_balance(targets)
        if bad is None:
            break
        log.warning("seed %d gave single-class %s labels; resampling", seed, bad)
    else:
        raise DegenerateLabels(f"no balanced sample after {MAX_RESEEDS} seeds starting at {spec.seed}")
    tables = {"R": edges, **{f"__target_{s}": targets[s] for s in SPLITS}}
    ddl = {"R": 'CREATE TABLE "R" (src BIGINT, dst BIGINT)'}
    for s in SPLITS:
        ddl[f"__target_{s}"] = f'CREATE TABLE "__target_{s}" {_target_ddl("node_id", "BIGINT")}'
    _write_database(task_dir / DB_FILE, tables, ddl)
    manifest = _manifest(
        task_dir, ["R"], "node_id", seed=seed, dataset_name=f"{TRIANGLE_PREFIX}{spec.p_sl:g}",
        description="Predict whether each node of a directed graph belongs to a directed triangle. "
                    "R(src, dst) lists directed edges; graphs are disjoint and node ids are unique.")
    manifest.save(task_dir / MANIFEST_FILE)
    _write_fixtures(task_dir, triangle_programs())
    (task_dir / "spec.json").write_text(json.dumps({"kind": "triangle", **vars(spec), "seed_used": seed},
                                                   indent=2) + "\n")
    return manifest



def default_validation_budget(manifest: TaskManifest) -> int | None:
    """Trial budget used when the caller gives none: capped for triangle tasks, open otherwise."""
    if (manifest.dataset_name or "").startswith(TRIANGLE_PREFIX):
        return TRIANGLE_VALIDATION_BUDGET
    return None


# --- co-occurrence task ------------------------------------------------------

@dataclass(frozen=True)
class CooccurrenceSpec:
    n_entities: int = 200  # per split
    rows_per_entity: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_entities < 2 or self.n_entities % 2:
            raise ValueError("n_entities must be an even number >= 2 (classes are balanced)")
        if self.rows_per_entity != 2:
            raise ValueError("the matched-marginal construction needs exactly 2 child rows per entity")


POSITIVE_CHILDREN = ((1, 1), (0, 0))
NEGATIVE_CHILDREN = ((1, 0), (0, 1))


def sample_cooccurrence(spec: CooccurrenceSpec) -> tuple[pd.DataFrame, pd.DataFrame, dict[str, pd.DataFrame]]:
    rng = np.random.default_rng(spec.seed)
    parents, children, targets = [], [], {}
    next_entity = 1
    child_id = 1
    for split in SPLITS:
        labels = np.array([1] * (spec.n_entities // 2) + [0] * (spec.n_entities // 2))
        rng.shuffle(labels)
        ids = np.arange(next_entity, next_entity + spec.n_entities, dtype=np.int64)
        next_entity += spec.n_entities
        for ent, lab in zip(ids, labels):
            rows = list(POSITIVE_CHILDREN if lab else NEGATIVE_CHILDREN)
            if rng.random() < 0.5:
                rows.reverse()
            for a, b in rows:
                children.append((child_id, int(ent), a, b))
                child_id += 1
        parents.extend(int(v) for v in ids)
        targets[split] = pd.DataFrame({"entity_id": ids, "timestamp": pd.Timestamp(SPLIT_TIMES[split]),
                                       "label": labels.astype(np.int64)})
    t1 = pd.DataFrame({"entity_id": np.array(parents, dtype=np.int64)})
    t2 = pd.DataFrame(children, columns=["child_id", "entity_id", "A", "B"]).astype(np.int64)
    return t1, t2, targets


def label_cooccurrence(children: pd.DataFrame) -> dict[int, int]:
    """Brute-force label: 1 iff some child row has A=1 and B=1."""
    out: dict[int, int] = {}
    for ent, a, b in zip(children["entity_id"], children["A"], children["B"]):
        out[int(ent)] = max(out.get(int(ent), 0), int(a == 1 and b == 1))
    return out


AGGREGATES = """SELECT e.row_id,
  COUNT(c.A) AS a_count, SUM(c.A) AS a_sum, AVG(c.A) AS a_mean, MIN(c.A) AS a_min, MAX(c.A) AS a_max,
  STDDEV_SAMP(c.A) AS a_std,
  COUNT(c.B) AS b_count, SUM(c.B) AS b_sum, AVG(c.B) AS b_mean, MIN(c.B) AS b_min, MAX(c.B) AS b_max,
  STDDEV_SAMP(c.B) AS b_std
FROM eval_table e LEFT JOIN T2 c ON c.entity_id = e.entity_id
GROUP BY e.row_id"""

COOCCURRENCE = """SELECT e.row_id,
  CAST(SUM(CASE WHEN c.A = 1 AND c.B = 1 THEN 1 ELSE 0 END) > 0 AS INTEGER) AS ab_cooccur
FROM eval_table e LEFT JOIN T2 c ON c.entity_id = e.entity_id
GROUP BY e.row_id"""


def cooccurrence_programs() -> dict[str, list[dict[str, str]]]:
    return {
        "dfs_aggregates": [{"name": "child_aggregates", "sql": AGGREGATES}],
        "cooccurrence": [{"name": "cooccurrence", "sql": COOCCURRENCE}],
    }


def gen_cooccurrence_task(spec: CooccurrenceSpec, out_dir: str | Path) -> TaskManifest:
    task_dir = Path(out_dir)
    task_dir.mkdir(parents=True, exist_ok=True)
    t1, t2, targets = sample_cooccurrence(spec)
    tables = {"T1": t1, "T2": t2, **{f"__target_{s}": targets[s] for s in SPLITS}}
    ddl = {
        "T1": 'CREATE TABLE "T1" (entity_id BIGINT PRIMARY KEY)',
        "T2": 'CREATE TABLE "T2" (child_id BIGINT PRIMARY KEY, entity_id BIGINT REFERENCES "T1"(entity_id), '
              '"A" BIGINT, "B" BIGINT)',
    }
    for s in SPLITS:
        ddl[f"__target_{s}"] = f'CREATE TABLE "__target_{s}" {_target_ddl("entity_id", "BIGINT")}'
    _write_database(task_dir / DB_FILE, tables, ddl)
    manifest = _manifest(
        task_dir, ["T1", "T2"], "entity_id", rowid_columns=["child_id"], seed=spec.seed,
        dataset_name="cooccurrence",
        description="Predict a binary label for each T1 entity from its related T2 rows (binary columns A and B).")
    manifest.save(task_dir / MANIFEST_FILE)
    _write_fixtures(task_dir, cooccurrence_programs())
    (task_dir / "spec.json").write_text(json.dumps({"kind": "cooccurrence", **vars(spec)}, indent=2) + "\n")
    return manifest


def load_fixture(task_dir: str | Path, name: str) -> list[dict[str, str]]:
    return json.loads((Path(task_dir) / FIXTURE_DIR / f"{name}.json").read_text())

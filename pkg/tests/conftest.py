from __future__ import annotations

import json
from datetime import datetime, timedelta
from pathlib import Path

import duckdb
import numpy as np
import pytest

from relsearch.relstore import TaskManifest
from relsearch.synthbench import CooccurrenceSpec, TriangleSpec, gen_cooccurrence_task, gen_triangle_task

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


# --- synthetic graph / co-occurrence tasks ------------------------------------

@pytest.fixture(scope="session")
def triangle_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("triangle") / "task"
    gen_triangle_task(TriangleSpec(seed=0), out)
    return out


@pytest.fixture(scope="session")
def triangle_loops_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("triangle_sl") / "task"
    gen_triangle_task(TriangleSpec(p_sl=1.0, seed=0), out)
    return out


@pytest.fixture(scope="session")
def cooc_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("cooc") / "task"
    gen_cooccurrence_task(CooccurrenceSpec(seed=0), out)
    return out


@pytest.fixture(scope="session")
def triangle_manifest(triangle_dir) -> TaskManifest:
    return TaskManifest.load(triangle_dir / "manifest.json")


def fixture_json(task_dir: Path, name: str) -> str:
    return (Path(task_dir) / "fixtures" / f"{name}.json").read_text()


# --- a small temporal task ----------------------------------------------------

SPLIT_DAYS = {"train": [10, 20, 30], "val": [45], "test": [60]}
ORIGIN = datetime(2021, 1, 1)


def build_temporal_task(out: Path, *, n_customers: int = 40, task_type: str = "binary_classification",
                        seed: int = 0, val_before_train: bool = False) -> Path:
    """customers / orders with repeated entities per split; labels come from past order counts."""
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    orders = []
    oid = 0
    for c in range(n_customers):
        for _ in range(int(rng.integers(0, 12))):
            day = int(rng.integers(0, 70))
            orders.append((oid, c, float(rng.integers(1, 100)), ORIGIN + timedelta(days=day, hours=int(rng.integers(0, 24)))))
            oid += 1
    db = out / "task.duckdb"
    con = duckdb.connect(str(db))
    con.execute("CREATE TABLE customers (customer_id BIGINT PRIMARY KEY, region VARCHAR)")
    con.executemany("INSERT INTO customers VALUES (?, ?)", [(c, "abc"[c % 3]) for c in range(n_customers)])
    con.execute("CREATE TABLE orders (order_id BIGINT PRIMARY KEY, customer_id BIGINT REFERENCES customers, "
                "amount DOUBLE, order_time TIMESTAMP)")
    con.executemany("INSERT INTO orders VALUES (?, ?, ?, ?)", orders)
    for split, days in SPLIT_DAYS.items():
        if val_before_train and split == "val":
            days = [1]
        rows = []
        for d in days:
            ts = ORIGIN + timedelta(days=d)
            for c in range(n_customers):
                past = [o for o in orders if o[1] == c and o[3] < ts]
                if task_type == "regression":
                    y = float(sum(o[2] for o in past if o[3] >= ts - timedelta(days=20)))
                else:
                    y = int(len(past) >= 3)
                rows.append((c, ts, y))
        con.execute(f"CREATE TABLE __target_{split} (customer_id BIGINT, ts TIMESTAMP, "
                    f"y {'DOUBLE' if task_type == 'regression' else 'BIGINT'})")
        con.executemany(f"INSERT INTO __target_{split} VALUES (?, ?, ?)", rows)
    con.close()
    manifest = {
        "database_uri": "task.duckdb",
        "context_tables": ["customers", "orders"],
        **{s: {"table": f"__target_{s}", "entity_col": "customer_id", "timestamp_col": "ts", "target_col": "y"}
           for s in SPLIT_DAYS},
        "task_type": task_type,
        "primary_metric": "auroc" if task_type == "binary_classification" else "mae",
        "rowid_columns": ["order_id"],
        "dataset_name": "shop",
        "task_description": "predict customer activity",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"


def append_future_orders(manifest_path: Path, n: int = 50) -> None:
    db = Path(manifest_path).parent / "task.duckdb"
    con = duckdb.connect(str(db))
    start = con.execute("SELECT max(order_id) + 1 FROM orders").fetchone()[0]
    n_cust = con.execute("SELECT count(*) FROM customers").fetchone()[0]
    rows = [(start + i, i % n_cust, 1000.0 + i, ORIGIN + timedelta(days=400 + i)) for i in range(n)]
    con.executemany("INSERT INTO orders VALUES (?, ?, ?, ?)", rows)
    con.close()


@pytest.fixture
def temporal_manifest(tmp_path) -> Path:
    return build_temporal_task(tmp_path / "shop")


@pytest.fixture
def regression_manifest(tmp_path) -> Path:
    return build_temporal_task(tmp_path / "shop_reg", task_type="regression")


ORDER_COUNT = ("SELECT e.row_id, count(o.order_id) AS n_orders, sum(o.amount) AS spend "
               "FROM eval_table e LEFT JOIN orders o ON o.customer_id = e.customer_id AND o.order_time < e.ts "
               "GROUP BY e.row_id")

from __future__ import annotations

import numpy as np

from ..relstore import ContextHandle, SchemaRenaming


def anonymize_schema(ctx: ContextHandle, seed: int) -> SchemaRenaming:
    """Seeded bijection onto ``table_k`` / ``col_k`` names.

    Column names are mapped globally, so a key column that shares its name
    across tables (or with a role column) keeps sharing the synthetic name.
    """
    rng = np.random.default_rng(seed)
    tables = list(ctx.context_tables)
    order = rng.permutation(len(tables))
    table_map = {tables[i]: f"table_{k}" for k, i in enumerate(order)}

    m = ctx.manifest.train
    names: list[str] = []
    for t in tables:
        for c, _ in ctx.source_schema[t]:
            if c not in names:
                names.append(c)
    for c in (m.entity_col, m.timestamp_col, m.target_col):
        if c not in names:
            names.append(c)
    perm = rng.permutation(len(names))
    col_map = {names[i]: f"col_{k}" for k, i in enumerate(perm)}

    columns = {t: {c: col_map[c] for c, _ in ctx.source_schema[t]} for t in tables}
    roles = {c: col_map[c] for c in (m.entity_col, m.timestamp_col, m.target_col)}
    return SchemaRenaming(table_map, columns, roles)

"""Token-level SQL inspection.

Nothing here parses SQL properly; these helpers only need to be right about
identifiers, parenthesis depth and a handful of keywords, across dialects.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<line_comment>--[^\n]*)
  | (?P<block_comment>/\*.*?(?:\*/|\Z))
  | (?P<string>'(?:[^']|'')*(?:'|\Z))
  | (?P<qident>"(?:[^"]|"")*(?:"|\Z))
  | (?P<number>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_$]*)
  | (?P<op>.)
    """,
    re.S | re.X,
)

READ_ONLY_KEYWORDS = frozenset(
    {"select", "with", "show", "describe", "desc", "pragma", "explain",
     "summarize", "values", "from", "table"}
)


@dataclass(frozen=True)
class Token:
    kind: str  # ident | qident | string | number | op
    text: str
    depth: int

    @property
    def name(self) -> str | None:
        """Normalized identifier name, or None for non-identifiers."""
        if self.kind == "ident":
            return self.text.lower()
        if self.kind == "qident":
            return self.text[1:-1].replace('""', '"').lower()
        return None


def tokenize(sql: str) -> list[Token]:
    tokens: list[Token] = []
    depth = 0
    for m in _TOKEN_RE.finditer(sql):
        kind = m.lastgroup
        if kind in ("ws", "line_comment", "block_comment"):
            continue
        text = m.group()
        if kind == "op" and text == ")":
            depth = max(depth - 1, 0)
        tokens.append(Token(kind, text, depth))
        if kind == "op" and text == "(":
            depth += 1
    return tokens


def first_keyword(sql: str) -> str | None:
    for tok in tokenize(sql):
        if tok.kind == "op" and tok.text == "(":
            continue
        return tok.name if tok.kind == "ident" else tok.text
    return None


def has_outer_limit(sql: str) -> bool:
    return any(t.depth == 0 and t.name == "limit" for t in tokenize(sql) if t.kind == "ident")


def identifier_names(sql: str) -> list[str]:
    """Every identifier in order; qualified names yield one entry per part."""
    return [t.name for t in tokenize(sql) if t.name is not None]


def references(sql: str, name: str) -> bool:
    return name.lower() in identifier_names(sql)


def outer_select_list(sql: str) -> list[Token] | None:
    """Tokens of the first top-level SELECT list (CTE bodies sit at depth 1).

    Returns None when no top-level SELECT exists.
    """
    tokens = tokenize(sql)
    start = None
    for i, tok in enumerate(tokens):
        if tok.depth == 0 and tok.kind == "ident" and tok.name == "select":
            start = i + 1
            break
    if start is None:
        return None
    out = []
    for tok in tokens[start:]:
        if tok.depth == 0 and tok.kind == "ident" and tok.name in ("from", "union", "except", "intersect"):
            break
        out.append(tok)
    return out


def strip_trailing_semicolons(sql: str) -> str:
    return sql.strip().rstrip(";").strip()

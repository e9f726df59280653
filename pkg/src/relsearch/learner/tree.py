"""Histogram binning and depth-wise regression-tree growth on (g, h) statistics."""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

N_BINS = 256
MISSING = N_BINS - 1  # last histogram slot holds nulls
MAX_VALUE_BINS = N_BINS - 1
MIN_CHILD_HESSIAN = 1e-3
MIN_SPLIT_GAIN = 1e-12  # ignore round-off gains


@dataclass
class ColumnBinner:
    name: str
    categorical: bool
    edges: np.ndarray  # ascending upper bin edges over training values
    levels: list[str]  # categorical levels in first-appearance order

    @classmethod
    def fit(cls, name: str, values: np.ndarray, categorical: bool) -> "ColumnBinner":
        levels: list[str] = []
        if categorical:
            seen: dict[str, int] = {}
            for v in values:
                if v is not None and v not in seen:
                    seen[v] = len(seen)
            levels = list(seen)
        binner = cls(name, categorical, np.empty(0), levels)
        numeric = binner.to_numeric(values)
        finite = numeric[~np.isnan(numeric)]
        if np.isinf(finite).any():
            from ..errors import TrainingError
            raise TrainingError(f"column {name} contains infinite values")
        uniq = np.unique(finite)
        if len(uniq) <= MAX_VALUE_BINS:
            edges = uniq
        else:
            q = np.arange(1, MAX_VALUE_BINS + 1) / MAX_VALUE_BINS
            edges = np.unique(np.quantile(finite, q, method="inverted_cdf"))
        binner.edges = edges.astype(np.float64)
        return binner

    def to_numeric(self, values: np.ndarray) -> np.ndarray:
        if not self.categorical:
            return np.asarray(values, dtype=np.float64)
        index = {lv: i for i, lv in enumerate(self.levels)}
        return np.array([index.get(v, np.nan) if v is not None else np.nan for v in values], dtype=np.float64)

    def transform(self, values: np.ndarray) -> np.ndarray:
        x = self.to_numeric(values)
        codes = np.searchsorted(self.edges, x, side="left")
        np.clip(codes, 0, max(len(self.edges) - 1, 0), out=codes)
        codes[np.isnan(x)] = MISSING
        return codes.astype(np.uint8)

    @property
    def n_value_bins(self) -> int:
        return len(self.edges)

    def threshold(self, bin_index: int) -> float:
        # the top bin also absorbs values above the training maximum
        if bin_index >= len(self.edges) - 1:
            return float("inf")
        return float(self.edges[bin_index])

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "categorical": self.categorical,
                "edges": self.edges.tolist(), "levels": self.levels}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ColumnBinner":
        return cls(d["name"], d["categorical"], np.asarray(d["edges"], dtype=np.float64), list(d["levels"]))


@dataclass
class Tree:
    feature: np.ndarray  # int32, -1 for leaves
    bin: np.ndarray  # int32 split bin: code <= bin goes left
    threshold: np.ndarray  # float64 value-space threshold, for inspection
    default_left: np.ndarray  # bool, direction for nulls
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply_codes(self, codes: np.ndarray) -> np.ndarray:
        """Leaf value for each row of a binned matrix."""
        n = codes.shape[0]
        node = np.zeros(n, dtype=np.int32)
        while True:
            f = self.feature[node]
            inner = np.flatnonzero(f >= 0)
            if len(inner) == 0:
                break
            nd = node[inner]
            c = codes[inner, f[inner]]
            go_left = np.where(c == MISSING, self.default_left[nd], c <= self.bin[nd])
            node[inner] = np.where(go_left, self.left[nd], self.right[nd])
        return self.value[node]

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k).tolist() for k in
                ("feature", "bin", "threshold", "default_left", "left", "right", "value", "gain", "count")}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int32),
            bin=np.asarray(d["bin"], dtype=np.int32),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            default_left=np.asarray(d["default_left"], dtype=bool),
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            value=np.asarray(d["value"], dtype=np.float64),
            gain=np.asarray(d["gain"], dtype=np.float64),
            count=np.asarray(d["count"], dtype=np.float64),
        )


def _soft_threshold(g: np.ndarray | float, alpha: float):
    return np.sign(g) * np.maximum(np.abs(g) - alpha, 0.0)


def leaf_value(g_sum: float, h_sum: float, lambda_l1: float, lambda_l2: float) -> float:
    denom = h_sum + lambda_l2
    if denom <= 1e-12:
        return 0.0
    return float(-_soft_threshold(g_sum, lambda_l1) / denom)


def _histograms(codes: np.ndarray, rows: np.ndarray, feats: np.ndarray, g: np.ndarray, h: np.ndarray,
                c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    k = len(feats)
    sub = codes[np.ix_(rows, feats)].astype(np.int64)
    sub += (np.arange(k, dtype=np.int64) * N_BINS)[None, :]
    flat = sub.ravel()
    size = k * N_BINS
    shape = (len(rows), k)
    hg = np.bincount(flat, weights=np.broadcast_to(g[rows][:, None], shape).ravel(), minlength=size)
    hh = np.bincount(flat, weights=np.broadcast_to(h[rows][:, None], shape).ravel(), minlength=size)
    hc = np.bincount(flat, weights=np.broadcast_to(c[rows][:, None], shape).ravel(), minlength=size)
    return hg.reshape(k, N_BINS), hh.reshape(k, N_BINS), hc.reshape(k, N_BINS)


def _histograms_parallel(codes, rows, feats, g, h, c, executor: Executor | None, n_jobs: int):
    if executor is None or n_jobs <= 1 or len(feats) < 2:
        return _histograms(codes, rows, feats, g, h, c)
    chunks = [ch for ch in np.array_split(feats, min(n_jobs, len(feats))) if len(ch)]
    parts = list(executor.map(lambda ch: _histograms(codes, rows, ch, g, h, c), chunks))
    # fixed-order merge keeps results independent of scheduling
    return tuple(np.concatenate([p[i] for p in parts], axis=0) for i in range(3))


def _best_split(hg, hh, hc, G, H, C, n_edges: np.ndarray, min_child_samples: float,
                lambda_l1: float, lambda_l2: float):
    """Return (feature_pos, bin, default_left, gain) or None."""
    mg, mh, mc = hg[:, MISSING], hh[:, MISSING], hc[:, MISSING]
    cg = np.cumsum(hg[:, :MAX_VALUE_BINS], axis=1)
    ch = np.cumsum(hh[:, :MAX_VALUE_BINS], axis=1)
    cc = np.cumsum(hc[:, :MAX_VALUE_BINS], axis=1)
    # last axis: 0 = nulls go left, 1 = nulls go right
    GL = np.stack([cg + mg[:, None], cg], axis=2)
    HL = np.stack([ch + mh[:, None], ch], axis=2)
    CL = np.stack([cc + mc[:, None], cc], axis=2)
    GR, HR, CR = G - GL, H - HL, C - CL
    valid = ((CL >= min_child_samples) & (CR >= min_child_samples)
             & (HL >= MIN_CHILD_HESSIAN) & (HR >= MIN_CHILD_HESSIAN))
    valid &= (np.arange(MAX_VALUE_BINS)[None, :] < n_edges[:, None])[:, :, None]
    if not valid.any():
        return None

    def score(gs, hs):
        return _soft_threshold(gs, lambda_l1) ** 2 / (hs + lambda_l2)

    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (score(GL, HL) + score(GR, HR) - score(G, H))
    gain = np.where(valid, gain, -np.inf)
    best = int(np.argmax(gain))  # C order: lowest feature, then bin, then nulls-left
    f, b, d = np.unravel_index(best, gain.shape)
    if not gain[f, b, d] > MIN_SPLIT_GAIN:
        return None
    return int(f), int(b), bool(d == 0), float(gain[f, b, d])


def grow_tree(codes: np.ndarray, g: np.ndarray, h: np.ndarray, c: np.ndarray, rows: np.ndarray,
              feats: np.ndarray, binners: Sequence[ColumnBinner], *, max_depth: int,
              min_child_samples: float, lambda_l1: float, lambda_l2: float,
              executor: Executor | None = None, n_jobs: int = 1) -> Tree:
    """Grow one tree level by level on rows with nonzero weight.

    ``c`` holds per-row sample multiplicities used for min_child_samples.
    """
    n_edges = np.array([binners[f].n_value_bins for f in feats], dtype=np.int64)
    feature, bins, thr, dleft, left, right, value, gains, count = ([] for _ in range(9))

    def new_node(node_rows: np.ndarray) -> int:
        G, H = float(g[node_rows].sum()), float(h[node_rows].sum())
        feature.append(-1); bins.append(0); thr.append(np.nan); dleft.append(True)
        left.append(-1); right.append(-1); gains.append(0.0)
        value.append(leaf_value(G, H, lambda_l1, lambda_l2))
        count.append(float(c[node_rows].sum()))
        return len(feature) - 1

    frontier = [(new_node(rows), rows)]
    for _depth in range(max_depth):
        nxt = []
        for node_id, node_rows in frontier:
            C = count[node_id]
            if C < 2 * min_child_samples or len(node_rows) < 2:
                continue
            G, H = float(g[node_rows].sum()), float(h[node_rows].sum())
            hg, hh, hc = _histograms_parallel(codes, node_rows, feats, g, h, c, executor, n_jobs)
            found = _best_split(hg, hh, hc, G, H, C, n_edges, min_child_samples, lambda_l1, lambda_l2)
            if found is None:
                continue
            fpos, b, default_left, gain = found
            col = int(feats[fpos])
            node_codes = codes[node_rows, col]
            go_left = np.where(node_codes == MISSING, default_left, node_codes <= b)
            lrows, rrows = node_rows[go_left], node_rows[~go_left]
            feature[node_id] = col
            bins[node_id] = b
            thr[node_id] = binners[col].threshold(b)
            dleft[node_id] = default_left
            gains[node_id] = gain
            left[node_id] = new_node(lrows)
            right[node_id] = new_node(rrows)
            nxt.append((left[node_id], lrows))
            nxt.append((right[node_id], rrows))
        frontier = nxt
        if not frontier:
            break
    return Tree(
        feature=np.asarray(feature, dtype=np.int32), bin=np.asarray(bins, dtype=np.int32),
        threshold=np.asarray(thr, dtype=np.float64), default_left=np.asarray(dleft, dtype=bool),
        left=np.asarray(left, dtype=np.int32), right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=np.float64), gain=np.asarray(gains, dtype=np.float64),
        count=np.asarray(count, dtype=np.float64),
    )

"""Graph storage, dataset I/O, homophily measures and sparse adjacency algebra."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ParseError, UndefinedMetricError, ValidationError

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_PRUNE = 1e-7


def canonical_edges(pairs, n: int | None = None) -> np.ndarray:
    """Sort each pair to (u<v), drop duplicates, order lexicographically.

    Raises ValidationError on self-loops or (if ``n`` given) out-of-range ids.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if np.any(pairs[:, 0] == pairs[:, 1]):
        raise ValidationError("self-loops are not allowed in the edge list")
    if n is not None and (pairs.min() < 0 or pairs.max() >= n):
        raise ValidationError(f"edge endpoint outside [0, {n})")
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    key = np.unique(lo * (int(hi.max()) + 1) + hi)
    width = int(hi.max()) + 1
    return np.stack([key // width, key % width], axis=1)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected node-classification graph.

    ``edges`` holds each undirected edge once as (u, v) with u < v.  Labels use
    -1 for unlabeled nodes.  ``splits`` is a list of {train, val, test} index
    dicts; the first one is the active split.
    """

    features: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    splits: list = field(default_factory=list)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ValidationError("features must be an n x d matrix")
        n = features.shape[0]
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise ValidationError(f"{labels.shape[0]} labels for {n} nodes")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if edges.min() < 0 or edges.max() >= n:
                raise ValidationError(f"edge endpoint outside [0, {n})")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValidationError("edges must be stored once with u < v")
        splits = [_check_split(s, n) for s in self.splits]
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "splits", splits)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        known = self.labels[self.labels >= 0]
        return int(known.max()) + 1 if known.size else 0

    @property
    def train(self) -> np.ndarray:
        return self.splits[0]["train"]

    @property
    def val(self) -> np.ndarray:
        return self.splits[0]["val"]

    @property
    def test(self) -> np.ndarray:
        return self.splits[0]["test"]

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency with both directions materialized."""
        return WeightedAdjacency.from_edges(self.n, self.edges).matrix

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n)

    def with_edges(self, edges) -> "Graph":
        return Graph(self.features, canonical_edges(edges, self.n), self.labels, self.splits)

    def with_splits(self, splits) -> "Graph":
        return Graph(self.features, self.edges, self.labels, list(splits))

    def select_split(self, i: int) -> "Graph":
        """Return a graph whose active split is ``splits[i]``."""
        return Graph(self.features, self.edges, self.labels,
                     [self.splits[i]] + self.splits[:i] + self.splits[i + 1:])

    def subgraph(self, nodes) -> "Graph":
        """Induced subgraph on ``nodes`` (relabelled 0..k-1, splits dropped)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        pos = np.full(self.n, -1)
        pos[nodes] = np.arange(len(nodes))
        keep = (pos[self.edges[:, 0]] >= 0) & (pos[self.edges[:, 1]] >= 0)
        sub = pos[self.edges[keep]]
        return Graph(self.features[nodes], canonical_edges(sub) if len(sub) else sub,
                     self.labels[nodes])


def _check_split(split, n):
    out = {}
    for name in SPLIT_NAMES:
        idx = np.asarray(split.get(name, []), dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValidationError(f"split '{name}' has an index outside [0, {n})")
        if len(np.unique(idx)) != len(idx):
            raise ValidationError(f"split '{name}' repeats a node")
        out[name] = idx
    seen = np.concatenate([out[k] for k in SPLIT_NAMES])
    if len(np.unique(seen)) != len(seen):
        raise ValidationError("train/val/test splits overlap")
    return out


@dataclass(frozen=True)
class WeightedAdjacency:
    """Symmetric sparse weight map over node pairs."""

    n: int
    matrix: sp.csr_matrix

    @classmethod
    def from_edges(cls, n, edges, weights=None) -> "WeightedAdjacency":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        m = sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n))
        m.sort_indices()
        return cls(n, m)

    @classmethod
    def from_dense(cls, dense) -> "WeightedAdjacency":
        dense = np.asarray(dense, dtype=np.float64)
        return cls(dense.shape[0], sp.csr_matrix(dense))

    def __getitem__(self, pair) -> float:
        i, j = pair
        return float(self.matrix[i, j])

    def entries(self) -> dict:
        coo = self.matrix.tocoo()
        return {(int(i), int(j)): float(v) for i, j, v in zip(coo.row, coo.col, coo.data)}

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @property
    def nnz(self) -> int:
        return self.matrix.nnz


def weighted_power(w: WeightedAdjacency, r: int, prune_below: float = DEFAULT_PRUNE) -> WeightedAdjacency:
    """r-fold sparse product of ``w`` with itself; tiny entries dropped."""
    if r < 1:
        raise ValueError(f"power must be >= 1, got {r}")
    base = w.matrix.tocsr()
    out = base.copy()
    for _ in range(r - 1):
        out = out @ base
    out = ((out + out.T) * 0.5).tocsr()
    if prune_below > 0:
        out.data[np.abs(out.data) < prune_below] = 0.0
    out.eliminate_zeros()
    out.sort_indices()
    return WeightedAdjacency(w.n, out)


def symmetric_normalize(w: WeightedAdjacency, add_self_loops: bool = True) -> WeightedAdjacency:
    """D^-1/2 (W [+ I]) D^-1/2; rows with zero degree stay zero."""
    m = w.matrix.tocsr()
    if add_self_loops:
        m = m + sp.identity(w.n, format="csr")
    deg = np.asarray(m.sum(axis=1)).reshape(-1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = deg[nz] ** -0.5
    d = sp.diags(inv)
    out = (d @ m @ d).tocsr()
    out.sort_indices()
    return WeightedAdjacency(w.n, out)


# ---------------------------------------------------------------- homophily


def _labeled_edges(g: Graph) -> np.ndarray:
    y = g.labels
    e = g.edges
    keep = (y[e[:, 0]] >= 0) & (y[e[:, 1]] >= 0)
    return e[keep]


def edge_homophily(g: Graph) -> float:
    e = _labeled_edges(g)
    if len(e) == 0:
        raise UndefinedMetricError("edge homophily needs at least one labeled edge")
    return float(np.mean(g.labels[e[:, 0]] == g.labels[e[:, 1]]))


def node_homophily(g: Graph) -> float:
    e = _labeled_edges(g)
    y = g.labels
    deg = np.bincount(e.reshape(-1), minlength=g.n)
    same = (y[e[:, 0]] == y[e[:, 1]]).astype(np.int64)
    same_deg = np.bincount(e[:, 0], weights=same, minlength=g.n) + \
        np.bincount(e[:, 1], weights=same, minlength=g.n)
    mask = deg > 0
    if not mask.any():
        raise UndefinedMetricError("node homophily needs a node with a labeled neighbor")
    return float(np.mean(same_deg[mask] / deg[mask]))


def class_insensitive_homophily(g: Graph) -> float:
    y = g.labels
    labeled = y >= 0
    classes = np.unique(y[labeled])
    if len(classes) < 2:
        raise ValueError("class-insensitive homophily needs at least two classes")
    e = _labeled_edges(g)
    if len(e) == 0:
        raise UndefinedMetricError("class-insensitive homophily needs at least one labeled edge")
    deg = np.bincount(e.reshape(-1), minlength=g.n)
    same = (y[e[:, 0]] == y[e[:, 1]]).astype(np.int64)
    same_deg = np.bincount(e[:, 0], weights=same, minlength=g.n) + \
        np.bincount(e[:, 1], weights=same, minlength=g.n)
    n_labeled = int(labeled.sum())
    total = 0.0
    for k in classes:
        members = y == k
        d_k = deg[members].sum()
        h_k = same_deg[members].sum() / d_k if d_k > 0 else 0.0
        total += max(0.0, h_k - members.sum() / n_labeled)
    return float(total / (len(classes) - 1))


def adjusted_homophily(g: Graph) -> float:
    e = _labeled_edges(g)
    if len(e) == 0:
        raise UndefinedMetricError("adjusted homophily needs at least one labeled edge")
    y = g.labels
    h_edge = float(np.mean(y[e[:, 0]] == y[e[:, 1]]))
    class_deg = np.bincount(y[e.reshape(-1)])
    p_bar = class_deg / (2.0 * len(e))
    expected = float(np.sum(p_bar ** 2))
    if np.isclose(1.0 - expected, 0.0, atol=1e-15):
        raise UndefinedMetricError("adjusted homophily undefined with a single effective class")
    return (h_edge - expected) / (1.0 - expected)


HOMOPHILY_MEASURES = {
    "h_edge": edge_homophily,
    "h_node": node_homophily,
    "h_class": class_insensitive_homophily,
    "h_adj": adjusted_homophily,
}


# ---------------------------------------------------------------- I/O


def _read_rows(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(path, 1, "missing header row")
        for lineno, row in enumerate(reader, start=2):
            if row:
                yield lineno, header, row


def _parse_int(path, lineno, text):
    try:
        return int(text)
    except ValueError:
        raise ParseError(path, lineno, f"expected an integer, got {text!r}") from None


def _read_features(path: Path) -> np.ndarray:
    ids, rows, width = [], [], None
    for lineno, header, row in _read_rows(path):
        if width is None:
            width = len(header)
        if len(row) != width:
            raise ParseError(path, lineno, f"expected {width} columns, got {len(row)}")
        ids.append(_parse_int(path, lineno, row[0]))
        try:
            rows.append([float(x) for x in row[1:]])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    n = len(ids)
    ids = np.asarray(ids, dtype=np.int64)
    if n and (ids.min() < 0 or ids.max() >= n or len(np.unique(ids)) != n):
        raise ValidationError(f"{path}: node ids must be a permutation of 0..{n - 1}")
    feats = np.zeros((n, (width or 1) - 1))
    if n:
        feats[ids] = np.asarray(rows, dtype=np.float64).reshape(n, -1)
    return feats


def _read_edges(path: Path, n: int) -> np.ndarray:
    pairs = []
    loops = 0
    for lineno, _, row in _read_rows(path):
        if len(row) < 2:
            raise ParseError(path, lineno, "edge rows need src,dst")
        u, v = _parse_int(path, lineno, row[0]), _parse_int(path, lineno, row[1])
        if not (0 <= u < n and 0 <= v < n):
            raise ValidationError(f"{path}:{lineno}: endpoint outside [0, {n})")
        if u == v:
            loops += 1
            continue
        pairs.append((u, v))
    if loops:
        log.warning("%s: dropped %d self-loop rows", path, loops)
    return canonical_edges(pairs)


def _read_labels(path: Path | None, n: int) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    if path is None or not Path(path).exists():
        log.warning("no labels file; all nodes unlabeled")
        return labels
    for lineno, header, row in _read_rows(path):
        if len(header) < 2 or len(row) < 2:
            log.warning("%s: no label column; all nodes unlabeled", path)
            return np.full(n, -1, dtype=np.int64)
        i = _parse_int(path, lineno, row[0])
        if not 0 <= i < n:
            raise ValidationError(f"{path}:{lineno}: node id outside [0, {n})")
        labels[i] = _parse_int(path, lineno, row[1]) if row[1] != "" else -1
    return labels


def _read_splits(path: Path | None) -> list:
    if path is None or not Path(path).exists():
        return []
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        raw = [raw]
    if not isinstance(raw, list) or not all(isinstance(s, dict) for s in raw):
        raise ValidationError(f"{path}: expected an object or a list of objects")
    return raw


def load_graph(features_path, edges_path, labels_path=None, splits_path=None) -> Graph:
    features = _read_features(Path(features_path))
    n = features.shape[0]
    edges = _read_edges(Path(edges_path), n)
    labels = _read_labels(labels_path, n)
    return Graph(features, edges, labels, _read_splits(splits_path))


def load_dataset(directory) -> Graph:
    """Load ``features.csv``, ``edges.csv``, ``labels.csv``, ``splits.json``."""
    d = Path(directory)
    if not (d / "features.csv").exists():
        raise FileNotFoundError(f"{d / 'features.csv'} not found")
    return load_graph(d / "features.csv", d / "edges.csv", d / "labels.csv", d / "splits.json")


def save_graph(g: Graph, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "features.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id"] + [f"f{j}" for j in range(g.num_features)])
        for i, row in enumerate(g.features):
            w.writerow([i] + [repr(float(x)) for x in row])
    with open(d / "edges.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        w.writerows(g.edges.tolist())
    with open(d / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "label"])
        w.writerows([i, int(y)] for i, y in enumerate(g.labels))
    payload = [{k: s[k].tolist() for k in SPLIT_NAMES} for s in g.splits]
    with open(d / "splits.json", "w", encoding="utf-8") as fh:
        json.dump(payload[0] if len(payload) == 1 else payload, fh)

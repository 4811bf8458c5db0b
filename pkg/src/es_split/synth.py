"""Synthetic graphs (CSBM), evaluation-time edge noise, and split construction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ValidationError
from .graph import Graph, canonical_edges

DEFAULT_SIGMA = 0.20


def default_csbm_params(n: int) -> tuple[int, np.ndarray, float]:
    """Feature dimension, class-mean vector and noise scale for an n-node CSBM.

    d = n / ln(n)^2 and |mu| = 10 sigma sqrt(ln n^2) / (2 sqrt(2d)), with the
    mean pointing along the all-ones direction.
    """
    if n < 3:
        raise ValueError("CSBM defaults need n >= 3")
    d = max(1, int(round(n / math.log(n) ** 2)))
    mu = _mean_magnitude(n, d, DEFAULT_SIGMA)
    return d, np.full(d, mu / math.sqrt(d)), DEFAULT_SIGMA


def _mean_magnitude(n: int, d: int, sigma: float) -> float:
    return 10.0 * sigma * math.sqrt(math.log(n ** 2)) / (2.0 * math.sqrt(2.0 * d))


@dataclass(frozen=True)
class CSBMSpec:
    n: int
    p: float
    q: float
    d: int | None = None
    mu: float | None = None
    sigma: float = DEFAULT_SIGMA
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.q <= 1.0):
            raise ValidationError("p and q must lie in [0, 1]")
        if self.n < 3 or self.n % 2:
            raise ValidationError("n must be even (two balanced classes) and >= 3")
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")

    def resolved(self) -> tuple[int, np.ndarray, float]:
        """(d, mean vector, sigma) with unset fields filled from the defaults."""
        d = self.d if self.d is not None else default_csbm_params(self.n)[0]
        mu = self.mu if self.mu is not None else _mean_magnitude(self.n, d, self.sigma)
        return d, np.full(d, mu / math.sqrt(d)), self.sigma


def csbm_generate(spec: CSBMSpec) -> Graph:
    """Two balanced classes; intra pairs linked w.p. p, inter pairs w.p. q."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    labels = np.repeat([0, 1], n // 2)
    rng.shuffle(labels)
    d, mu_vec, sigma = spec.resolved()
    features = (2 * labels[:, None] - 1) * mu_vec[None, :] + sigma * rng.standard_normal((n, d))

    chunks = []
    for i in range(n - 1):
        js = np.arange(i + 1, n)
        prob = np.where(labels[js] == labels[i], spec.p, spec.q)
        hit = rng.random(n - i - 1) < prob
        if hit.any():
            found = js[hit]
            chunks.append(np.stack([np.full(len(found), i), found], axis=1))
    edges = np.concatenate(chunks) if chunks else np.zeros((0, 2), dtype=np.int64)
    return Graph(features, edges.astype(np.int64), labels)


# ---------------------------------------------------------------- edge noise

# Appendix-style categorical presets; vectors longer than the class count
# fold their extra slots back modulo C.
_PRESETS = {
    "cora": [
        [0, 0.5, 0.5, 0, 0, 0, 0, 0],
        [0, 0, 0.5, 0.5, 0, 0, 0, 0],
        [0, 0, 0, 0, 0.5, 0.5, 0, 0],
        [0, 0, 0, 0, 0, 0.5, 0.5, 0],
        [0, 0, 0, 0, 0, 0, 0.5, 0.5],
        [0.5, 0, 0, 0, 0, 0, 0, 0.5],
        [0.5, 0.5, 0, 0, 0, 0, 0, 0],
    ],
    "amazon": [
        [0, 0.5, 0, 0, 0, 0, 0, 0.5],
        [0.5, 0, 0.5, 0, 0, 0, 0, 0],
        [0, 0.5, 0, 0.5, 0, 0, 0, 0],
        [0, 0, 0.5, 0, 0.5, 0, 0, 0],
        [0, 0, 0, 0.5, 0, 0.5, 0, 0],
    ],
    "binary": [[0, 1], [1, 0]],
}


def circulant_categorical(n_classes: int, preset: str | None = None) -> dict[int, np.ndarray]:
    """Per-class neighbour-class distributions for categorical noise.

    Generic design: class c puts 0.5 on each of c+1 and c+2 (mod C).
    """
    if preset is not None:
        try:
            table = _PRESETS[preset.lower()]
        except KeyError:
            raise ValueError(f"unknown categorical preset {preset!r}") from None
        if len(table) != n_classes:
            raise ValueError(f"preset {preset!r} is for {len(table)} classes, not {n_classes}")
        out = {}
        for c, row in enumerate(table):
            vec = np.zeros(n_classes)
            np.add.at(vec, np.arange(len(row)) % n_classes, row)
            out[c] = vec
        return out
    if n_classes < 3:
        raise ValueError("the circulant design needs at least 3 classes; use a preset")
    out = {}
    for c in range(n_classes):
        vec = np.zeros(n_classes)
        vec[(c + 1) % n_classes] = 0.5
        vec[(c + 2) % n_classes] = 0.5
        out[c] = vec
    return out


@dataclass(frozen=True)
class NoiseSpec:
    k: int
    kind: str = "uniform"
    per_class_distributions: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValidationError("k must be non-negative")
        if self.kind not in ("uniform", "categorical"):
            raise ValidationError(f"unknown noise kind {self.kind!r}")
        for c, vec in self.per_class_distributions.items():
            if abs(float(np.sum(vec)) - 1.0) > 1e-9:
                raise ValidationError(f"distribution for class {c} does not sum to 1")


def _noise_table(g: Graph, spec: NoiseSpec) -> np.ndarray:
    C = g.num_classes
    if spec.kind == "uniform":
        return np.full((C, C), 1.0 / C)
    table = np.zeros((C, C))
    for c in range(C):
        if c not in spec.per_class_distributions:
            raise ValidationError(f"no categorical distribution for class {c}")
        vec = np.asarray(spec.per_class_distributions[c], dtype=np.float64)
        if len(vec) != C:
            raise ValidationError(f"distribution for class {c} has {len(vec)} entries, need {C}")
        table[c] = vec
    extra = set(spec.per_class_distributions) - set(range(C))
    if extra:
        raise ValidationError(f"classes {sorted(extra)} do not exist in the graph")
    return table


def _capacity(g: Graph, table: np.ndarray) -> int:
    y = g.labels
    C = table.shape[0]
    sizes = np.bincount(y[y >= 0], minlength=C)
    allowed = (table > 0) | (table.T > 0)
    e = g.edges[(y[g.edges[:, 0]] >= 0) & (y[g.edges[:, 1]] >= 0)]
    existing = np.zeros((C, C), dtype=np.int64)
    np.add.at(existing, (y[e[:, 0]], y[e[:, 1]]), 1)
    existing = existing + existing.T - np.diag(np.diag(existing))
    total = 0
    for a in range(C):
        for b in range(a, C):
            if not allowed[a, b]:
                continue
            pairs = sizes[a] * (sizes[a] - 1) // 2 if a == b else sizes[a] * sizes[b]
            total += pairs - existing[a, b]
    return int(total)


def add_edge_noise(g: Graph, spec: NoiseSpec) -> Graph:
    """Add exactly ``spec.k`` new edges following the class-conditional scheme.

    Each candidate: v_i uniform over labeled nodes, class c ~ D[y_i], v_j
    uniform in class c.  Self-loops and duplicates are resampled.
    """
    if spec.k == 0:
        return g
    table = _noise_table(g, spec)
    if spec.k > _capacity(g, table):
        raise CapacityError(f"cannot place {spec.k} new edges; only {_capacity(g, table)} slots")
    rng = np.random.default_rng(spec.seed)
    y = g.labels
    n = g.n
    labeled = np.flatnonzero(y >= 0)
    C = table.shape[0]
    members = [np.flatnonzero(y == c) for c in range(C)]
    cum = np.cumsum(table, axis=1)
    cum[:, -1] = 1.0

    def keys(u, v):
        return np.minimum(u, v) * n + np.maximum(u, v)

    taken = np.sort(keys(g.edges[:, 0], g.edges[:, 1])) if g.num_edges else np.zeros(0, np.int64)
    added = []
    remaining = spec.k
    while remaining > 0:
        batch = max(1024, int(remaining * 1.5))
        vi = labeled[rng.integers(0, len(labeled), batch)]
        cls = (rng.random(batch)[:, None] > cum[y[vi]]).sum(axis=1)
        vj = np.empty(batch, dtype=np.int64)
        ok = np.zeros(batch, dtype=bool)
        draws = rng.random(batch)
        for c in range(C):
            sel = cls == c
            if len(members[c]) and sel.any():
                vj[sel] = members[c][(draws[sel] * len(members[c])).astype(np.int64)]
                ok[sel] = True
        vj[~ok] = 0
        ok &= vi != vj
        cand = keys(vi, vj)
        if len(taken):
            pos = np.minimum(np.searchsorted(taken, cand), len(taken) - 1)
            ok &= taken[pos] != cand
        cand = cand[ok]
        _, first = np.unique(cand, return_index=True)
        fresh = cand[np.sort(first)][:remaining]
        added.append(fresh)
        taken = np.union1d(taken, fresh)
        remaining -= len(fresh)
    new_keys = np.concatenate(added)
    new_edges = np.stack([new_keys // n, new_keys % n], axis=1)
    return Graph(g.features, canonical_edges(np.concatenate([g.edges, new_edges])),
                 g.labels, g.splits)


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class PerClassCount:
    train_per_class: int = 20
    val: int = 500
    test: int | None = None  # None: every remaining labeled node


@dataclass(frozen=True)
class Fractions:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValidationError("split fractions must sum to 1")


def make_splits(g: Graph, scheme, repeats: int = 1, seed: int = 0) -> list[dict]:
    """``repeats`` independent splits; split i uses seed ``seed + i``."""
    labeled = np.flatnonzero(g.labels >= 0)
    splits = []
    for i in range(repeats):
        rng = np.random.default_rng(seed + i)
        if isinstance(scheme, PerClassCount):
            train = []
            for c in range(g.num_classes):
                pool = labeled[g.labels[labeled] == c]
                if len(pool) < scheme.train_per_class:
                    raise CapacityError(f"class {c} has {len(pool)} labeled nodes, "
                                        f"need {scheme.train_per_class}")
                train.append(rng.choice(pool, scheme.train_per_class, replace=False))
            train = np.sort(np.concatenate(train))
            rest = rng.permutation(np.setdiff1d(labeled, train))
            val = np.sort(rest[:scheme.val])
            tail = rest[scheme.val:]
            test = np.sort(tail if scheme.test is None else tail[:scheme.test])
        elif isinstance(scheme, Fractions):
            order = rng.permutation(labeled)
            n_train = int(round(scheme.train * len(order)))
            n_val = int(round(scheme.val * len(order)))
            train = np.sort(order[:n_train])
            val = np.sort(order[n_train:n_train + n_val])
            test = np.sort(order[n_train + n_val:])
        else:
            raise TypeError(f"unknown split scheme {scheme!r}")
        splits.append({"train": train, "val": val, "test": test})
    return splits

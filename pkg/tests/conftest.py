import numpy as np
import pytest

from es_split.graph import Graph, canonical_edges
from es_split.synth import CSBMSpec, Fractions, csbm_generate, make_splits


def random_graph(n, p, seed, n_classes=3, d=4, unlabeled=0.0):
    """Erdos-Renyi graph with random labels/features (some labels optionally -1)."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    labels = rng.integers(0, n_classes, n)
    if unlabeled:
        labels[rng.random(n) < unlabeled] = -1
    return Graph(rng.normal(size=(n, d)), edges, labels)


def small_csbm(n=12, p=0.5, q=0.3, d=5, seed=1):
    g = csbm_generate(CSBMSpec(n, p, q, d=d, seed=seed))
    return g.with_splits(make_splits(g, Fractions(0.5, 0.25, 0.25), 1, seed))


@pytest.fixture
def tiny_graph():
    return small_csbm()


@pytest.fixture
def path_graph():
    """0-1-2-3-4-5 path with alternating labels."""
    edges = canonical_edges([(i, i + 1) for i in range(5)])
    return Graph(np.eye(6), edges, np.array([0, 1, 0, 1, 0, 1]))

import dataclasses
import math

import numpy as np
import pytest

from es_split import autodiff as ad
from es_split.autodiff import Tape, Tensor, backward, finite_difference_check
from es_split.errors import ShapeError
from es_split.graph import Graph, WeightedAdjacency, canonical_edges
from es_split.model import (
    EdgeStructure,
    LossOptions,
    LossWeights,
    PreparedGraph,
    channel_forward,
    compute_split,
    esmlp_loss,
    forced_split,
    forward_logits,
    gamma_hat,
    gamma_hat_block,
    gcn_forward,
    graphmlp_forward_and_loss,
    icr_loss,
    init_params,
    load_params,
    mlp_loss,
    model_loss,
    nc_loss,
    nc_terms,
    power_block,
    predict,
    save_params,
)
from es_split.synth import NoiseSpec, add_edge_noise

from conftest import random_graph, small_csbm


def randomized(params, seed, scale=0.5):
    """Same architecture with every tensor (splitter included) drawn at random."""
    rng = np.random.default_rng(seed)
    return params.with_arrays({k: scale * rng.normal(size=v.shape) for k, v in params.arrays().items()})


def with_tensors(params, tensors):
    return dataclasses.replace(params, weights=tensors)


def dense_gamma_hat(a_r, a_ir, r):
    """Oracle: dense matrix powers, diagonal removed, channel-wise normalization."""
    g_r = np.linalg.matrix_power(a_r, r)
    g_ir = np.linalg.matrix_power(a_ir, r)
    np.fill_diagonal(g_r, 0.0)
    np.fill_diagonal(g_ir, 0.0)
    total = g_r + g_ir
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, g_r / safe, 0.0), np.where(total > 0, g_ir / safe, 0.0)


def nc_oracle(z, gamma, tau):
    """Double-loop evaluation of the contrastive display; returns (mean, skipped)."""
    b = len(z)
    terms, skipped = [], 0
    for i in range(b):
        num = den = 0.0
        for j in range(b):
            if j == i:
                continue
            sim = z[i] @ z[j] / (np.linalg.norm(z[i]) * np.linalg.norm(z[j]))
            e = math.exp(sim / tau)
            den += e
            num += gamma[i, j] * e
        if gamma[i].sum() > 0:
            terms.append(-math.log(num / den))
        else:
            skipped += 1
    return (sum(terms) / len(terms) if terms else 0.0), skipped


class TestChannel:
    def test_eps_one_returns_z0(self):
        p = init_params("esmlp", 4, 6, 3, seed=0, eps_r=1.0)
        X = np.random.default_rng(0).normal(size=(5, 4))
        z0 = ad.gelu(ad.add(ad.matmul(X, p["R.W0"]), p["R.b0"])).data
        np.testing.assert_array_equal(channel_forward(p, X, "R").data, z0)
        q = randomized(p, 1)
        q = dataclasses.replace(q, eps_r=1.0)
        z0 = ad.gelu(ad.add(ad.matmul(X, q["R.W0"]), q["R.b0"])).data
        np.testing.assert_array_equal(channel_forward(q, X, "R").data, z0)

    def test_eps_zero_depth_one(self):
        p = randomized(init_params("mlp", 4, 6, 3, seed=0, depth=1, eps_r=0.0), 2)
        X = np.random.default_rng(0).normal(size=(5, 4))
        z0 = ad.gelu(ad.add(ad.matmul(X, p["R.W0"]), p["R.b0"])).data
        np.testing.assert_allclose(channel_forward(p, X, "R").data, z0 @ p["R.W1"].data, rtol=1e-14)

    def test_recursion_oracle(self):
        p = randomized(init_params("esmlp", 3, 4, 2, seed=0, eps_ir=0.3, activation="relu"), 3)
        X = np.random.default_rng(1).normal(size=(6, 3))
        a = p.arrays()
        z0 = np.maximum(X @ a["IR.W0"] + a["IR.b0"], 0.0)
        z = z0
        for k in (1, 2):
            z = 0.3 * z0 + 0.7 * z @ a[f"IR.W{k}"]
        np.testing.assert_allclose(channel_forward(p, X, "IR").data, z, rtol=1e-12)

    def test_dropout_only_in_training(self):
        p = init_params("mlp", 4, 8, 2, seed=0)
        X = np.random.default_rng(0).normal(size=(10, 4))
        ev = channel_forward(p, X, "R", training=False, dropout=0.5, step=(0, 1)).data
        np.testing.assert_array_equal(ev, channel_forward(p, X, "R").data)
        tr = channel_forward(p, X, "R", training=True, dropout=0.5, step=(0, 1)).data
        assert not np.array_equal(tr, ev)

    def test_shape_error(self):
        p = init_params("mlp", 4, 8, 2)
        with pytest.raises(ShapeError):
            channel_forward(p, np.zeros((3, 5)))
        with pytest.raises(ShapeError):
            predict(p, np.zeros((3, 5)))

    def test_init_shared_names_identical(self):
        a = init_params("mlp", 5, 7, 3, seed=4).arrays()
        b = init_params("esmlp", 5, 7, 3, seed=4).arrays()
        c = init_params("graphmlp", 5, 7, 3, seed=4).arrays()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
            np.testing.assert_array_equal(a[k], c[k])
        assert np.all(b["split.w"] == 0)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            init_params("transformer", 2, 2, 2)
        with pytest.raises(ValueError):
            init_params("esmlp", 2, 2, 2, eps_r=1.5)


class TestSplit:
    def test_zero_splitter_gives_half(self, tiny_graph):
        p = init_params("esmlp", tiny_graph.num_features, 4, 2, seed=0)
        zr = channel_forward(p, tiny_graph.features, "R")
        zir = channel_forward(p, tiny_graph.features, "IR")
        s = compute_split(p, zr, zir, tiny_graph.edges)
        np.testing.assert_array_equal(s.a_r.data, 0.5)
        np.testing.assert_array_equal(s.a_ir.data, 0.5)

    def test_explicit_concatenation(self, tiny_graph):
        p = randomized(init_params("esmlp", tiny_graph.num_features, 4, 2, seed=0), 5)
        zr = channel_forward(p, tiny_graph.features, "R").data
        zir = channel_forward(p, tiny_graph.features, "IR").data
        s = compute_split(p, zr, zir, tiny_graph.edges)
        P = np.concatenate([zr, zir], axis=1)
        u, v = tiny_graph.edges[:, 0], tiny_graph.edges[:, 1]
        cat = np.concatenate([P[u], P[v]], axis=1)
        expected = np.tanh(cat @ p.arrays()["split.w"] + p.arrays()["split.b"])
        np.testing.assert_allclose(s.alpha.data, expected, rtol=1e-12)
        np.testing.assert_allclose(s.a_r.data + s.a_ir.data, 1.0, atol=1e-15)

    def test_saturated_limit(self):
        s = forced_split([[0, 1]], 2, 1.0)
        assert s.a_r.item() == 1.0 and s.a_ir.item() == 0.0

    def test_splitter_width_checked(self):
        p = init_params("esmlp", 3, 4, 2)
        with pytest.raises(ShapeError):
            compute_split(p, np.zeros((3, 5)), np.zeros((3, 5)), [[0, 1]])


class TestGammaHat:
    def test_half_split_r1(self, path_graph):
        s = forced_split(path_graph.edges, 6, 0.0)
        g_r, g_ir = gamma_hat(s.adjacency("R"), s.adjacency("IR"), 1)
        dense_r = g_r.to_dense()
        adj = path_graph.adjacency.toarray()
        np.testing.assert_allclose(dense_r[adj > 0], 0.5)
        np.testing.assert_allclose(g_ir.to_dense()[adj > 0], 0.5)
        assert np.all(dense_r[adj == 0] == 0)

    def test_ratio_arithmetic(self):
        # gamma_R = 0.09 and gamma_IR = 0.01 on the single pair
        a_r = WeightedAdjacency.from_edges(2, [[0, 1]], [0.09])
        a_ir = WeightedAdjacency.from_edges(2, [[0, 1]], [0.01])
        g_r, g_ir = gamma_hat(a_r, a_ir, 1)
        assert abs(g_r[0, 1] - 0.9) < 1e-12 and abs(g_ir[0, 1] - 0.1) < 1e-12

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_dense_oracle_path(self, path_graph, r):
        alpha = np.array([0.8, -0.3, 0.1, 0.6, -0.9])
        a_r = WeightedAdjacency.from_edges(6, path_graph.edges, (1 + alpha) / 2)
        a_ir = WeightedAdjacency.from_edges(6, path_graph.edges, (1 - alpha) / 2)
        exp_r, exp_ir = dense_gamma_hat(a_r.to_dense(), a_ir.to_dense(), r)
        g_r, g_ir = gamma_hat(a_r, a_ir, r)
        np.testing.assert_allclose(g_r.to_dense(), exp_r, atol=1e-14)
        np.testing.assert_allclose(g_ir.to_dense(), exp_ir, atol=1e-14)
        total = g_r.to_dense() + g_ir.to_dense()
        assert np.all((np.abs(total) < 1e-12) | (np.abs(total - 1) < 1e-12))

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_block_matches_full(self, r):
        g = random_graph(14, 0.3, seed=r)
        alpha = np.random.default_rng(r).uniform(-0.9, 0.9, size=(g.num_edges, 1))
        s = forced_split(g.edges, g.n, 0.0)
        s = dataclasses.replace(s, a_r=Tensor((1 + alpha) / 2), a_ir=Tensor((1 - alpha) / 2))
        batch = np.array([0, 2, 3, 7, 8, 11, 13])
        b_r, b_ir = gamma_hat_block(s, EdgeStructure(g.n, g.edges), r, batch)
        exp_r, exp_ir = dense_gamma_hat(s.adjacency("R").to_dense(), s.adjacency("IR").to_dense(), r)
        np.testing.assert_allclose(b_r.data, exp_r[np.ix_(batch, batch)], atol=1e-13)
        np.testing.assert_allclose(b_ir.data, exp_ir[np.ix_(batch, batch)], atol=1e-13)


class TestPowerBlock:
    @pytest.mark.parametrize("r", [1, 2, 3, 4])
    def test_dense_oracle(self, r):
        g = random_graph(16, 0.25, seed=10 + r)
        w = np.random.default_rng(r).uniform(0.1, 1.0, size=(g.num_edges, 1))
        A = WeightedAdjacency.from_edges(g.n, g.edges, w.reshape(-1)).to_dense()
        batch = np.array([1, 4, 5, 9, 15])
        out = power_block(Tensor(w), EdgeStructure(g.n, g.edges), r, batch).data
        np.testing.assert_allclose(out, np.linalg.matrix_power(A, r)[np.ix_(batch, batch)], rtol=1e-12)

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_gradient(self, r):
        g = random_graph(10, 0.35, seed=r)
        structure = EdgeStructure(g.n, g.edges)
        rng = np.random.default_rng(r)
        coef = rng.normal(size=(6, 6))
        batch = np.array([0, 1, 3, 5, 6, 9])
        rep = finite_difference_check(
            lambda p: ad.sum_all(ad.mul(power_block(p["w"], structure, r, batch), coef)),
            {"w": rng.uniform(0.2, 1.0, size=(g.num_edges, 1))})
        assert rep.ok, rep.max_rel_error


class TestNC:
    def test_identical_embeddings_ln2(self):
        z = np.ones((3, 2))
        gamma = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
        loss, info = nc_loss(z, gamma, 0.5, np.arange(3))
        np.testing.assert_allclose(loss.item(), math.log(2), rtol=1e-14)
        assert info == {"contributing": 3, "skipped": 0}

    def test_no_positives_skipped(self):
        loss, info = nc_loss(np.random.default_rng(0).normal(size=(4, 3)), np.zeros((4, 4)), 1.0, np.arange(4))
        assert loss.item() == 0.0 and info["skipped"] == 4

    @pytest.mark.parametrize("seed", range(5))
    def test_double_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(15, 4))
        batch = np.sort(rng.choice(15, 10, replace=False))
        gamma = rng.uniform(size=(10, 10)) * (rng.random((10, 10)) < 0.3)
        np.fill_diagonal(gamma, 0.0)
        loss, info = nc_loss(z, gamma, 0.7, batch)
        exp, skipped = nc_oracle(z[batch], gamma, 0.7)
        np.testing.assert_allclose(loss.item(), exp, rtol=1e-12)
        assert info["skipped"] == skipped

    def test_gradient_through_embeddings_and_weights(self):
        rng = np.random.default_rng(3)
        gamma = rng.uniform(size=(6, 6)) * (rng.random((6, 6)) < 0.5)
        np.fill_diagonal(gamma, 0.0)
        params = {"z": rng.normal(size=(8, 3)), "g": gamma}
        batch = np.array([0, 1, 3, 4, 6, 7])
        rep = finite_difference_check(lambda p: nc_loss(p["z"], p["g"], 0.5, batch)[0], params)
        assert rep.ok, rep.max_rel_error

    def test_argument_errors(self):
        with pytest.raises(ValueError):
            nc_terms(np.ones((3, 2)), np.zeros((1, 1)), 1.0, [0])
        with pytest.raises(ValueError):
            nc_terms(np.ones((3, 2)), np.zeros((2, 2)), 0.0, [0, 1])
        with pytest.raises(ShapeError):
            nc_terms(np.ones((3, 2)), np.zeros((3, 3)), 1.0, [0, 1])


class TestICR:
    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        g = random_graph(12, 0.3, seed=0)
        z = rng.normal(size=(12, 3))
        probs = rng.dirichlet(np.ones(3), size=12)
        expected = sum((1 - probs[u] @ probs[v]) * np.linalg.norm(z[u] - z[v]) for u, v in g.edges)
        np.testing.assert_allclose(icr_loss(z, probs, g.edges).item(), expected, rtol=1e-12)

    def test_identical_rows_zero(self):
        probs = np.full((3, 2), 0.5)
        assert icr_loss(np.ones((3, 4)), probs, [[0, 1], [1, 2]]).item() == 0.0

    def test_agreeing_one_hot_edge_zero(self):
        z = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
        probs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert icr_loss(z, probs, [[0, 1]]).item() == 0.0
        np.testing.assert_allclose(icr_loss(z, probs, [[1, 2]]).item(), math.hypot(2, 3))

    def test_constant_probs_no_gradient_to_probs(self):
        with Tape() as tape:
            z = Tensor(np.random.default_rng(1).normal(size=(3, 2)), requires_grad=True)
            p = Tensor(np.full((3, 2), 0.5), requires_grad=True)
            loss = icr_loss(z, p.data, [[0, 1], [1, 2]])
        grads = backward(tape, loss)
        assert grads[z].shape == (3, 2)
        assert p not in grads or not np.any(grads[p])


class TestComposite:
    def test_zero_weights_equal_ce(self, tiny_graph):
        p = randomized(init_params("esmlp", tiny_graph.num_features, 4, 2, seed=0), 1)
        loss, diag = esmlp_loss(p, tiny_graph, LossWeights(0.0, 0.0), training=False)
        ce, _ = mlp_loss(p, tiny_graph, training=False)
        assert loss.item() == ce.item()
        assert diag["nc"] is not None and diag["icr"] is not None

    def test_linear_in_weights(self, tiny_graph):
        p = randomized(init_params("esmlp", tiny_graph.num_features, 4, 2, seed=0), 2)
        _, d = esmlp_loss(p, tiny_graph, LossWeights(0.0, 0.0), training=False)
        loss, _ = esmlp_loss(p, tiny_graph, LossWeights(0.7, 0.3), training=False)
        np.testing.assert_allclose(loss.item(), d["ce"] + 0.7 * d["nc"] + 0.3 * d["icr"], rtol=1e-12)

    def test_split_invariants_in_diagnostics(self, tiny_graph):
        p = randomized(init_params("esmlp", tiny_graph.num_features, 4, 2, seed=0), 3)
        _, d = esmlp_loss(p, tiny_graph, LossWeights(1.0, 0.1, r=2), training=False)
        s = d["split"]
        np.testing.assert_allclose(s.a_r.data + s.a_ir.data, 1.0, atol=1e-12)
        total = d["gamma_hat"][0] + d["gamma_hat"][1]
        assert np.all((np.abs(total) < 1e-9) | (np.abs(total - 1) < 1e-9))

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_fixed_alpha_one_reduces_to_graphmlp(self, r):
        g = small_csbm(n=16, p=0.3, q=0.2, seed=r)
        es = randomized(init_params("esmlp", g.num_features, 5, 2, seed=1), r)
        gm = init_params("graphmlp", g.num_features, 5, 2, seed=1)
        gm = gm.with_arrays({k: es.arrays()[k] for k in gm.arrays()})
        w = LossWeights(1.0, 0.0, tau=0.5, r=r)
        _, d_es = esmlp_loss(es, g, w, training=False, opts=LossOptions(fixed_alpha=1.0))
        _, d_gm = graphmlp_forward_and_loss(gm, g, w, training=False)
        assert abs(d_es["nc"] - d_gm["nc"]) <= 1e-8
        assert d_es["nc_skipped"] == d_gm["nc_skipped"]

    def test_graphmlp_alpha_zero_is_mlp(self, tiny_graph):
        gm = randomized(init_params("graphmlp", tiny_graph.num_features, 4, 2), 0)
        mlp = dataclasses.replace(gm, kind="mlp")
        a, _ = graphmlp_forward_and_loss(gm, tiny_graph, LossWeights(0.0), training=False)
        b, _ = mlp_loss(mlp, tiny_graph, training=False)
        assert a.item() == b.item()

    def test_batched_r1_uses_internal_edges(self, tiny_graph):
        p = randomized(init_params("esmlp", tiny_graph.num_features, 4, 2, seed=0), 4)
        batch = np.arange(0, 12, 2)
        _, d = esmlp_loss(p, tiny_graph, LossWeights(1.0, 0.0), batch=batch, training=False)
        inside = np.isin(tiny_graph.edges, batch).all(axis=1)
        np.testing.assert_array_equal(d["split"].edges, tiny_graph.edges[inside])
        assert d["gamma_hat"][0].shape == (6, 6)


def _fd_loss(params, graph, weights, opts):
    def f(tensors):
        return model_loss(with_tensors(params, tensors), graph, weights, training=False, opts=opts)[0]
    return f


class TestModelGradients:
    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_esmlp(self, r):
        g = small_csbm(n=12, p=0.5, q=0.3, d=5, seed=r)
        p = randomized(init_params("esmlp", 5, 3, 2, seed=r), 10 + r)
        opts = LossOptions(icr_detach_probs=False)
        rep = finite_difference_check(_fd_loss(p, g, LossWeights(0.8, 0.05, tau=0.7, r=r), opts), p.arrays())
        assert rep.ok, rep.worst

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_graphmlp(self, r):
        g = small_csbm(n=12, p=0.5, q=0.3, d=5, seed=r)
        p = randomized(init_params("graphmlp", 5, 3, 2, seed=r), 20 + r)
        rep = finite_difference_check(_fd_loss(p, g, LossWeights(0.8, tau=0.7, r=r), None), p.arrays())
        assert rep.ok, rep.worst

    @pytest.mark.parametrize("kind", ["mlp", "gcn"])
    def test_baselines(self, kind, tiny_graph):
        p = randomized(init_params(kind, 5, 4, 2, seed=0, activation="gelu"), 7)
        rep = finite_difference_check(_fd_loss(p, tiny_graph, LossWeights(), None), p.arrays())
        assert rep.ok, rep.worst

    def test_esmlp_batched_r2(self):
        g = small_csbm(n=14, p=0.4, q=0.3, d=4, seed=8)
        p = randomized(init_params("esmlp", 4, 3, 2, seed=8), 8)
        batch = np.array([0, 2, 3, 5, 8, 9, 12, 13])
        opts = LossOptions(icr_detach_probs=False)

        def f(t):
            return esmlp_loss(with_tensors(p, t), g, LossWeights(1.0, 0.1, r=2), batch=batch,
                              training=False, opts=opts)[0]

        rep = finite_difference_check(f, p.arrays())
        assert rep.ok, rep.worst


class TestInference:
    def test_predict_ignores_edges(self, tiny_graph):
        for kind in ("mlp", "graphmlp", "esmlp"):
            p = randomized(init_params(kind, 5, 4, 2), 1)
            noisy = add_edge_noise(tiny_graph, NoiseSpec(10, seed=1))
            np.testing.assert_array_equal(forward_logits(p, tiny_graph), forward_logits(p, noisy))

    def test_identical_rows_identical_labels(self):
        p = randomized(init_params("esmlp", 3, 4, 3), 2)
        X = np.tile(np.array([[0.3, -1.0, 2.0]]), (4, 1))
        _, labels = predict(p, X)
        assert len(set(labels.tolist())) == 1

    def test_predict_rejects_gcn(self):
        with pytest.raises(ValueError):
            predict(init_params("gcn", 3, 4, 2), np.zeros((2, 3)))

    def test_gcn_edgeless_is_mlp(self):
        g = Graph(np.random.default_rng(0).normal(size=(5, 3)), np.zeros((0, 2), dtype=np.int64),
                  np.zeros(5, dtype=np.int64))
        p = randomized(init_params("gcn", 3, 4, 2), 0)
        a = p.arrays()
        h = np.maximum(g.features @ a["gcn.W1"] + a["gcn.b1"], 0.0)
        np.testing.assert_allclose(gcn_forward(p, g).data, h @ a["gcn.W2"] + a["gcn.b2"], rtol=1e-12)

    def test_gcn_permutation_equivariant(self, tiny_graph):
        p = randomized(init_params("gcn", 5, 4, 2), 3)
        perm = np.random.default_rng(0).permutation(tiny_graph.n)
        inv = np.argsort(perm)
        g2 = Graph(tiny_graph.features[perm], canonical_edges(inv[tiny_graph.edges]),
                   tiny_graph.labels[perm])
        np.testing.assert_allclose(gcn_forward(p, g2).data, gcn_forward(p, tiny_graph).data[perm],
                                   rtol=1e-12, atol=1e-14)

    def test_gcn_uses_edges(self, tiny_graph):
        p = randomized(init_params("gcn", 5, 4, 2), 3)
        noisy = add_edge_noise(tiny_graph, NoiseSpec(10, seed=1))
        assert not np.allclose(forward_logits(p, tiny_graph), forward_logits(p, noisy))

    def test_gcn_shape_error(self, tiny_graph):
        with pytest.raises(ShapeError):
            gcn_forward(init_params("gcn", 4, 4, 2), tiny_graph)


class TestPrepared:
    def test_support_excludes_diagonal(self, path_graph):
        s = PreparedGraph(path_graph).support(2).toarray()
        adj = path_graph.adjacency.toarray()
        expected = ((adj @ adj) > 0).astype(float)
        np.fill_diagonal(expected, 0.0)
        np.testing.assert_array_equal(s, expected)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        p = randomized(init_params("esmlp", 5, 4, 3, eps_r=0.25, activation="relu"), 9)
        save_params(p, tmp_path / "p.json")
        q = load_params(tmp_path / "p.json")
        assert (q.kind, q.depth, q.eps_r, q.eps_ir, q.activation) == ("esmlp", 2, 0.25, 0.5, "relu")
        for k, v in p.arrays().items():
            np.testing.assert_array_equal(q.arrays()[k], v)

    def test_loss_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0)
        with pytest.raises(ValueError):
            LossWeights(tau=0.0)
        with pytest.raises(ValueError):
            LossWeights(r=0)

"""ES-MLP and its baselines (MLP, Graph-MLP, GCN).

All four models share parameter naming so that reductions line up exactly:
the relevant channel ``R.*`` plus classifier ``cls.*`` *is* the plain MLP,
Graph-MLP adds only a contrastive term on it, and ES-MLP adds the ``IR.*``
channel and the edge splitter ``split.*``.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ShapeError
from .graph import DEFAULT_PRUNE, Graph, WeightedAdjacency, symmetric_normalize, weighted_power

MODEL_KINDS = ("mlp", "graphmlp", "esmlp", "gcn")
_CHANNEL_CODE = {"R": 1, "IR": 2, "gcn": 3}
_DENSIFY = 0.1


@dataclass(frozen=True)
class LossWeights:
    alpha_nc: float = 1.0
    beta_icr: float = 0.0
    tau: float = 1.0
    r: int = 1

    def __post_init__(self):
        if self.alpha_nc < 0 or self.beta_icr < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.r < 1:
            raise ValueError("adjacency power r must be >= 1")


@dataclass
class ModelParams:
    """Weights (name -> array or Tensor) plus the architecture they belong to."""

    kind: str
    weights: dict
    depth: int = 2
    eps_r: float = 0.5
    eps_ir: float = 0.5
    activation: str = "gelu"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not (0.0 <= self.eps_r <= 1.0 and 0.0 <= self.eps_ir <= 1.0):
            raise ValueError("skip weights must lie in [0, 1]")

    def leaves(self) -> "ModelParams":
        """Copy whose weights are fresh gradient-tracking leaf tensors."""
        return replace(self, weights={k: Tensor(np.asarray(v.data if isinstance(v, Tensor) else v),
                                                requires_grad=True, name=k)
                                      for k, v in self.weights.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in self.weights.items()}

    def with_arrays(self, arrays: dict) -> "ModelParams":
        return replace(self, weights={k: np.array(v, dtype=np.float64) for k, v in arrays.items()})

    def __getitem__(self, name) -> Tensor:
        return as_tensor(self.weights[name])

    @property
    def hidden(self) -> int:
        key = "gcn.W1" if self.kind == "gcn" else "R.W0"
        return self.arrays()[key].shape[1]


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(kind: str, d: int, hidden: int, n_classes: int, seed: int = 0, depth: int = 2,
                eps_r: float = 0.5, eps_ir: float = 0.5, activation: str | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, zero splitter.

    Each tensor draws from its own stream keyed by (seed, name), so models
    sharing parameter names get identical initial values.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")

    def draw(name, fan_in, fan_out):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        return _glorot(rng, fan_in, fan_out)

    w = {}
    if kind == "gcn":
        w["gcn.W1"] = draw("gcn.W1", d, hidden)
        w["gcn.b1"] = np.zeros((1, hidden))
        w["gcn.W2"] = draw("gcn.W2", hidden, n_classes)
        w["gcn.b2"] = np.zeros((1, n_classes))
        return ModelParams(kind, w, depth=depth, eps_r=eps_r, eps_ir=eps_ir,
                           activation=activation or "relu")
    channels = ("R", "IR") if kind == "esmlp" else ("R",)
    for ch in channels:
        w[f"{ch}.W0"] = draw(f"{ch}.W0", d, hidden)
        w[f"{ch}.b0"] = np.zeros((1, hidden))
        for k in range(1, depth + 1):
            w[f"{ch}.W{k}"] = draw(f"{ch}.W{k}", hidden, hidden)
    w["cls.W"] = draw("cls.W", hidden, n_classes)
    w["cls.b"] = np.zeros((1, n_classes))
    if kind == "esmlp":
        w["split.w"] = np.zeros((4 * hidden, 1))
        w["split.b"] = np.zeros((1, 1))
    return ModelParams(kind, w, depth=depth, eps_r=eps_r, eps_ir=eps_ir,
                       activation=activation or "gelu")


def is_bias(name: str) -> bool:
    return ".b" in name


_ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu, "tanh": ad.tanh}


def _dropout(x: Tensor, rate: float, training: bool, step, code: int) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if step is None:
        raise ValueError("training-mode dropout needs a step seed")
    rng = np.random.default_rng([*step, code])
    return ad.dropout(x, rate, rng)


# ---------------------------------------------------------------- forward passes


def channel_forward(params: ModelParams, X, channel: str = "R", training: bool = False,
                    dropout: float = 0.0, step=None) -> Tensor:
    """Z0 = act(X W0 + b0);  Z(k+1) = eps Z0 + (1 - eps) Z(k) W(k+1);  returns Z(K)."""
    X = as_tensor(X)
    W0 = params[f"{channel}.W0"]
    if X.shape[1] != W0.shape[0]:
        raise ShapeError(f"features have {X.shape[1]} columns, model expects {W0.shape[0]}")
    act = _ACTIVATIONS[params.activation]
    z0 = act(ad.add(ad.matmul(X, W0), params[f"{channel}.b0"]))
    z0 = _dropout(z0, dropout, training, step, _CHANNEL_CODE[channel])
    eps = params.eps_r if channel == "R" else params.eps_ir
    z = z0
    for k in range(1, params.depth + 1):
        zw = ad.matmul(z, params[f"{channel}.W{k}"])
        if eps == 0.0:
            z = zw
        elif eps == 1.0:
            z = z0
        else:
            z = ad.add(ad.scale(z0, eps), ad.scale(zw, 1.0 - eps))
    return z


def classify(params: ModelParams, z: Tensor) -> Tensor:
    return ad.add(ad.matmul(z, params["cls.W"]), params["cls.b"])


def predict(params: ModelParams, X) -> tuple[np.ndarray, np.ndarray]:
    """Edge-free inference for the MLP family: logits and argmax labels."""
    if params.kind == "gcn":
        raise ValueError("GCN inference needs the graph; use gcn_forward")
    logits = classify(params, channel_forward(params, X, "R")).data
    return logits, np.argmax(logits, axis=1)


def gcn_forward(params: ModelParams, graph: Graph, training: bool = False, dropout: float = 0.0,
                step=None, norm_adj: sp.spmatrix | None = None, features=None) -> Tensor:
    """Two-layer GCN: A_hat act(A_hat X W1 + b1) W2 + b2."""
    if norm_adj is None:
        norm_adj = normalized_adjacency(graph)
    X = as_tensor(graph.features if features is None else features)
    W1 = params["gcn.W1"]
    if X.shape[1] != W1.shape[0]:
        raise ShapeError(f"features have {X.shape[1]} columns, model expects {W1.shape[0]}")
    act = _ACTIVATIONS[params.activation]
    X = _dropout(X, dropout, training, step, 4)
    h = act(ad.add(ad.sparse_matmul(norm_adj, ad.matmul(X, W1)), params["gcn.b1"]))
    h = _dropout(h, dropout, training, step, _CHANNEL_CODE["gcn"])
    return ad.add(ad.sparse_matmul(norm_adj, ad.matmul(h, params["gcn.W2"])), params["gcn.b2"])


def normalized_adjacency(graph: Graph) -> sp.csr_matrix:
    return symmetric_normalize(WeightedAdjacency.from_edges(graph.n, graph.edges), True).matrix


# ---------------------------------------------------------------- edge splitting


@dataclass
class SplitResult:
    """Per-edge splitting coefficients over canonical (u < v) edges."""

    edges: np.ndarray
    alpha: Tensor
    a_r: Tensor
    a_ir: Tensor
    n: int

    def adjacency(self, channel: str) -> WeightedAdjacency:
        vals = (self.a_r if channel == "R" else self.a_ir).data.reshape(-1)
        return WeightedAdjacency.from_edges(self.n, self.edges, vals)


def compute_split(params: ModelParams, z_r, z_ir, edges, n: int | None = None) -> SplitResult:
    """alpha = tanh(FF[z_R(u) + z_IR(u) + z_R(v) + z_IR(v)]) per canonical edge.

    FF is affine, so it is evaluated as one projection per node (first and
    second half of the splitter) plus a gather per edge; this equals applying
    FF to the explicit 4h concatenation.
    """
    z_r, z_ir = as_tensor(z_r), as_tensor(z_ir)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    h = z_r.shape[1]
    w = params["split.w"]
    if w.shape[0] != 4 * h:
        raise ShapeError(f"splitter expects {w.shape[0] // 4}-wide embeddings, got {h}")
    both = ad.concat_cols([z_r, z_ir])
    left = ad.matmul(both, ad.gather_rows(w, np.arange(2 * h)))
    right = ad.matmul(both, ad.gather_rows(w, np.arange(2 * h, 4 * h)))
    pre = ad.add(ad.add(ad.gather_rows(left, edges[:, 0]), ad.gather_rows(right, edges[:, 1])),
                 params["split.b"])
    alpha = ad.tanh(pre)
    a_r = ad.scale(ad.add(alpha, 1.0), 0.5)
    a_ir = ad.scale(ad.sub(1.0, alpha), 0.5)
    return SplitResult(edges, alpha, a_r, a_ir, z_r.shape[0] if n is None else n)


def forced_split(edges, n: int, alpha: float) -> SplitResult:
    """Constant split (no splitter gradient), e.g. alpha = 1 puts every edge in A_R."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    a = np.full((len(edges), 1), float(alpha))
    return SplitResult(edges, Tensor(a), Tensor((1.0 + a) / 2.0), Tensor((1.0 - a) / 2.0), n)


def gamma_hat(a_r: WeightedAdjacency, a_ir: WeightedAdjacency, r: int,
              prune_below: float = DEFAULT_PRUNE) -> tuple[WeightedAdjacency, WeightedAdjacency]:
    """Renormalized r-th powers over the union support, diagonal excluded."""
    g_r = weighted_power(a_r, r, prune_below).matrix.tolil()
    g_ir = weighted_power(a_ir, r, prune_below).matrix.tolil()
    g_r.setdiag(0)
    g_ir.setdiag(0)
    g_r, g_ir = g_r.tocsr(), g_ir.tocsr()
    total = (g_r + g_ir).tocsr()
    total.eliminate_zeros()
    coo = total.tocoo()
    rows, cols = coo.row, coo.col
    s = np.asarray(coo.data)
    vr = np.asarray(g_r[rows, cols]).reshape(-1) / s
    vir = np.asarray(g_ir[rows, cols]).reshape(-1) / s
    n = a_r.n
    return (WeightedAdjacency(n, sp.csr_matrix((vr, (rows, cols)), shape=(n, n))),
            WeightedAdjacency(n, sp.csr_matrix((vir, (rows, cols)), shape=(n, n))))


class EdgeStructure:
    """CSR layout of a symmetric edge set, reusable for any weight vector."""

    def __init__(self, n: int, edges: np.ndarray):
        self.n = n
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    @cached_property
    def _layout(self):
        m = len(self.edges)
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        eid = np.concatenate([np.arange(m), np.arange(m)]).astype(np.float64) + 1.0
        csr = sp.csr_matrix((eid, (rows, cols)), shape=(self.n, self.n))
        csr.sort_indices()
        return csr.indptr, csr.indices, csr.data.astype(np.int64) - 1

    def matrix(self, weights: np.ndarray) -> sp.csr_matrix:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        indptr, indices, eid = self._layout
        return sp.csr_matrix((w[eid], indices, indptr), shape=(self.n, self.n))


def _right_mul(L, A):
    """L @ A for sparse symmetric A, keeping L dense once it fills in."""
    if sp.issparse(L):
        out = (L @ A).tocsr()
        if out.nnz > _DENSIFY * out.shape[0] * out.shape[1]:
            return out.toarray()
        return out
    return np.asarray((A @ L.T).T)


def _bilinear_at(L, T: np.ndarray, us: np.ndarray, vs: np.ndarray, n: int) -> np.ndarray:
    """(L^T T)[u, v] for every (u, v) pair, computed in row blocks of L^T T.

    Pairs must be sorted by u.
    """
    out = np.zeros(len(us))
    if len(us) == 0:
        return out
    Lc = L.tocsc() if sp.issparse(L) else L
    rows_per_block = max(1, (1 << 22) // max(1, n))
    starts = np.searchsorted(us, np.arange(0, n + rows_per_block, rows_per_block))
    for blk, lo in enumerate(range(0, n, rows_per_block)):
        a, b = starts[blk], starts[blk + 1]
        if a == b:
            continue
        hi = min(lo + rows_per_block, n)
        part = Lc[:, lo:hi]
        prod = np.asarray(part.T @ T) if sp.issparse(part) else part.T @ T
        out[a:b] = prod[us[a:b] - lo, vs[a:b]]
    return out


def power_block(weights: Tensor, structure: EdgeStructure, r: int, batch: np.ndarray) -> Tensor:
    """Differentiable block (A^r)[batch, batch] of the weighted adjacency.

    ``weights`` is the per-edge column (m x 1) over ``structure.edges``.
    """
    if r < 1:
        raise ValueError("adjacency power must be >= 1")
    weights = as_tensor(weights)
    batch = np.asarray(batch, dtype=np.int64)
    b, n = len(batch), structure.n
    us, vs = structure.edges[:, 0], structure.edges[:, 1]
    w = weights.data.reshape(-1)

    if r == 1:
        pos = np.full(n, -1)
        pos[batch] = np.arange(b)
        inside = np.flatnonzero((pos[us] >= 0) & (pos[vs] >= 0))
        pu, pv = pos[us[inside]], pos[vs[inside]]
        out = np.zeros((b, b))
        out[pu, pv] = w[inside]
        out[pv, pu] = w[inside]

        def grad_fn(g):
            dw = np.zeros((len(w), 1))
            dw[inside, 0] = g[pu, pv] + g[pv, pu]
            return (dw,)

        return ad.apply_op("power_block", (weights,), out, grad_fn)

    A = structure.matrix(w)
    select = sp.csr_matrix((np.ones(b), (np.arange(b), batch)), shape=(b, n))
    L = [select, A[batch].tocsr()]
    for _ in range(2, r):
        L.append(_right_mul(L[-1], A))
    last, first = L[r - 1], L[1]
    if sp.issparse(last):
        out = np.asarray((last @ first.T).todense())
    else:
        out = np.asarray(first @ last.T).T

    def grad_fn(g):
        H = g + g.T
        dw = np.zeros(len(w))
        for k in range(r):
            other = L[r - 1 - k]
            T = np.asarray((other.T @ H.T).T) if sp.issparse(other) else H @ other
            dw += _bilinear_at(L[k], T, us, vs, n)
        return (dw.reshape(-1, 1),)

    return ad.apply_op("power_block", (weights,), out, grad_fn)


def gamma_hat_block(split: SplitResult, structure: EdgeStructure, r: int, batch,
                    prune_below: float = DEFAULT_PRUNE, detach: bool = False) -> tuple[Tensor, Tensor]:
    """Differentiable renormalized weights restricted to ``batch`` x ``batch``."""
    a_r, a_ir = split.a_r, split.a_ir
    if detach:
        a_r, a_ir = a_r.detach(), a_ir.detach()
    g_r = power_block(a_r, structure, r, batch)
    g_ir = power_block(a_ir, structure, r, batch)
    off = 1.0 - np.eye(len(batch))
    keep_r = off * (np.abs(g_r.data) >= prune_below)
    keep_ir = off * (np.abs(g_ir.data) >= prune_below)
    g_r = ad.mul(g_r, keep_r)
    g_ir = ad.mul(g_ir, keep_ir)
    total = ad.add(g_r, g_ir)
    empty = (total.data <= 0).astype(np.float64)
    safe = ad.add(total, empty)
    return ad.div(g_r, safe), ad.div(g_ir, safe)


# ---------------------------------------------------------------- losses


def nc_terms(z, gamma_block, tau: float, batch) -> tuple[Tensor, np.ndarray]:
    """Per-node contrastive terms over ``batch`` and the mask of contributing nodes.

    Term i is -log(sum_j g_ij e_ij / sum_{k != i} e_ik) with
    e = exp(cos_sim / tau); rows without positive mass contribute 0.
    """
    batch = np.asarray(batch, dtype=np.int64)
    b = len(batch)
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 nodes")
    if tau <= 0:
        raise ValueError("tau must be positive")
    gamma_block = as_tensor(gamma_block)
    if gamma_block.shape != (b, b):
        raise ShapeError(f"weight block is {gamma_block.shape}, batch has {b} nodes")
    zb = ad.gather_rows(z, batch)
    mask = gamma_block.data.sum(axis=1) > 0
    return _contrastive_rows(zb, gamma_block, tau, mask), mask


def _contrastive_rows(zb: Tensor, gamma: Tensor, tau: float, mask: np.ndarray) -> Tensor:
    """Fused per-row term  m_i * (log sum_{k!=i} e_ik - log sum_j g_ij e_ij).

    One op instead of a dozen b x b elementwise records; the cosine part
    follows ``autodiff.cosine_similarity_matrix`` (same zero-norm clamp).
    """
    norms = np.linalg.norm(zb.data, axis=1, keepdims=True)
    clamped = norms < ad.COSINE_EPS
    if clamped.any():
        ad.warning_counts["cosine_zero_norm"] += int(clamped.sum())
    denom = np.where(clamped, ad.COSINE_EPS, norms)
    u = zb.data / denom
    E = np.exp((u @ u.T) / tau)
    np.fill_diagonal(E, 0.0)
    G = gamma.data
    m = mask.astype(np.float64).reshape(-1, 1)
    den = E.sum(axis=1, keepdims=True)
    num = (E * G).sum(axis=1, keepdims=True) + (1.0 - m)
    out = m * (np.log(den) - np.log(num))

    def grad_fn(g):
        gm = g * m
        dG = None
        if gamma.requires_grad:
            dG = -(gm / num) * E
        gs = (gm / den - (gm / num) * G) * E / tau
        du = (gs + gs.T) @ u
        radial = np.where(clamped, 0.0, np.sum(u * du, axis=1, keepdims=True))
        return (du - u * radial) / denom, dG

    return ad.apply_op("contrastive_rows", (zb, gamma), out, grad_fn)


def nc_loss(z, gamma_block, tau: float, batch) -> tuple[Tensor, dict]:
    """Mean contrastive term over contributing batch nodes."""
    terms, mask = nc_terms(z, gamma_block, tau, batch)
    count = int(mask.sum())
    info = {"contributing": count, "skipped": len(mask) - count}
    if count == 0:
        return Tensor(0.0), info
    return ad.scale(ad.sum_all(terms), 1.0 / count), info


def icr_loss(z_ir, probs, edges) -> Tensor:
    """sum over edges of (1 - p_u . p_v) * ||z_IR(u) - z_IR(v)||.

    ``probs`` given as an array is held constant; a Tensor keeps its gradient.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        return Tensor(0.0)
    dist = ad.row_distance(z_ir, edges[:, 0], edges[:, 1])
    if isinstance(probs, Tensor) and probs.requires_grad:
        agree = ad.row_sum(ad.mul(ad.gather_rows(probs, edges[:, 0]), ad.gather_rows(probs, edges[:, 1])))
        return ad.sum_all(ad.mul(dist, ad.sub(1.0, agree)))
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    coef = 1.0 - np.einsum("ij,ij->i", p[edges[:, 0]], p[edges[:, 1]])
    return ad.sum_all(ad.mul(dist, coef.reshape(-1, 1)))


def softmax_tensor(logits: Tensor) -> Tensor:
    """Differentiable row softmax."""
    shift = logits.data.max(axis=1, keepdims=True)
    e = ad.exp(ad.sub(logits, shift))
    return ad.div(e, ad.row_sum(e))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- graph context


class PreparedGraph:
    """Per-graph structures reused across training steps."""

    def __init__(self, graph: Graph):
        self.graph = graph
        self.structure = EdgeStructure(graph.n, graph.edges)
        self._support: dict[int, sp.csr_matrix] = {}

    @property
    def n(self) -> int:
        return self.graph.n

    @cached_property
    def norm_adj(self) -> sp.csr_matrix:
        return normalized_adjacency(self.graph)

    def support(self, r: int) -> sp.csr_matrix:
        """Indicator of node pairs joined by an r-walk, diagonal excluded."""
        if r not in self._support:
            base = self.graph.adjacency
            p = base.copy()
            for _ in range(r - 1):
                p = (p @ base).tocsr()
                p.data[:] = 1.0
            p = p.tolil()
            p.setdiag(0)
            p = p.tocsr()
            p.eliminate_zeros()
            p.data[:] = 1.0
            self._support[r] = p
        return self._support[r]

    def edges_within(self, batch: np.ndarray) -> np.ndarray:
        if len(batch) == self.n:
            return self.graph.edges
        inside = np.zeros(self.n, dtype=bool)
        inside[batch] = True
        e = self.graph.edges
        return e[inside[e[:, 0]] & inside[e[:, 1]]]


def _prepared(graph) -> PreparedGraph:
    return graph if isinstance(graph, PreparedGraph) else PreparedGraph(graph)


@dataclass
class LossOptions:
    dropout: float = 0.0
    detach_gamma: bool = False
    prune_below: float = DEFAULT_PRUNE
    icr_detach_probs: bool = True
    fixed_alpha: float | None = None
    # evaluate zero-weight terms for diagnostics (off the tape either way)
    compute_inactive: bool = True


def _ce_and_logits(params, X, graph, training, opts, step):
    z_r = channel_forward(params, X, "R", training, opts.dropout, step)
    logits = classify(params, z_r)
    ce = ad.softmax_cross_entropy(logits, graph.labels, graph.train)
    return z_r, logits, ce


def _combine(ce: Tensor, parts) -> Tensor:
    loss = ce
    for weight, term in parts:
        if weight != 0.0:
            loss = ad.add(loss, ad.scale(term, weight))
    return loss


def mlp_loss(params: ModelParams, graph, training: bool = True, step=None,
             opts: LossOptions | None = None) -> tuple[Tensor, dict]:
    opts = opts or LossOptions()
    g = _prepared(graph).graph
    _, logits, ce = _ce_and_logits(params, g.features, g, training, opts, step)
    return ce, {"ce": ce.item(), "logits": logits.data}


def graphmlp_forward_and_loss(params: ModelParams, graph, weights: LossWeights, batch=None,
                              training: bool = True, step=None,
                              opts: LossOptions | None = None) -> tuple[Tensor, dict]:
    """Cross-entropy plus the single-channel contrastive term on r-walk neighbours."""
    opts = opts or LossOptions()
    pg = _prepared(graph)
    g = pg.graph
    batch = np.arange(g.n) if batch is None else np.asarray(batch, dtype=np.int64)
    z_r, logits, ce = _ce_and_logits(params, g.features, g, training, opts, step)
    diag = {"ce": ce.item(), "nc": None, "nc_skipped": None, "logits": logits.data}
    if not (weights.alpha_nc or opts.compute_inactive):
        return ce, diag
    block = pg.support(weights.r)[batch][:, batch].toarray()
    nc, info = nc_loss(z_r if weights.alpha_nc else z_r.detach(), block, weights.tau, batch)
    diag.update(nc=nc.item(), nc_skipped=info["skipped"])
    return _combine(ce, [(weights.alpha_nc, nc)]), diag


def esmlp_loss(params: ModelParams, graph, weights: LossWeights, batch=None, training: bool = True,
               step=None, opts: LossOptions | None = None) -> tuple[Tensor, dict]:
    """L = CE + alpha_NC * L_NC + beta_ICR * L_ICR for ES-MLP.

    ``batch`` restricts the contrastive and consistency terms to a node
    subset (None = all nodes).  Diagnostics carry the three components, the
    skipped-node count, the split and the renormalized weight blocks.
    """
    opts = opts or LossOptions()
    pg = _prepared(graph)
    g = pg.graph
    full = batch is None
    batch = np.arange(g.n) if full else np.asarray(batch, dtype=np.int64)
    z_r, logits, ce = _ce_and_logits(params, g.features, g, training, opts, step)
    z_ir = channel_forward(params, g.features, "IR", training, opts.dropout, step)

    if weights.r == 1 and not full:
        split_edges = pg.edges_within(batch)
        structure = EdgeStructure(g.n, split_edges)
    else:
        split_edges, structure = g.edges, pg.structure
    diag = {"ce": ce.item(), "nc": None, "icr": None, "nc_skipped": None, "split": None,
            "gamma_hat": None, "batch": batch, "logits": logits.data}
    parts = []

    if weights.alpha_nc or opts.compute_inactive:
        zr_nc, zir_nc = (z_r, z_ir) if weights.alpha_nc else (z_r.detach(), z_ir.detach())
        split = compute_split(params, zr_nc, zir_nc, split_edges, g.n)
        if opts.fixed_alpha is not None:
            split = forced_split(split_edges, g.n, opts.fixed_alpha)
        gh_r, gh_ir = gamma_hat_block(split, structure, weights.r, batch,
                                      opts.prune_below, opts.detach_gamma)
        terms_r, mask_r = nc_terms(zr_nc, gh_r, weights.tau, batch)
        terms_ir, mask_ir = nc_terms(zir_nc, gh_ir, weights.tau, batch)
        count = int((mask_r | mask_ir).sum())
        if count:
            nc = ad.scale(ad.sum_all(ad.add(terms_r, terms_ir)), 1.0 / count)
        else:
            nc = Tensor(0.0)
        parts.append((weights.alpha_nc, nc))
        diag.update(nc=nc.item(), nc_skipped=len(batch) - count, split=split,
                    gamma_hat=(gh_r.data, gh_ir.data))

    if weights.beta_icr or opts.compute_inactive:
        probs = softmax(logits.data) if opts.icr_detach_probs else softmax_tensor(logits)
        icr_edges = split_edges if (weights.r == 1 and not full) else pg.edges_within(batch)
        icr = icr_loss(z_ir if weights.beta_icr else z_ir.detach(), probs, icr_edges)
        parts.append((weights.beta_icr, icr))
        diag["icr"] = icr.item()

    return _combine(ce, parts), diag


def model_loss(params: ModelParams, graph, weights: LossWeights, batch=None, training=True,
               step=None, opts: LossOptions | None = None) -> tuple[Tensor, dict]:
    """Dispatch to the training loss of ``params.kind``."""
    if params.kind == "esmlp":
        return esmlp_loss(params, graph, weights, batch, training, step, opts)
    if params.kind == "graphmlp":
        return graphmlp_forward_and_loss(params, graph, weights, batch, training, step, opts)
    if params.kind == "mlp":
        return mlp_loss(params, graph, training, step, opts)
    opts = opts or LossOptions()
    pg = _prepared(graph)
    logits = gcn_forward(params, pg.graph, training, opts.dropout, step, pg.norm_adj)
    ce = ad.softmax_cross_entropy(logits, pg.graph.labels, pg.graph.train)
    return ce, {"ce": ce.item(), "logits": logits.data}


def forward_logits(params: ModelParams, graph, features=None) -> np.ndarray:
    """Evaluation-mode logits.  MLP-family models ignore the edges entirely."""
    if params.kind == "gcn":
        pg = _prepared(graph)
        return gcn_forward(params, pg.graph, norm_adj=pg.norm_adj, features=features).data
    X = features if features is not None else _prepared(graph).graph.features
    return predict(params, X)[0]


# ---------------------------------------------------------------- checkpoints


def params_to_json(params: ModelParams) -> dict:
    """Shape-tagged flat arrays; Python's float repr round-trips exactly."""
    return {
        "kind": params.kind, "depth": params.depth, "eps_r": params.eps_r,
        "eps_ir": params.eps_ir, "activation": params.activation,
        "weights": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                    for k, v in params.arrays().items()},
    }


def params_from_json(payload: dict) -> ModelParams:
    payload = dict(payload)
    weights = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
               for k, v in payload.pop("weights").items()}
    return ModelParams(weights=weights, **payload)


def save_params(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_json(params)))


def load_params(path) -> ModelParams:
    return params_from_json(json.loads(Path(path).read_text()))

"""Optimization loop, early stopping, metrics and inference timing."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import defaults
from .errors import DivergenceError, ShapeError, UndefinedMetricError
from .graph import DEFAULT_PRUNE, Graph
from .model import (LossOptions, LossWeights, ModelParams, PreparedGraph, forward_logits,
                    gcn_forward, init_params, is_bias, model_loss, normalized_adjacency,
                    params_from_json, params_to_json, predict, softmax)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: str = "esmlp"
    hidden: int = 64
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    epochs: int = 1500
    patience: int = 100
    depth: int = 2
    eps_r: float = 0.5
    eps_ir: float = 0.5
    activation: str | None = None
    r: int = 1
    alpha_nc: float = 1.0
    beta_icr: float = 0.0
    tau: float = 1.0
    seed: int = 0
    batch_size: int = 2000
    full_batch_max: int = 4000
    metric: str = "accuracy"
    detach_gamma: bool = False
    icr_detach_probs: bool = True
    prune_below: float = DEFAULT_PRUNE

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")
        if self.patience > max(self.epochs, 1):
            self.patience = max(self.epochs, 1)
        if self.metric not in ("accuracy", "auroc"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.hidden < 1 or self.batch_size < 2:
            raise ValueError("hidden must be >= 1 and batch_size >= 2")

    @property
    def loss_weights(self) -> LossWeights:
        if self.model in ("mlp", "gcn"):
            return LossWeights(0.0, 0.0, self.tau, 1)
        beta = self.beta_icr if self.model == "esmlp" else 0.0
        return LossWeights(self.alpha_nc, beta, self.tau, self.r)

    @classmethod
    def for_dataset(cls, model: str, dataset: str | None = None, **overrides) -> "TrainConfig":
        """Shipped defaults for ``model`` on ``dataset`` with keyword overrides."""
        values = defaults.model_defaults(model, dataset)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, arrays: dict) -> "AdamState":
        return cls(0, {k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})

    def to_json(self) -> dict:
        def pack(d):
            return {k: {"shape": list(a.shape), "data": a.reshape(-1).tolist()} for k, a in d.items()}
        return {"t": self.t, "m": pack(self.m), "v": pack(self.v)}

    @classmethod
    def from_json(cls, payload: dict) -> "AdamState":
        def unpack(d):
            return {k: np.asarray(e["data"], dtype=np.float64).reshape(e["shape"]) for k, e in d.items()}
        return cls(int(payload["t"]), unpack(payload["m"]), unpack(payload["v"]))


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0, decay=None) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update with coupled weight decay.

    ``decay(name) -> bool`` selects the parameters that receive weight decay
    (default: all).  Inputs are left untouched.
    """
    b1, b2 = betas
    t = state.t + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"optimizer shapes disagree for {name!r}")
        if weight_decay and (decay is None or decay(name)):
            g = g + weight_decay * p
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(t, m_out, v_out)


def save_checkpoint(path, params: ModelParams, state: AdamState | None = None) -> None:
    """Parameters plus optional optimizer state in one JSON file."""
    payload = {"params": params_to_json(params),
               "optimizer": state.to_json() if state is not None else None}
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[ModelParams, AdamState | None]:
    payload = json.loads(Path(path).read_text())
    opt = payload.get("optimizer")
    return params_from_json(payload["params"]), (AdamState.from_json(opt) if opt else None)


# ---------------------------------------------------------------- metrics


def _mask(mask, n):
    idx = np.asarray(mask)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    if idx.size == 0:
        raise ValueError("metric mask is empty")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError("metric mask index out of range")
    return idx


def accuracy(logits, labels, mask) -> float:
    """Fraction of masked rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits)
    idx = _mask(mask, len(logits))
    return float(np.mean(np.argmax(logits[idx], axis=1) == np.asarray(labels)[idx]))


def auroc(scores, binary_labels, mask) -> float:
    """Rank-based AUROC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    idx = _mask(mask, len(scores))
    y = np.asarray(binary_labels)[idx]
    s = scores[idx]
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes in the mask")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate(metric: str, logits: np.ndarray, labels, mask) -> float:
    if metric == "auroc":
        return auroc(softmax(logits)[:, 1], labels, mask)
    return accuracy(logits, labels, mask)


# ---------------------------------------------------------------- training


@dataclass
class RunResult:
    best_val: float
    test: float
    best_epoch: int
    epochs_run: int
    trace: dict
    train_seconds: float
    config: dict
    seed: int
    components: dict = field(default_factory=dict)
    inference: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _batch(n: int, cfg: TrainConfig, epoch: int):
    if n <= cfg.full_batch_max:
        return None
    rng = np.random.default_rng([cfg.seed, epoch, 7])
    return np.sort(rng.choice(n, size=min(cfg.batch_size, n), replace=False))


def train_model(graph: Graph, config: TrainConfig, callback=None) -> tuple[ModelParams, RunResult]:
    """Adam with early stopping on the validation metric; best parameters restored.

    ``callback(epoch, params, diagnostics)`` runs after every optimizer step.
    """
    if not graph.splits:
        raise ValueError("graph has no train/val/test split")
    if graph.num_features < 1 or graph.num_classes < 1:
        raise ValueError("graph needs features and labels")
    cfg = config
    pg = PreparedGraph(graph)
    params = init_params(cfg.model, graph.num_features, cfg.hidden, graph.num_classes, cfg.seed,
                         cfg.depth, cfg.eps_r, cfg.eps_ir, cfg.activation)
    weights = cfg.loss_weights
    opts = LossOptions(dropout=cfg.dropout, detach_gamma=cfg.detach_gamma,
                       prune_below=cfg.prune_below, icr_detach_probs=cfg.icr_detach_probs,
                       compute_inactive=False)
    state = AdamState.zeros_like(params.arrays())
    labels = graph.labels

    def val_metric(p):
        return evaluate(cfg.metric, forward_logits(p, pg), labels, graph.val)

    best_val, best_params, best_epoch = val_metric(params), params, 0
    trace = {k: [] for k in ("loss", "ce", "nc", "icr", "val", "nc_skipped")}
    start = time.perf_counter()
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        leaves = params.leaves()
        with ad.Tape() as tape:
            tape.watch(leaves.weights.values())
            loss, diag = model_loss(leaves, pg, weights, _batch(graph.n, cfg, epoch), True,
                                    (cfg.seed, epoch), opts)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss at epoch {epoch} ({cfg.model}, seed {cfg.seed})")
        grads = ad.backward(tape, loss)
        arrays = params.arrays()
        new, state = adam_step(arrays, {k: grads[t] for k, t in leaves.weights.items()}, state,
                               cfg.lr, weight_decay=cfg.weight_decay,
                               decay=lambda name: not is_bias(name))
        params = params.with_arrays(new)
        if callback is not None:
            callback(epoch, params, diag)
        val = val_metric(params)
        trace["loss"].append(value)
        for key in ("ce", "nc", "icr", "nc_skipped"):
            trace[key].append(diag.get(key))
        trace["val"].append(val)
        if val > best_val:
            best_val, best_params, best_epoch = val, params, epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    seconds = time.perf_counter() - start
    test = evaluate(cfg.metric, forward_logits(best_params, pg), labels, graph.test)
    components = final_components(best_params, pg, cfg)
    log.debug("%s seed=%d best_val=%.4f test=%.4f epochs=%d", cfg.model, cfg.seed, best_val,
              test, epoch)
    return best_params, RunResult(best_val, test, best_epoch, epoch, trace, seconds,
                                  cfg.to_dict(), cfg.seed, components=components)


def final_components(params: ModelParams, graph, cfg: TrainConfig) -> dict:
    """All loss components (zero-weight ones included) in evaluation mode."""
    opts = LossOptions(prune_below=cfg.prune_below, compute_inactive=True)
    _, diag = model_loss(params, graph, cfg.loss_weights, _batch(graph.n, cfg, 0), False, None, opts)
    return {k: diag.get(k) for k in ("ce", "nc", "icr", "nc_skipped")}


# ---------------------------------------------------------------- timing


def time_inference(params: ModelParams, graph: Graph, mode: str = "full_graph",
                   repeats: int = 10) -> dict:
    """Median and mean seconds per forward pass after one warm-up pass.

    ``test_only`` feeds MLP-family models the test-node features and GCN the
    induced test subgraph.  GCN's normalized adjacency is prepared outside
    the timed region.
    """
    if mode not in ("full_graph", "test_only"):
        raise ValueError(f"unknown timing mode {mode!r}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    target = graph.subgraph(graph.test) if mode == "test_only" else graph
    if params.kind == "gcn":
        norm = normalized_adjacency(target)

        def run():
            return gcn_forward(params, target, norm_adj=norm).data
    else:
        X = target.features

        def run():
            return predict(params, X)[0]

    run()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        samples.append(time.perf_counter() - t0)
    return {"median": float(np.median(samples)), "mean": float(np.mean(samples)),
            "samples": samples, "mode": mode, "nodes": target.n, "edges": target.num_edges}

"""Tape-based reverse-mode automatic differentiation over dense 2-D arrays.

Every value is a :class:`Tensor` wrapping a float64 matrix.  Operations run
eagerly; when a :class:`Tape` is active and at least one operand requires a
gradient, the operation appends a record holding a backward closure.
:func:`backward` replays the records in reverse and returns a
:class:`GradientMap` for the leaves.

    with Tape() as tape:
        w = Tensor(np.ones((3, 1)), requires_grad=True)
        loss = sum_all(matmul(x, w))
    grads = backward(tape, loss)
    grads[w]
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .errors import DomainError, ShapeError

COSINE_EPS = 1e-12

# Incremented whenever a zero-norm row is clamped in cosine similarity.
warning_counts: Counter = Counter()

_ACTIVE: list["Tape"] = []
_IDS = itertools.count(1)
_CHUNK = 1 << 16


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Record:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)
    leaves: dict[int, tuple[int, int]] = field(default_factory=dict)
    _known: set = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def watch(self, tensors) -> None:
        """Register leaves up front so unused ones still get (zero) gradients."""
        for t in tensors:
            self._watch(t)

    def _watch(self, t: Tensor) -> None:
        # leaves may be reused across tapes; ids are globally unique
        if t.requires_grad and t.node_id not in self._known:
            t.node_id = self._new_id()
            self.leaves[t.node_id] = t.shape

    def _new_id(self) -> int:
        nid = next(_IDS)
        self._known.add(nid)
        return nid

    def record(self, kind, inputs: Sequence[Tensor], out: np.ndarray, grad_fn) -> Tensor:
        """Wrap ``out`` and, if needed, append a record computing input grads."""
        for t in inputs:
            self._watch(t)
        result = Tensor(out, requires_grad=True)
        result.node_id = self._new_id()
        ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
        self.records.append(Record(kind, ids, result.node_id, grad_fn))
        return result


class GradientMap(dict):
    """node_id -> gradient array.  Also indexable by the leaf tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            if key.node_id is None:
                raise KeyError(f"{key!r} was never recorded on the tape")
            key = key.node_id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__contains__(key)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn) -> Tensor:
    """Return ``out`` as a Tensor, recording ``grad_fn`` when gradients flow.

    ``grad_fn(g)`` receives the upstream gradient (shape of ``out``) and
    returns one gradient (or None) per input.  Custom differentiable ops in
    other modules are built on this.
    """
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out)
    return tape.record(kind, inputs, out, grad_fn)


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradientMap({nid: np.zeros(shape) for nid, shape in tape.leaves.items()})
    if not loss.requires_grad or loss.node_id is None:
        return grads
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for rec in reversed(tape.records):
        g = pending.pop(rec.output, None)
        if g is None:
            continue
        input_grads = rec.backward(g)
        for nid, ig in zip(rec.inputs, input_grads):
            if nid is None or ig is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + ig
            elif nid in pending:
                pending[nid] = pending[nid] + ig
            else:
                pending[nid] = ig
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(2) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def grad_fn(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return apply_op("matmul", (a, b), out, grad_fn)


def sparse_matmul(s: sp.spmatrix, t) -> Tensor:
    """Constant sparse matrix times a tensor."""
    t = as_tensor(t)
    if s.shape[1] != t.shape[0]:
        raise ShapeError(f"sparse_matmul: {s.shape} x {t.shape}")
    s = sp.csr_matrix(s)
    out = np.asarray(s @ t.data)
    return apply_op("sparse_matmul", (t,), out, lambda g: (np.asarray(s.T @ g),))


def concat_cols(tensors: Sequence) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_cols needs at least one tensor")
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(rows)}")
    widths = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + widths)

    def grad_fn(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))]

    return apply_op("concat_cols", tensors, out, grad_fn)


def _selection_transpose_mul(idx: np.ndarray, n: int, g: np.ndarray) -> np.ndarray:
    """Scatter-add rows of ``g`` into an ``n``-row array at positions ``idx``."""
    if g.shape[1] == 1:
        return np.bincount(idx, weights=g[:, 0], minlength=n).reshape(n, 1)
    sel = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return np.asarray(sel @ g)


def gather_rows(t, idx) -> Tensor:
    t = as_tensor(t)
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = t.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range [0, {n})")
    out = t.data[idx]
    return apply_op("gather_rows", (t,), out,
                    lambda g: (_selection_transpose_mul(idx, n, g),))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return apply_op("add", (a, b), a.data + b.data,
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return apply_op("sub", (a, b), a.data - b.data,
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return apply_op("mul", (a, b), ad * bd, grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd

    def grad_fn(g):
        return (_unbroadcast(g / bd, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None)

    return apply_op("div", (a, b), out, grad_fn)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return apply_op("scale", (a,), a.data * c, lambda g: (g * c,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return apply_op("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return apply_op("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = ndtr(x)
    out = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return apply_op("gelu", (a,), out, grad_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return apply_op("log", (a,), np.log(x), lambda g: (g / x,))


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale,
    "tanh": tanh, "relu": relu, "gelu": gelu, "exp": exp, "log": log,
}


def elementwise(kind: str, *operands) -> Tensor:
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout as a recorded mask multiply."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return as_tensor(a)
    a = as_tensor(a)
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, mask)


# ---------------------------------------------------------------- reductions


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return apply_op("sum", (a,), np.array([[a.data.sum()]]),
                    lambda g: (np.full(shape, g[0, 0]),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ValueError("mean of an empty tensor")
    return scale(sum_all(a), 1.0 / a.data.size)


def row_sum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return apply_op("row_sum", (a,), a.data.sum(axis=1, keepdims=True),
                    lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------- composite kernels


def cosine_similarity_matrix(z) -> Tensor:
    """Pairwise cosine similarities of the rows of ``z`` (b x b)."""
    z = as_tensor(z)
    norms = np.linalg.norm(z.data, axis=1, keepdims=True)
    clamped = norms < COSINE_EPS
    if clamped.any():
        warning_counts["cosine_zero_norm"] += int(clamped.sum())
    denom = np.where(clamped, COSINE_EPS, norms)
    u = z.data / denom
    out = u @ u.T

    def grad_fn(g):
        du = (g + g.T) @ u
        radial = np.where(clamped, 0.0, np.sum(u * du, axis=1, keepdims=True))
        return ((du - u * radial) / denom,)

    return apply_op("cosine_similarity", (z,), out, grad_fn)


def softmax_cross_entropy(logits, labels, mask) -> Tensor:
    """Mean over ``mask`` of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=np.int64).reshape(-1)
    if mask.size == 0:
        raise ValueError("softmax_cross_entropy: empty mask")
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = logits.shape[1]
    y = labels[mask]
    if y.min() < 0 or y.max() >= n_cls:
        raise ValueError("softmax_cross_entropy: masked label outside [0, C)")
    x = logits.data[mask]
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(len(mask))
    loss = -logp[rows, y].mean()
    shape = logits.shape

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        full = np.zeros(shape)
        np.add.at(full, mask, p * (g[0, 0] / len(mask)))
        return (full,)

    return apply_op("softmax_cross_entropy", (logits,), np.array([[loss]]), grad_fn)


def row_distance(z, us, vs) -> Tensor:
    """Euclidean distances ``||z[u] - z[v]||`` for each pair, as a column.

    Computed in chunks so that edge-sized difference matrices never live in
    memory all at once.  The gradient at zero distance is taken as zero.
    """
    z = as_tensor(z)
    us = np.asarray(us, dtype=np.int64).reshape(-1)
    vs = np.asarray(vs, dtype=np.int64).reshape(-1)
    n = z.shape[0]
    zd = z.data
    out = np.empty((len(us), 1))
    for lo in range(0, len(us), _CHUNK):
        hi = lo + _CHUNK
        d = zd[us[lo:hi]] - zd[vs[lo:hi]]
        out[lo:hi, 0] = np.sqrt(np.einsum("ij,ij->i", d, d))

    def grad_fn(g):
        dz = np.zeros_like(zd)
        for lo in range(0, len(us), _CHUNK):
            hi = min(lo + _CHUNK, len(us))
            d = zd[us[lo:hi]] - zd[vs[lo:hi]]
            dist = out[lo:hi]
            coef = np.divide(g[lo:hi], dist, out=np.zeros_like(dist), where=dist > 0)
            m = hi - lo
            # signed incidence (n x m), built column-wise so no sorting is needed
            inc = sp.csc_matrix(
                (np.tile([1.0, -1.0], m), np.column_stack([us[lo:hi], vs[lo:hi]]).reshape(-1),
                 np.arange(0, 2 * m + 1, 2)), shape=(n, m))
            dz += inc @ (d * coef)
        return (dz,)

    return apply_op("row_distance", (z,), out, grad_fn)


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_difference_check(f, params: dict[str, np.ndarray], step: float = 1e-5,
                            tolerance: float = 1e-4, atol: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` maps a dict of Tensors to a scalar Tensor and must be deterministic.
    Relative error per entry is ``|a - n| / max(|a|, |n|, atol)``; the report
    keeps the maximum per parameter.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with Tape() as tape:
        leaves = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
        loss = f(leaves)
    grads = backward(tape, loss)

    errors = {}
    for name, value in base.items():
        analytic = grads[leaves[name]] if leaves[name].node_id is not None else np.zeros_like(value)
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig - step
            lo = f({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
        errors[name] = float(np.max(np.abs(analytic - numeric) / denom)) if value.size else 0.0
    return GradCheckReport(errors, tolerance)

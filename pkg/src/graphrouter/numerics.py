"""Dense float64 tensors with tape-based reverse-mode differentiation.

Forward ops are plain numpy calls. When a :class:`Tape` is active on the
current thread every op appends a record holding its inputs, its output and a
closure computing the vector-Jacobian product; :func:`backward` replays those
records in reverse. Outside a tape the ops cost nothing beyond numpy itself,
which is what inference uses.

Also here: the Adam update and the linear learning-rate schedule.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import _kernels

from .errors import NumericError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

DTYPE = np.float64


class Tensor:
    """Float64 array that can take part in a recorded computation.

    Wrapping does not copy. Op outputs are marked read-only; leaves are
    treated as immutable by convention.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered log of primitive applications on one thread.

    Use as a context manager; tapes nest, the innermost one records.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(self._local, "stack", None)
        if stack is None:
            stack = self._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        self._local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    @classmethod
    def current(cls) -> "Tape | None":
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None


def _emit(op, inputs, out, vjp) -> Tensor:
    result = Tensor(out)
    result.data.setflags(write=False)
    tape = Tape.current()
    if tape is not None:
        tape.records.append(Record(op, tuple(inputs), result, vjp))
    return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# index helpers for gather / scatter
# ---------------------------------------------------------------------------


class Index:
    """Row index into a table of ``size`` rows, with cached sparse scatter maps.

    ``rows[i]`` names the table row that item ``i`` belongs to. The same object
    drives :func:`gather_rows` (table -> items) and :func:`segment_mean`
    (items -> table), so building one per graph view amortises the sparse setup.
    """

    def __init__(self, rows, size: int):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.ndim != 1:
            raise ValidationError("Index rows must be one-dimensional")
        if rows.size and (rows.min() < 0 or rows.max() >= size):
            raise ValidationError(f"Index rows out of range for size {size}")
        self.rows = rows
        self.size = int(size)

    def __len__(self):
        return self.rows.size

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.size).astype(DTYPE)

    @cached_property
    def scatter_sum(self) -> sp.csr_matrix:
        n = self.rows.size
        return sp.csr_matrix(
            (np.ones(n, dtype=DTYPE), (self.rows, np.arange(n))), shape=(self.size, n)
        )

    @cached_property
    def scatter_mean(self) -> sp.csr_matrix:
        n = self.rows.size
        inv = np.zeros(self.size, dtype=DTYPE)
        nz = self.counts > 0
        inv[nz] = 1.0 / self.counts[nz]
        return sp.csr_matrix(
            (inv[self.rows], (self.rows, np.arange(n))), shape=(self.size, n)
        )

    @cached_property
    def item_weight(self) -> np.ndarray:
        """1 / |segment| for each item, the transpose of ``scatter_mean``."""
        return (1.0 / self.counts[self.rows])[:, None] if self.rows.size else np.zeros((0, 1))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    if a.shape == b.shape:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=0)))
    raise ShapeError("add", a.shape, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _emit("transpose", (a,), a.data.T, lambda g: (g.T,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _emit("relu", (x,), np.where(on, x.data, 0.0), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(X))
    s = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat")
    nd = xs[0].data.ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.data.ndim != nd or any(
            s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != ax
        ):
            raise ShapeError("concat", xs[0].shape, x.shape)
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _emit(
        "concat",
        xs,
        np.concatenate([x.data for x in xs], axis=ax),
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean over the rows of a matrix. Zero rows give a zero vector."""
    if x.data.ndim != 2:
        raise ShapeError("mean_rows", x.shape)
    n, k = x.shape
    if n == 0:
        return _emit("mean_rows", (x,), np.zeros(k), lambda g: (np.zeros((0, k)),))
    return _emit(
        "mean_rows", (x,), x.data.mean(axis=0), lambda g: (np.broadcast_to(g / n, (n, k)),)
    )


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar."""
    shape = x.shape
    return _emit("sum", (x,), x.data.sum(), lambda g: (np.full(shape, float(g)),))


def softmax_row(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    X = x.data
    z = np.exp(X - X.max(axis=-1, keepdims=True))
    s = z / z.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_row", (x,), s, vjp)


def dot(u: Tensor, v: Tensor) -> Tensor:
    if u.data.ndim != 1 or u.shape != v.shape:
        raise ShapeError("dot", u.shape, v.shape)
    U, V = u.data, v.data
    return _emit("dot", (u, v), U @ V, lambda g: (g * V, g * U))


def gather_rows(x: Tensor, index: Index) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != index.size:
        raise ShapeError("gather_rows", x.shape, (index.size,))
    return _emit(
        "gather_rows", (x,), x.data[index.rows], lambda g: (index.scatter_sum @ g,)
    )


def segment_mean(x: Tensor, index: Index) -> Tensor:
    """Average item rows into ``index.size`` segments; empty segments are zero."""
    if x.data.ndim != 2 or x.shape[0] != len(index):
        raise ShapeError("segment_mean", x.shape, (len(index),))
    return _emit(
        "segment_mean",
        (x,),
        index.scatter_mean @ x.data,
        lambda g: (g[index.rows] * index.item_weight,),
    )


def gated_edge_mean(table: Tensor, W: Tensor, b: Tensor, edge_feat: Tensor,
                    A: Tensor, a: Tensor, src: Index, dst: Index) -> Tensor:
    """Edge-gated message passing in one primitive.

    For every edge e from ``src.rows[e]`` to ``dst.rows[e]``::

        msg_e = relu((edge_feat_e @ A + a) * (table[src_e] @ W + b))

    and the result is the mean of ``msg_e`` over each destination (zero when a
    destination has no edges). Equivalent to composing affine, gather_rows,
    mul, relu and segment_mean, but with far fewer passes over the edge
    arrays. ``edge_feat`` is treated as a constant.
    """
    if table.data.ndim != 2 or table.shape[1] != W.shape[0] or table.shape[0] != src.size:
        raise ShapeError("gated_edge_mean", table.shape, W.shape, (src.size,))
    n_edges = len(src)
    if edge_feat.shape != (n_edges, A.shape[0]) or len(dst) != n_edges or A.shape[1] != W.shape[1]:
        raise ShapeError("gated_edge_mean", edge_feat.shape, A.shape, (len(dst),))
    X, Wd = table.data, W.data
    Y = X @ Wd + b.data
    feat = np.ascontiguousarray(edge_feat.data)
    Ad, ad = np.ascontiguousarray(A.data), a.data
    inv = np.zeros(dst.size)
    nz = dst.counts > 0
    inv[nz] = 1.0 / dst.counts[nz]
    fwd, bwd = (
        (_kernels.gated_forward, _kernels.gated_backward) if Ad.shape[0] == 2
        else (_kernels.gated_forward_numpy, _kernels.gated_backward_numpy)
    )
    out = fwd(Y, src.rows, dst.rows, feat, Ad, ad, inv)

    def vjp(g):
        dY, dA, da = bwd(g, Y, src.rows, dst.rows, feat, Ad, ad, inv)
        return dY @ Wd.T, X.T @ dY, dY.sum(axis=0), None, dA, da

    return _emit("gated_edge_mean", (table, W, b, edge_feat, A, a), out, vjp)


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, target].

    ``mask`` (bool, same shape) marks which columns are candidates for each row;
    the others are excluded from the normaliser.
    """
    X = logits.data
    if X.ndim != 2:
        raise ShapeError("softmax_cross_entropy", X.shape)
    n, k = X.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError("softmax_cross_entropy", X.shape, targets.shape)
    if mask is None:
        mask = np.ones_like(X, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask[np.arange(n), targets].all():
        raise ValidationError("target column is not a candidate")
    Xm = np.where(mask, X, -np.inf)
    mx = Xm.max(axis=1, keepdims=True)
    z = np.where(mask, np.exp(Xm - mx), 0.0)
    denom = z.sum(axis=1, keepdims=True)
    p = z / denom
    logp_t = (Xm - mx)[np.arange(n), targets] - np.log(denom[:, 0])
    loss = -logp_t.mean()

    def vjp(g):
        grad = p.copy()
        grad[np.arange(n), targets] -= 1.0
        return (grad * (float(g) / n),)

    return _emit("softmax_cross_entropy", (logits,), loss, vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


class Gradients(dict):
    """Gradient arrays keyed like the ``wrt`` mapping given to :func:`backward`.

    ``missing`` lists keys whose tensor never influenced the loss; their
    gradient is zero.
    """

    missing: list


def backward(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor]) -> Gradients:
    if loss.data.ndim != 0:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    grads: dict[int, np.ndarray] = {id(loss): np.array(1.0)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=DTYPE)
    out = Gradients()
    out.missing = []
    for name, t in wrt.items():
        g = grads.get(id(t))
        if g is None:
            out.missing.append(name)
            g = np.zeros(t.shape, dtype=DTYPE)
        out[name] = np.ascontiguousarray(np.broadcast_to(g, t.shape), dtype=DTYPE)
    return out


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Inputs are left untouched.
    """
    if lr < 0:
        raise ValidationError(f"learning rate must be >= 0, got {lr}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r}; Adam step aborted")
        if g.shape != params[k].shape:
            raise ShapeError(f"adam_step[{k}]", params[k].shape, g.shape)
    b1, b2, eps = state.beta1, state.beta2, state.eps
    t = state.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_m[k], new_v[k] = m, v
        if lr == 0.0:
            new_p[k] = p.copy()
        else:
            new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_p, AdamState(new_m, new_v, t, b1, b2, eps)


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Linear decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValidationError("total_steps must be positive")
    if step < 0:
        raise ValidationError("step must be non-negative")
    if step > total_steps:
        logger.warning("lr_at: step %d beyond schedule of %d steps; using 0", step, total_steps)
        return 0.0
    return base_lr * (1.0 - step / total_steps)

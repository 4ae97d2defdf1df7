"""Heterogeneous message-passing network that scores query-LLM edges.

Per layer, with H the hidden size and every affine map carrying a bias:

* task   h_t' = U_t [mean_q ReLU(W_t h_q) ; h_t]
* query  h_q' = U_q [(m_task + m_llm) / 2 ; h_q]
         m_task = ReLU(W_qt h_t)                       (the single task neighbour, w_tq = 1)
         m_llm  = mean_m ReLU(lift_q(w_mq) * W_qm h_m)
* llm    h_m' = U_m [mean_q ReLU(lift_m(w_mq) * W_m h_q) ; h_m]

``lift`` maps the 2-d edge feature [performance, cost] to H dims and gates the
message elementwise. An empty neighbourhood contributes a zero vector.

After the last layer a two-layer MLP combines the query with its task, and the
logit of edge (q, m) is dot(h_qt, h_m) / H.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import ShapeError, ValidationError
from .hetgraph import EdgeBatch, GraphView
from .numerics import Tensor

_LAYER_SHAPES = (
    # name, (rows, cols) in units where "H" is hidden and "2H" twice hidden
    ("task.W", ("H", "H")), ("task.b", ("H",)), ("task.U", ("2H", "H")), ("task.c", ("H",)),
    ("query.W_task", ("H", "H")), ("query.b_task", ("H",)),
    ("query.W_llm", ("H", "H")), ("query.b_llm", ("H",)),
    ("query.lift", ("E", "H")), ("query.lift_b", ("H",)),
    ("query.U", ("2H", "H")), ("query.c", ("H",)),
    ("llm.W", ("H", "H")), ("llm.b", ("H",)),
    ("llm.lift", ("E", "H")), ("llm.lift_b", ("H",)),
    ("llm.U", ("2H", "H")), ("llm.c", ("H",)),
)


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 64
    hidden: int = 32
    layers: int = 2


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.arrays.items()}

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.arrays.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
        return h.hexdigest()

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, unit = config.hidden, {"H": config.hidden, "2H": 2 * config.hidden, "E": 2}
    shapes = {"proj.W": (config.d_in, H), "proj.b": (H,)}
    for l in range(1, config.layers + 1):
        for name, dims in _LAYER_SHAPES:
            shapes[f"layer{l}.{name}"] = tuple(unit[d] for d in dims)
    shapes.update({
        "combine.W1": (2 * H, H), "combine.b1": (H,),
        "combine.W2": (H, H), "combine.b2": (H,),
    })
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform in +-1/sqrt(fan_in) for each affine map, weights and bias alike."""
    if min(config.d_in, config.hidden) <= 0 or config.layers < 0:
        raise ValidationError(f"invalid model config {config}")
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config)
    arrays = {}
    fan_in = None
    for name, shape in shapes.items():
        if len(shape) == 2:
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, arrays)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, W), b)


@dataclass
class NodeEmbeddings:
    task: Tensor
    query: Tensor
    llm: Tensor


def project_inputs(view: GraphView, P: Mapping[str, Tensor]) -> NodeEmbeddings:
    g = view.graph
    W, b = P["proj.W"], P["proj.b"]
    if g.x_task.shape[1] != W.shape[0]:
        raise ShapeError("input projection", g.x_task.shape, W.shape)
    return NodeEmbeddings(
        affine(Tensor(g.x_task), W, b),
        affine(Tensor(g.x_query), W, b),
        affine(Tensor(g.x_llm), W, b),
    )


def _edge_message(h_src: Tensor, W: Tensor, b: Tensor, w_edge: Tensor, lift: Tensor, lift_b: Tensor,
                  src: nx.Index, dst: nx.Index, fused: bool) -> Tensor:
    """mean over dst of ReLU(lift(w_edge) * (W h_src + b))."""
    if fused:
        return nx.gated_edge_mean(h_src, W, b, w_edge, lift, lift_b, src, dst)
    gate = affine(w_edge, lift, lift_b)
    msg = nx.gather_rows(affine(h_src, W, b), src)
    return nx.segment_mean(nx.relu(nx.mul(gate, msg)), dst)


def _edges_into(view: GraphView, rows: np.ndarray):
    """Edges of ``view`` ending at the query nodes ``rows`` (unique), re-indexed to positions in ``rows``."""
    pos = np.full(view.graph.n_queries, -1, dtype=np.int64)
    pos[rows] = np.arange(rows.size)
    keep = pos[view.edge_query.rows] >= 0
    return (
        nx.Index(view.edge_llm.rows[keep], view.graph.n_llms),
        nx.Index(pos[view.edge_query.rows[keep]], rows.size),
        Tensor(view.w_mq.data[keep]),
    )


def layer_forward(view: GraphView, h: NodeEmbeddings, P: Mapping[str, Tensor], l: int,
                  query_rows: np.ndarray | None = None, fused: bool = True) -> NodeEmbeddings:
    """One round of heterogeneous message passing over ``view``.

    With ``query_rows`` (unique handles) only those query nodes are updated and
    the returned query block holds just their rows, in that order.
    """
    p = f"layer{l}."
    H = P[p + "task.W"].shape[0]
    for kind, t in (("task", h.task), ("query", h.query), ("llm", h.llm)):
        if t.data.ndim != 2 or t.shape[1] != H:
            raise ShapeError(f"layer {l} {kind} input", t.shape, (H,))

    # tasks <- queries
    to_task = nx.relu(affine(h.query, P[p + "task.W"], P[p + "task.b"]))
    agg_t = nx.segment_mean(to_task, view.task_of_query)
    new_t = affine(nx.concat([agg_t, h.task], axis=1), P[p + "task.U"], P[p + "task.c"])

    # queries <- their task and <- llms
    task_msg = nx.relu(affine(h.task, P[p + "query.W_task"], P[p + "query.b_task"]))
    if query_rows is None:
        own = h.query
        task_of = view.task_of_query
        src, dst, w = view.edge_llm, view.edge_query, view.w_mq
    else:
        own = nx.gather_rows(h.query, nx.Index(query_rows, view.graph.n_queries))
        task_of = nx.Index(view.graph.query_task[query_rows], view.graph.n_tasks)
        src, dst, w = _edges_into(view, query_rows)
    from_task = nx.gather_rows(task_msg, task_of)
    from_llm = _edge_message(h.llm, P[p + "query.W_llm"], P[p + "query.b_llm"], w,
                             P[p + "query.lift"], P[p + "query.lift_b"], src, dst, fused)
    agg_q = nx.scale(nx.add(from_task, from_llm), 0.5)
    new_q = affine(nx.concat([agg_q, own], axis=1), P[p + "query.U"], P[p + "query.c"])

    # llms <- queries
    agg_m = _edge_message(h.query, P[p + "llm.W"], P[p + "llm.b"], view.w_mq,
                          P[p + "llm.lift"], P[p + "llm.lift_b"], view.edge_query, view.edge_llm, fused)
    new_m = affine(nx.concat([agg_m, h.llm], axis=1), P[p + "llm.U"], P[p + "llm.c"])

    return NodeEmbeddings(new_t, new_q, new_m)


def encode(view: GraphView, P: Mapping[str, Tensor], layers: int,
           queries: np.ndarray | None = None, fused: bool = True) -> NodeEmbeddings:
    """Node states after ``layers`` rounds.

    Given ``queries``, the final round only updates those query nodes (nothing
    downstream reads the others) and ``query`` rows follow ``queries``.
    """
    h = project_inputs(view, P)
    if queries is None:
        for l in range(1, layers + 1):
            h = layer_forward(view, h, P, l, fused=fused)
        return h
    queries = np.asarray(queries, dtype=np.int64)
    uniq, inverse = np.unique(queries, return_inverse=True)
    for l in range(1, layers):
        h = layer_forward(view, h, P, l, fused=fused)
    if layers >= 1:
        h = layer_forward(view, h, P, layers, query_rows=uniq, fused=fused)
        sel = nx.Index(inverse.ravel(), uniq.size)
    else:
        sel = nx.Index(queries, view.graph.n_queries)
    return NodeEmbeddings(h.task, nx.gather_rows(h.query, sel), h.llm)


def combine_query_task(h_t: Tensor, h_q: Tensor, P: Mapping[str, Tensor]) -> Tensor:
    """Two-layer MLP over [h_t ; h_q], rows aligned."""
    x = nx.concat([h_t, h_q], axis=1)
    hidden = nx.relu(affine(x, P["combine.W1"], P["combine.b1"]))
    return affine(hidden, P["combine.W2"], P["combine.b2"])


def edge_logit(h_qt: Tensor, h_m: Tensor) -> Tensor:
    """Dimension-averaged dot product of two vectors."""
    if h_qt.shape != h_m.shape or h_qt.data.ndim != 1:
        raise ShapeError("edge_logit", h_qt.shape, h_m.shape)
    return nx.scale(nx.dot(h_qt, h_m), 1.0 / h_qt.shape[0])


def edge_logits(h_qt: Tensor, h_m: Tensor) -> Tensor:
    """All-pairs :func:`edge_logit`: (queries, H) x (llms, H) -> (queries, llms)."""
    if h_qt.shape[1] != h_m.shape[1]:
        raise ShapeError("edge_logits", h_qt.shape, h_m.shape)
    return nx.scale(nx.matmul(h_qt, nx.transpose(h_m)), 1.0 / h_qt.shape[1])


def query_logits(view: GraphView, P: Mapping[str, Tensor], layers: int, queries: np.ndarray,
                 fused: bool = True) -> Tensor:
    queries = np.asarray(queries, dtype=np.int64)
    h = encode(view, P, layers, queries, fused)
    h_q = h.query
    h_t = nx.gather_rows(h.task, nx.Index(view.graph.query_task[queries], view.graph.n_tasks))
    return edge_logits(combine_query_task(h_t, h_q, P), h.llm)


def loss(logits: Tensor, targets, candidates=None) -> Tensor:
    """Mean softmax cross-entropy of each query's logits against its best LLM."""
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValidationError("loss needs at least one labelled query")
    return nx.softmax_cross_entropy(logits, targets, candidates)


def batch_loss(batch: EdgeBatch, P: Mapping[str, Tensor], layers: int) -> Tensor:
    logits = query_logits(batch.view, P, layers, batch.queries)
    return loss(logits, batch.targets, batch.candidates)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RouteLogits:
    llm_ids: tuple[str, ...]
    logits: np.ndarray          # (queries, llms)

    @property
    def probabilities(self) -> np.ndarray:
        z = np.exp(self.logits - self.logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def choices(self) -> list[str]:
        """Argmax per row; equal logits go to the smallest llm id."""
        out = []
        for row in self.logits:
            top = row.max()
            out.append(min(m for m, v in zip(self.llm_ids, row) if v == top))
        return out


def predict(view: GraphView, params: ModelParams, queries) -> RouteLogits:
    g = view.graph
    if g.n_llms == 0:
        raise ValidationError("cannot route: the graph has no LLM nodes")
    queries = np.atleast_1d(np.asarray(queries, dtype=np.int64))
    logits = query_logits(view, params.tensors(), params.config.layers, queries)
    return RouteLogits(g.llm_ids, logits.data.copy())

"""Typed task / query / LLM graph, masked views, and inference-time attachment.

Every query has exactly one task edge (feature 1). LLM-query edges carry the
normalised [performance, cost] pair and, for Train/Val queries, a 0/1 label
marking the best LLM under the training scenario. Only Train edges (plus
few-shot edges of attached LLMs) take part in message passing; Val and Test
queries see just their task edge, which is also what a masked training batch
sees.

Graphs are immutable. ``attach_*`` return new graphs and never touch the
original arrays.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np

from .datahub import (
    TEST,
    TRAIN,
    VAL,
    InteractionLog,
    InteractionRecord,
    LlmInfo,
    NormalizationParams,
    SplitAssignment,
    best_llm_labels,
)
from .errors import ValidationError
from .features import FeatureTable, edge_features, llm_text
from .numerics import Index, Tensor

SPLIT_CODE = {TRAIN: 0, VAL: 1, TEST: 2, "attached": 3}
UNLABELED = -1


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    task_ids: tuple[str, ...]
    query_ids: tuple[str, ...]
    llm_ids: tuple[str, ...]
    x_task: np.ndarray
    x_query: np.ndarray
    x_llm: np.ndarray
    query_task: np.ndarray      # (n_query,) task handle; the task edge
    query_split: np.ndarray     # (n_query,) SPLIT_CODE
    mq_query: np.ndarray        # (n_edges,) query handle
    mq_llm: np.ndarray          # (n_edges,) llm handle
    w_mq: np.ndarray            # (n_edges, 2)
    mq_label: np.ndarray        # (n_edges,) 1, 0 or UNLABELED
    mq_passing: np.ndarray      # (n_edges,) bool, used for message passing

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v.setflags(write=False)
        nq = len(self.query_ids)
        if self.query_task.shape != (nq,) or self.x_query.shape[0] != nq:
            raise ValidationError("every query needs exactly one task edge and one feature row")
        if len(self.mq_query) and (self.mq_query.max() >= nq or self.mq_llm.max() >= len(self.llm_ids)):
            raise ValidationError("LLM-query edge references a missing node")

    # -- sizes and lookups -------------------------------------------------

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    @property
    def n_queries(self) -> int:
        return len(self.query_ids)

    @property
    def n_llms(self) -> int:
        return len(self.llm_ids)

    @property
    def n_edges(self) -> int:
        return len(self.mq_query)

    @cached_property
    def _task_handle(self):
        return {t: i for i, t in enumerate(self.task_ids)}

    @cached_property
    def _query_handle(self):
        return {q: i for i, q in enumerate(self.query_ids)}

    @cached_property
    def _llm_handle(self):
        return {m: i for i, m in enumerate(self.llm_ids)}

    def task_handle(self, task_id: str) -> int:
        try:
            return self._task_handle[task_id]
        except KeyError:
            raise ValidationError(f"unknown task {task_id!r}; known tasks: {list(self.task_ids)}", code="unknown_task") from None

    def query_handle(self, query_id: str) -> int:
        try:
            return self._query_handle[query_id]
        except KeyError:
            raise ValidationError(f"unknown query {query_id!r}", code="unknown_query") from None

    def llm_handle(self, llm_id: str) -> int:
        try:
            return self._llm_handle[llm_id]
        except KeyError:
            raise ValidationError(f"unknown llm {llm_id!r}", code="unknown_llm") from None

    def queries_in(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.query_split == SPLIT_CODE[split])

    def degree(self, query: int, view: "GraphView | None" = None) -> int:
        """Task edge plus LLM edges active in ``view`` (the base view by default)."""
        view = view or self.base_view
        return 1 + int(np.count_nonzero(self.mq_query[view.edges] == query))

    def llm_degree(self, llm: int, view: "GraphView | None" = None) -> int:
        view = view or self.base_view
        return int(np.count_nonzero(self.mq_llm[view.edges] == llm))

    @cached_property
    def task_index(self) -> Index:
        return Index(self.query_task, self.n_tasks)

    @cached_property
    def query_edges(self) -> dict[int, np.ndarray]:
        order = np.argsort(self.mq_query, kind="stable")
        cuts = np.searchsorted(self.mq_query[order], np.arange(self.n_queries + 1))
        return {q: order[cuts[q]:cuts[q + 1]] for q in range(self.n_queries) if cuts[q + 1] > cuts[q]}

    # -- views ----------------------------------------------------------------

    @cached_property
    def base_view(self) -> "GraphView":
        return GraphView(self, np.flatnonzero(self.mq_passing))

    def masked_view(self, masked_edges: Iterable[int]) -> "GraphView":
        keep = self.mq_passing.copy()
        keep[np.asarray(list(masked_edges), dtype=np.int64)] = False
        return GraphView(self, np.flatnonzero(keep))

    # -- identity -------------------------------------------------------------

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.task_ids, self.query_ids, self.llm_ids]).encode())
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def equals(self, other: "HeteroGraph") -> bool:
        return self.fingerprint() == other.fingerprint()

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)}

    def vocab(self) -> dict:
        return {"task_ids": list(self.task_ids), "query_ids": list(self.query_ids), "llm_ids": list(self.llm_ids)}

    @classmethod
    def from_parts(cls, vocab: dict, arrays: dict) -> "HeteroGraph":
        return cls(tuple(vocab["task_ids"]), tuple(vocab["query_ids"]), tuple(vocab["llm_ids"]), **arrays)

    def stats(self) -> dict:
        base = self.base_view
        return {
            "tasks": self.n_tasks,
            "queries": self.n_queries,
            "llms": self.n_llms,
            "task_query_edges": self.n_queries,
            "llm_query_edges": self.n_edges,
            "message_passing_edges": int(base.edges.size),
            "labeled_edges": int(np.count_nonzero(self.mq_label != UNLABELED)),
            "queries_by_split": {s: int(np.count_nonzero(self.query_split == c)) for s, c in SPLIT_CODE.items()},
        }


class GraphView:
    """A graph restricted to a set of active LLM-query edges.

    Holds the gather/scatter indexes the model needs for one forward pass.
    """

    def __init__(self, graph: HeteroGraph, edges: np.ndarray):
        self.graph = graph
        self.edges = np.asarray(edges, dtype=np.int64)
        self.task_of_query = graph.task_index
        self.edge_query = Index(graph.mq_query[self.edges], graph.n_queries)
        self.edge_llm = Index(graph.mq_llm[self.edges], graph.n_llms)
        self.w_mq = Tensor(graph.w_mq[self.edges].reshape(-1, 2))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def build_graph(log: InteractionLog, splits: SplitAssignment, features: FeatureTable, scenario) -> HeteroGraph:
    """Graph over every query in ``splits``; LLM edges only for Train and Val queries."""
    held = set(splits.held_out)
    llm_ids = tuple(m.llm_id for m in log.llms if m.llm_id not in held)
    task_pos = {t: i for i, t in enumerate(features.task_ids)}
    llm_pos = {m: i for i, m in enumerate(features.llm_ids)}
    query_pos = {q: i for i, q in enumerate(features.query_ids)}

    missing = [t.task_id for t in log.tasks if t.task_id not in task_pos]
    missing += [m for m in llm_ids if m not in llm_pos]
    queries = log.queries()
    missing += [q for q in queries if q not in query_pos]
    if missing:
        raise ValidationError(f"no features for nodes: {missing[:10]}")
    unsplit = [q for q in queries if q not in splits.assignment]
    if unsplit:
        raise ValidationError(f"queries missing from split assignment: {unsplit[:10]}")

    task_ids = tuple(t.task_id for t in log.tasks)
    query_ids = tuple(queries)
    t_handle = {t: i for i, t in enumerate(task_ids)}
    q_handle = {q: i for i, q in enumerate(query_ids)}
    m_handle = {m: i for i, m in enumerate(llm_ids)}

    labeled = splits.records(log.records, TRAIN) + splits.records(log.records, VAL)
    best = best_llm_labels(labeled, scenario, features.normalization)
    edge_feat = {(q, m): features.w_mq[i] for i, (q, m) in enumerate(zip(features.mq_query, features.mq_llm))}

    mq_q, mq_m, w, lab, passing = [], [], [], [], []
    for r in labeled:
        key = (r.query_id, r.llm_id)
        if key not in edge_feat:
            raise ValidationError(f"no edge feature for query {r.query_id!r} / llm {r.llm_id!r}")
        mq_q.append(q_handle[r.query_id])
        mq_m.append(m_handle[r.llm_id])
        w.append(edge_feat[key])
        lab.append(1 if best[r.query_id] == r.llm_id else 0)
        passing.append(splits.assignment[r.query_id] == TRAIN)

    return HeteroGraph(
        task_ids=task_ids,
        query_ids=query_ids,
        llm_ids=llm_ids,
        x_task=features.e_task[[task_pos[t] for t in task_ids]],
        x_query=features.e_query[[query_pos[q] for q in query_ids]],
        x_llm=features.e_llm[[llm_pos[m] for m in llm_ids]].reshape(len(llm_ids), features.dim),
        query_task=np.array([t_handle[queries[q][0]] for q in query_ids], dtype=np.int64),
        query_split=np.array([SPLIT_CODE[splits.assignment[q]] for q in query_ids], dtype=np.int8),
        mq_query=np.array(mq_q, dtype=np.int64),
        mq_llm=np.array(mq_m, dtype=np.int64),
        w_mq=np.array(w, dtype=np.float64).reshape(len(w), 2),
        mq_label=np.array(lab, dtype=np.int8),
        mq_passing=np.array(passing, dtype=bool),
    )


# ---------------------------------------------------------------------------
# training batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeBatch:
    queries: np.ndarray       # (B,) query handles
    edges: np.ndarray         # masked LLM-query edges M
    targets: np.ndarray       # (B,) llm handle labelled 1
    candidates: np.ndarray    # (B, n_llms) bool, llms with a labelled edge
    view: GraphView

    @property
    def labels(self) -> np.ndarray:
        return self.view.graph.mq_label[self.edges]


def sample_edge_batch(graph: HeteroGraph, batch_queries: Sequence[int]) -> EdgeBatch:
    """Mask every LLM edge of the batch queries and collect their labels."""
    queries = np.asarray(batch_queries, dtype=np.int64)
    edge_lists, targets = [], []
    candidates = np.zeros((len(queries), graph.n_llms), dtype=bool)
    for i, q in enumerate(queries):
        e = graph.query_edges.get(int(q))
        if e is None:
            raise ValidationError(f"query {graph.query_ids[q]!r} has no labelled LLM edges")
        labels = graph.mq_label[e]
        pos = e[labels == 1]
        if len(pos) != 1 or np.any(labels == UNLABELED):
            raise ValidationError(f"query {graph.query_ids[q]!r} needs exactly one positive label")
        edge_lists.append(e)
        targets.append(graph.mq_llm[pos[0]])
        candidates[i, graph.mq_llm[e]] = True
    edges = np.concatenate(edge_lists) if edge_lists else np.zeros(0, dtype=np.int64)
    return EdgeBatch(queries, edges, np.array(targets, dtype=np.int64), candidates, graph.masked_view(edges))


def epoch_batches(graph: HeteroGraph, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffle the labelled Train queries and cut them into batches."""
    train = np.array([q for q in graph.queries_in(TRAIN) if int(q) in graph.query_edges], dtype=np.int64)
    order = rng.permutation(train)
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def batches_per_epoch(graph: HeteroGraph, batch_size: int) -> int:
    n = sum(1 for q in graph.queries_in(TRAIN) if int(q) in graph.query_edges)
    return -(-n // batch_size)


# ---------------------------------------------------------------------------
# attachment
# ---------------------------------------------------------------------------


def attach_query(graph: HeteroGraph, query_text: str, task_id: str, embedder,
                 query_id: str | None = None) -> tuple[HeteroGraph, int]:
    t = graph.task_handle(task_id)
    x = embedder.embed(query_text)
    if x.shape != (graph.x_query.shape[1],):
        raise ValidationError(f"embedder dim {x.shape} does not match graph feature dim {graph.x_query.shape[1]}")
    handle = graph.n_queries
    qid = query_id or f"__attached_{handle}"
    if qid in graph._query_handle:
        raise ValidationError(f"query id {qid!r} already in graph")
    new = replace(
        graph,
        query_ids=graph.query_ids + (qid,),
        x_query=np.vstack([graph.x_query, x[None, :]]),
        query_task=np.append(graph.query_task, t),
        query_split=np.append(graph.query_split, np.int8(SPLIT_CODE["attached"])),
    )
    return new, handle


def attach_queries(graph: HeteroGraph, items: Sequence[tuple[str, str]], embedder) -> tuple[HeteroGraph, np.ndarray]:
    """Attach several (task_id, query_text) pairs at once."""
    if not items:
        return graph, np.zeros(0, dtype=np.int64)
    tasks = [graph.task_handle(t) for t, _ in items]
    x = np.array([embedder.embed(text) for _, text in items])
    start = graph.n_queries
    new = replace(
        graph,
        query_ids=graph.query_ids + tuple(f"__attached_{start + i}" for i in range(len(items))),
        x_query=np.vstack([graph.x_query, x]),
        query_task=np.concatenate([graph.query_task, tasks]),
        query_split=np.concatenate([graph.query_split, np.full(len(items), SPLIT_CODE["attached"], dtype=np.int8)]),
    )
    return new, np.arange(start, start + len(items))


def detach_query(graph: HeteroGraph, handle: int) -> HeteroGraph:
    """Remove a query node and all its edges; later handles shift down by one."""
    if not 0 <= handle < graph.n_queries:
        raise ValidationError(f"no query with handle {handle}")
    keep_e = graph.mq_query != handle
    mq_query = graph.mq_query[keep_e]
    mq_query = np.where(mq_query > handle, mq_query - 1, mq_query)
    keep_q = np.arange(graph.n_queries) != handle
    return replace(
        graph,
        query_ids=tuple(q for i, q in enumerate(graph.query_ids) if i != handle),
        x_query=graph.x_query[keep_q],
        query_task=graph.query_task[keep_q],
        query_split=graph.query_split[keep_q],
        mq_query=mq_query,
        mq_llm=graph.mq_llm[keep_e],
        w_mq=graph.w_mq[keep_e],
        mq_label=graph.mq_label[keep_e],
        mq_passing=graph.mq_passing[keep_e],
    )


def attach_llm(graph: HeteroGraph, llm_info: LlmInfo, aux_records: Sequence[InteractionRecord],
               normalization: NormalizationParams, embedder,
               description: str | None = None) -> tuple[HeteroGraph, int]:
    """Add an LLM node from its description plus few-shot edges; no parameters change."""
    if llm_info.llm_id in graph._llm_handle:
        raise ValidationError(f"llm {llm_info.llm_id!r} is already in the graph", code="duplicate_llm")
    aux = list(aux_records)
    q_handles = []
    for r in aux:
        if r.llm_id != llm_info.llm_id:
            raise ValidationError(f"auxiliary record for {r.llm_id!r} passed while attaching {llm_info.llm_id!r}", code="aux_llm_mismatch")
        q = graph._query_handle.get(r.query_id)
        if q is None:
            raise ValidationError(f"auxiliary record references unknown query {r.query_id!r}", code="unknown_query")
        if graph.query_split[q] != SPLIT_CODE[TRAIN]:
            raise ValidationError(f"auxiliary record query {r.query_id!r} is not a Train query", code="aux_not_train")
        q_handles.append(q)
    if len(set(q_handles)) != len(q_handles):
        raise ValidationError("duplicate auxiliary records for one query", code="duplicate_aux")
    x = embedder.embed(llm_text(llm_info, description))
    handle = graph.n_llms
    n = len(aux)
    new = replace(
        graph,
        llm_ids=graph.llm_ids + (llm_info.llm_id,),
        x_llm=np.vstack([graph.x_llm, x[None, :]]),
        mq_query=np.concatenate([graph.mq_query, np.array(q_handles, dtype=np.int64)]),
        mq_llm=np.concatenate([graph.mq_llm, np.full(n, handle, dtype=np.int64)]),
        w_mq=np.vstack([graph.w_mq, edge_features(aux, normalization) if n else np.zeros((0, 2))]),
        mq_label=np.concatenate([graph.mq_label, np.full(n, UNLABELED, dtype=np.int8)]),
        mq_passing=np.concatenate([graph.mq_passing, np.ones(n, dtype=bool)]),
    )
    return new, handle

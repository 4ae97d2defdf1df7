"""Training loop, validation reward, and the checkpoint file format.

Each epoch shuffles the labelled Train queries, masks every LLM edge of a
batch, scores the batch queries against all LLMs, and takes one Adam step
with a linearly decaying learning rate. After every epoch the Val reward of
the current parameters is measured; the best parameters seen are kept and
training stops once ``patience`` epochs pass without improvement.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import model as M
from . import numerics as nx
from .datahub import BALANCE, VAL, NormalizationParams, ScenarioWeights, compute_reward
from .errors import NumericError, ValidationError
from .features import FeatureTable
from .hetgraph import HeteroGraph, batches_per_epoch, epoch_batches, sample_edge_batch

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"GRTRCKPT"


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 32
    layers: int = 2
    batch_size: int = 32
    max_epochs: int = 1000
    base_lr: float = 1e-3
    seed: int = 0
    scenario: ScenarioWeights = BALANCE
    patience: int = 50

    def __post_init__(self):
        for name in ("hidden", "layers", "batch_size", "max_epochs", "patience"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        if not (np.isfinite(self.base_lr) and self.base_lr > 0):
            raise ValidationError(f"base_lr must be positive, got {self.base_lr!r}")
        if not isinstance(self.scenario, ScenarioWeights):
            raise ValidationError(f"scenario must be ScenarioWeights, got {self.scenario!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["scenario"] = asdict(self.scenario)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        sc = obj.pop("scenario", None)
        if isinstance(sc, str):
            sc = ScenarioWeights.named(sc)
        elif isinstance(sc, dict):
            sc = ScenarioWeights(**sc)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        return cls(**obj, **({"scenario": sc} if sc is not None else {}))


@dataclass
class Checkpoint:
    config: TrainConfig
    params: M.ModelParams
    normalization: NormalizationParams
    embedder: dict
    graph: HeteroGraph
    metrics: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def vocab(self) -> dict:
        return self.graph.vocab()


def _seeds(seed: int):
    """Independent named streams derived from one seed."""
    return {"init": [seed, 1], "shuffle": [seed, 2]}


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _edge_lookup(graph: HeteroGraph) -> dict[tuple[int, int], int]:
    return {(int(q), int(m)): i for i, (q, m) in enumerate(zip(graph.mq_query, graph.mq_llm))}


def validate(graph: HeteroGraph, params: M.ModelParams, config: TrainConfig, lookup=None):
    """(reward, performance, cost) of the routed choices on Val queries."""
    queries = graph.queries_in(VAL)
    if queries.size == 0:
        raise ValidationError("graph has no Val queries")
    lookup = lookup if lookup is not None else _edge_lookup(graph)
    edges = np.concatenate([graph.query_edges.get(int(q), np.zeros(0, dtype=np.int64)) for q in queries])
    view = graph.masked_view(edges)
    logits = M.predict(view, params, queries).logits
    # argmax with ties to the smallest llm id
    order = np.argsort(np.array(graph.llm_ids), kind="stable")
    chosen = order[np.argmax(logits[:, order], axis=1)]
    perf = np.empty(queries.size)
    cost = np.empty(queries.size)
    for i, (q, m) in enumerate(zip(queries, chosen)):
        e = lookup.get((int(q), int(m)))
        if e is None:
            raise ValidationError(
                f"val query {graph.query_ids[q]!r} has no record for chosen llm {graph.llm_ids[m]!r}"
            )
        perf[i], cost[i] = graph.w_mq[e]
    p, c = float(perf.mean()), float(cost.mean())
    return float(compute_reward(p, c, config.scenario)), p, c


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _grad_norms(grads) -> dict[str, float]:
    return {k: float(np.linalg.norm(g)) for k, g in grads.items()}


def train_step(graph: HeteroGraph, batch_queries, arrays: dict, state: nx.AdamState, layers: int, lr: float):
    """One masked batch: forward, backward, Adam. Returns (loss, arrays, state, grads)."""
    batch = sample_edge_batch(graph, batch_queries)
    P = {k: nx.Tensor(v, name=k) for k, v in arrays.items()}
    with nx.Tape() as tape:
        L = M.batch_loss(batch, P, layers)
    grads = nx.backward(tape, L, P)
    loss = L.item()
    if not np.isfinite(loss):
        return loss, arrays, state, grads
    new_arrays, new_state = nx.adam_step(arrays, grads, state, lr)
    return loss, new_arrays, new_state, grads


def train(graph: HeteroGraph, features: FeatureTable, config: TrainConfig, metrics_path=None,
          on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Fit a router on the Train labels of ``graph``; keep the best-Val parameters."""
    if not graph.queries_in(VAL).size:
        raise ValidationError("training needs Val queries for early stopping")
    if graph.x_task.shape[1] != features.dim:
        raise ValidationError(f"graph features are {graph.x_task.shape[1]}-d, feature table is {features.dim}-d")
    mcfg = M.ModelConfig(d_in=features.dim, hidden=config.hidden, layers=config.layers)
    seeds = _seeds(config.seed)
    params = M.init_params(mcfg, seeds["init"])
    arrays = params.arrays
    state = nx.AdamState.fresh(arrays)
    rng = np.random.default_rng(seeds["shuffle"])
    per_epoch = batches_per_epoch(graph, config.batch_size)
    if per_epoch == 0:
        raise ValidationError("graph has no labelled Train queries")
    total_steps = config.max_epochs * per_epoch
    lookup = _edge_lookup(graph)

    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    best_reward, best_arrays, best_epoch = -np.inf, M.ModelParams(mcfg, arrays).copy().arrays, 0
    best_val = (float("nan"),) * 3
    step, stale, epoch, mean_loss = 0, 0, 0, float("nan")
    try:
        for epoch in range(1, config.max_epochs + 1):
            losses = []
            for b, queries in enumerate(epoch_batches(graph, config.batch_size, rng)):
                lr = nx.lr_at(step, total_steps, config.base_lr)
                loss, arrays, state, grads = train_step(graph, queries, arrays, state, config.layers, lr)
                if not np.isfinite(loss):
                    norms = _grad_norms(grads)
                    worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:5]
                    raise NumericError(
                        f"non-finite loss {loss} at epoch {epoch}, batch {b}, step {step}; "
                        f"largest gradient norms: {worst}"
                    )
                losses.append(loss)
                step += 1
            mean_loss = float(np.mean(losses))
            current = M.ModelParams(mcfg, arrays)
            reward, perf, cost = validate(graph, current, config, lookup)
            improved = reward > best_reward
            if improved:
                best_reward, best_arrays, best_epoch = reward, current.copy().arrays, epoch
                best_val = (reward, perf, cost)
                stale = 0
            else:
                stale += 1
            row = {
                "epoch": epoch, "step": step, "loss": mean_loss, "lr": lr,
                "val_reward": reward, "val_performance": perf, "val_cost": cost, "best": improved,
            }
            if sink:
                sink.write(json.dumps(row, sort_keys=True) + "\n")
                sink.flush()
            if on_epoch:
                on_epoch(row)
            logger.info("epoch %d loss %.5f val reward %.5f%s", epoch, mean_loss, reward, " *" if improved else "")
            if stale >= config.patience:
                break
    finally:
        if sink:
            sink.close()

    metrics = {
        "epochs_run": epoch,
        "steps": step,
        "total_steps": total_steps,
        "batches_per_epoch": per_epoch,
        "best_epoch": best_epoch,
        "val_reward": best_val[0],
        "val_performance": best_val[1],
        "val_cost": best_val[2],
        "final_train_loss": mean_loss,
    }
    return Checkpoint(config, M.ModelParams(mcfg, best_arrays), features.normalization,
                      dict(features.embedder), graph, metrics)


# ---------------------------------------------------------------------------
# checkpoint file
#
#   MAGIC | u32 version | u64 header length | header JSON (sorted keys)
#   then per array listed in the header: u64 byte length | u32 crc32 | raw bytes
# ---------------------------------------------------------------------------


def _array_entries(ckpt: Checkpoint):
    for k, v in ckpt.params.arrays.items():
        yield "param/" + k, np.ascontiguousarray(v, dtype="<f8")
    for k, v in ckpt.graph.arrays().items():
        dt = v.dtype.newbyteorder("<") if v.dtype.byteorder not in ("|",) else v.dtype
        yield "graph/" + k, np.ascontiguousarray(v, dtype=dt)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries = list(_array_entries(ckpt))
    header = {
        "version": ckpt.version,
        "train_config": ckpt.config.to_json(),
        "model_config": asdict(ckpt.params.config),
        "normalization": ckpt.normalization.to_json(),
        "embedder": ckpt.embedder,
        "vocab": ckpt.graph.vocab(),
        "metrics": ckpt.metrics,
        "arrays": [{"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in entries],
    }
    head = json.dumps(header, sort_keys=True, allow_nan=True).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
    out.write(head)
    for _, a in entries:
        raw = a.tobytes()
        out.write(struct.pack("<QI", len(raw), zlib.crc32(raw)))
        out.write(raw)
    return out.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


class CheckpointError(ValidationError):
    pass


def _read(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise CheckpointError(f"corrupt checkpoint: truncated {what} at byte offset {offset}")
    return buf[offset:offset + n]


def parse_checkpoint(buf: bytes, embedder: dict | None = None) -> Checkpoint:
    if _read(buf, 0, len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic at byte offset 0")
    off = len(MAGIC)
    version, hlen = struct.unpack("<IQ", _read(buf, off, 12, "version header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (this build reads {FORMAT_VERSION})")
    off += 12
    try:
        header = json.loads(_read(buf, off, hlen, "JSON header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: unreadable header at byte offset {off}: {exc}") from None
    off += hlen
    arrays = {}
    for spec in header["arrays"]:
        n, crc = struct.unpack("<QI", _read(buf, off, 12, f"section {spec['name']}"))
        start = off + 12
        raw = _read(buf, start, n, f"section {spec['name']}")
        if zlib.crc32(raw) != crc:
            raise CheckpointError(f"corrupt checkpoint: checksum mismatch in {spec['name']} at byte offset {start}")
        dt = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        if int(np.prod(shape)) * dt.itemsize != n:
            raise CheckpointError(f"corrupt checkpoint: size mismatch in {spec['name']} at byte offset {start}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        off = start + n
    if off != len(buf):
        raise CheckpointError(f"corrupt checkpoint: {len(buf) - off} trailing bytes at byte offset {off}")

    ident = header["embedder"]
    if embedder is not None and dict(embedder) != ident:
        raise CheckpointError(f"embedder identity mismatch: checkpoint has {ident}, caller expects {dict(embedder)}")
    mcfg = M.ModelConfig(**header["model_config"])
    if ident.get("dim") != mcfg.d_in:
        raise CheckpointError(f"embedder dim {ident.get('dim')} does not match model input dim {mcfg.d_in}")
    params = M.ModelParams(mcfg, {k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    expected = M.param_shapes(mcfg)
    if params.shapes() != expected:
        raise CheckpointError("checkpoint parameter shapes do not match its model config")
    graph = HeteroGraph.from_parts(header["vocab"], {k[6:]: v for k, v in arrays.items() if k.startswith("graph/")})
    return Checkpoint(
        TrainConfig.from_json(header["train_config"]), params,
        NormalizationParams.from_json(header["normalization"]), ident, graph, header["metrics"], version,
    )


def load_checkpoint(path, embedder: dict | None = None) -> Checkpoint:
    """Read a checkpoint; ``embedder`` (an identity dict) is checked when given."""
    return parse_checkpoint(Path(path).read_bytes(), embedder)

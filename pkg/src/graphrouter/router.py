"""Routing single queries, adding LLMs from a few examples, and an HTTP service.

A :class:`RouterSnapshot` bundles trained parameters with the graph they
route over. Snapshots are never modified: adding an LLM returns a new one, and
the service swaps its current snapshot reference in one assignment.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping, Sequence

from . import model as M
from .datahub import InteractionRecord, LlmInfo, NormalizationParams
from .errors import GraphRouterError, ValidationError
from .features import embedder_from_identity
from .hetgraph import HeteroGraph, attach_llm, attach_query
from .trainer import Checkpoint

logger = logging.getLogger(__name__)


def _snapshot_id(params: M.ModelParams, graph: HeteroGraph, normalization: NormalizationParams,
                 embedder: Mapping) -> str:
    h = hashlib.sha256()
    h.update(params.digest().encode())
    h.update(graph.fingerprint().encode())
    h.update(json.dumps([normalization.to_json(), dict(embedder)], sort_keys=True).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class RouterSnapshot:
    params: M.ModelParams
    graph: HeteroGraph
    normalization: NormalizationParams
    embedder_identity: Mapping
    embedder: object = field(repr=False)
    snapshot_id: str = ""

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, embedder=None) -> "RouterSnapshot":
        """``embedder`` defaults to the one named in the checkpoint (hash embedders only)."""
        if embedder is None:
            embedder = embedder_from_identity(ckpt.embedder)
        elif dict(embedder.identity()) != dict(ckpt.embedder):
            raise ValidationError(
                f"embedder {embedder.identity()} does not match checkpoint {ckpt.embedder}", code="embedder_mismatch"
            )
        return cls.build(ckpt.params, ckpt.graph, ckpt.normalization, ckpt.embedder, embedder)

    @classmethod
    def build(cls, params, graph, normalization, identity, embedder) -> "RouterSnapshot":
        if graph.x_task.shape[1] != params.config.d_in:
            raise ValidationError("graph feature dim does not match model input dim")
        return cls(params, graph, normalization, dict(identity), embedder,
                   _snapshot_id(params, graph, normalization, identity))

    @property
    def n_llms(self) -> int:
        return self.graph.n_llms

    @property
    def n_tasks(self) -> int:
        return self.graph.n_tasks


@dataclass(frozen=True)
class RouteDecision:
    llm_id: str
    logits: dict[str, float]
    probabilities: dict[str, float]
    snapshot_id: str

    def to_json(self) -> dict:
        return {
            "llm_id": self.llm_id,
            "logits": self.logits,
            "probabilities": self.probabilities,
            "snapshot_id": self.snapshot_id,
        }


def route(snapshot: RouterSnapshot, task_id: str, query_text: str) -> RouteDecision:
    """Attach the query to a copy of the graph and pick the highest-logit LLM."""
    if not isinstance(query_text, str) or not query_text.strip():
        raise ValidationError("query_text must be a non-empty string", code="empty_query")
    graph, handle = attach_query(snapshot.graph, query_text, task_id, snapshot.embedder)
    out = M.predict(graph.base_view, snapshot.params, [handle])
    ids = out.llm_ids
    logits = {m: float(v) for m, v in zip(ids, out.logits[0])}
    probs = {m: float(v) for m, v in zip(ids, out.probabilities[0])}
    return RouteDecision(out.choices()[0], logits, probs, snapshot.snapshot_id)


def add_llm_few_shot(snapshot: RouterSnapshot, llm_info: LlmInfo, description_text: str | None,
                     aux_records: Sequence[InteractionRecord]) -> RouterSnapshot:
    """New snapshot with ``llm_info`` attached through its description and aux records.

    Parameters are shared unchanged; aux records are scaled with the snapshot's
    training-time normalisation.
    """
    graph, _ = attach_llm(snapshot.graph, llm_info, aux_records, snapshot.normalization,
                          snapshot.embedder, description_text)
    return RouterSnapshot.build(snapshot.params, graph, snapshot.normalization,
                                snapshot.embedder_identity, snapshot.embedder)


# ---------------------------------------------------------------------------
# HTTP service
# ---------------------------------------------------------------------------


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128   # the stdlib default of 5 resets bursts of clients


class RoutingService:
    """Holds the current snapshot. Readers take the reference once per request."""

    def __init__(self, snapshot: RouterSnapshot):
        self._snapshot = snapshot
        self._write_lock = threading.Lock()
        self.server: _Server | None = None
        self._thread: threading.Thread | None = None

    @property
    def snapshot(self) -> RouterSnapshot:
        return self._snapshot

    def health(self) -> dict:
        s = self._snapshot
        return {"snapshot_id": s.snapshot_id, "n_llms": s.n_llms, "n_tasks": s.n_tasks}

    def route(self, body: Mapping) -> dict:
        task_id = _field(body, "task_id", str)
        text = _field(body, "query_text", str)
        return route(self._snapshot, task_id, text).to_json()

    def add_llm(self, body: Mapping) -> dict:
        info = _field(body, "llm_info", dict)
        try:
            llm = LlmInfo(
                str(info["llm_id"]), str(info.get("name", info["llm_id"])), str(info.get("size_label", "")),
                float(info["cost_per_mtoken"]), str(info.get("description", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"llm_info needs llm_id and cost_per_mtoken: {exc}", code="invalid_llm_info") from None
        records = []
        for i, r in enumerate(body.get("aux_records") or []):
            try:
                records.append(InteractionRecord(
                    str(r.get("task_id", "")), str(r["query_id"]), str(r.get("llm_id", llm.llm_id)),
                    str(r.get("query_text", "")), float(r["performance"]), float(r["cost"]),
                ))
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise ValidationError(f"aux record {i} malformed: {exc}", code="invalid_aux_record") from None
        description = body.get("description")
        with self._write_lock:
            new = add_llm_few_shot(self._snapshot, llm, description, records)
            self._snapshot = new
        return {"snapshot_id": new.snapshot_id, "n_llms": new.n_llms}

    # -- server lifecycle ---------------------------------------------------

    def start(self, host: str = "127.0.0.1", port: int = 0) -> "RoutingService":
        self.server = _Server((host, port), _make_handler(self))
        self._thread = threading.Thread(target=self.server.serve_forever, name="graphrouter-http", daemon=True)
        self._thread.start()
        logger.info("routing service listening on %s", self.url)
        return self

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def shutdown(self) -> None:
        if self.server is not None:
            self.server.shutdown()
            self.server.server_close()
            self._thread.join()
            self.server = None


def _field(body: Mapping, name: str, kind):
    if name not in body:
        raise ValidationError(f"missing field {name!r}", code="missing_field")
    v = body[name]
    if not isinstance(v, kind):
        raise ValidationError(f"field {name!r} must be {kind.__name__}", code="invalid_field")
    return v


def _make_handler(service: RoutingService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status: int, payload: dict):
            body = json.dumps(payload, sort_keys=True).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _error(self, status: int, code: str, message: str):
            self._send(status, {"error": {"code": code, "message": message}})

        def do_GET(self):
            if self.path == "/health":
                self._send(200, service.health())
            else:
                self._error(404, "not_found", f"no endpoint {self.path}")

        def do_POST(self):
            handlers = {"/route": service.route, "/llms": service.add_llm}
            fn = handlers.get(self.path)
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            if fn is None:
                self._error(404, "not_found", f"no endpoint {self.path}")
                return
            try:
                body = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                self._error(400, "invalid_json", str(exc))
                return
            if not isinstance(body, dict):
                self._error(400, "invalid_json", "request body must be a JSON object")
                return
            try:
                self._send(200, fn(body))
            except ValidationError as exc:
                self._error(400, exc.code, str(exc))
            except GraphRouterError as exc:
                self._error(500, "internal_error", str(exc))

    return Handler


def serve(snapshot: RouterSnapshot, bind_address: str = "127.0.0.1:0") -> RoutingService:
    """Start the HTTP service in a background thread and return it."""
    host, _, port = bind_address.rpartition(":")
    try:
        port_n = int(port)
    except ValueError:
        raise ValidationError(f"bind address must be host:port, got {bind_address!r}") from None
    return RoutingService(snapshot).start(host or "127.0.0.1", port_n)

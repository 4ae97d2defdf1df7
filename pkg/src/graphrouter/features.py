"""Initial node and edge features.

Node features come from text: task descriptions, query text, and LLM
descriptions with a cost sentence appended. Text goes through an
:class:`Embedder`; the built-in :class:`HashEmbedder` mean-pools signed
hashed token vectors, :class:`HttpEmbedder` calls an embedding service.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .datahub import (
    InteractionRecord,
    LlmInfo,
    NormalizationParams,
    TaskInfo,
    asset_description,
    normalize,
)
from .errors import GraphRouterError, ValidationError

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...

    def identity(self) -> dict: ...


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _l2_normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


@lru_cache(maxsize=1 << 16)
def _token_hash(token: str, seed: int) -> int:
    salt = seed.to_bytes(16, "little", signed=True)
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8, salt=salt).digest(), "little")


def hash_embed(text: str, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Mean of signed one-hot token buckets, L2-normalised."""
    if not text or not text.strip():
        raise ValidationError("cannot embed empty text", code="empty_text")
    tokens = tokenize(text)
    if not tokens:
        raise ValidationError(f"text has no tokens: {text!r}")
    hashed = [_token_hash(tok, seed) for tok in tokens]
    buckets = np.array([h % dim for h in hashed], dtype=np.int64)
    signs = np.array([1.0 if (h >> 63) & 1 else -1.0 for h in hashed])
    vec = np.bincount(buckets, weights=signs, minlength=dim) / len(tokens)
    if not vec.any():
        # every token cancelled out; fall back to hashing the token multiset
        key = " ".join(sorted(tokens)).encode("utf-8")
        h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
        vec = np.zeros(dim)
        vec[h % dim] = 1.0
    return _l2_normalize(vec)


@dataclass(frozen=True)
class HashEmbedder:
    dim: int = 64
    seed: int = 0

    def embed(self, text: str) -> np.ndarray:
        return hash_embed(text, self.dim, self.seed)

    def identity(self) -> dict:
        return {"name": "hash", "dim": self.dim, "seed": self.seed}


class EmbeddingServiceError(GraphRouterError):
    pass


class HttpEmbedder:
    """Embeddings from an HTTP service, cached on disk by content hash.

    The service receives ``POST {"text": ...}`` and answers with a JSON array of
    ``dim`` numbers. Vectors are L2-normalised locally.
    """

    def __init__(self, endpoint_url: str, dim: int, cache_dir=None, timeout: float = 10.0,
                 retries: int = 3, backoff: float = 0.2):
        self.endpoint_url = endpoint_url
        self.dim = int(dim)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.requests_made = 0
        self._memory: dict[str, np.ndarray] = {}
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def identity(self) -> dict:
        return {
            "name": "http",
            "dim": self.dim,
            "endpoint_hash": hashlib.sha256(self.endpoint_url.encode()).hexdigest()[:16],
        }

    def _cache_path(self, text: str) -> Path | None:
        if self.cache_dir is None:
            return None
        key = hashlib.sha256(f"{self.endpoint_url}\n{self.dim}\n{text}".encode()).hexdigest()
        return self.cache_dir / f"{key}.json"

    def _fetch(self, text: str) -> list:
        body = json.dumps({"text": text}).encode("utf-8")
        last = None
        for attempt in range(1, self.retries + 1):
            req = urllib.request.Request(
                self.endpoint_url, data=body, headers={"Content-Type": "application/json"}, method="POST"
            )
            self.requests_made += 1
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as exc:
                last = exc
                logger.warning("embedding request failed (attempt %d/%d): %s", attempt, self.retries, exc)
                time.sleep(self.backoff * attempt)
        raise EmbeddingServiceError(
            f"embedding service {self.endpoint_url} failed after {self.retries} attempts: {last}"
        )

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValidationError("cannot embed empty text", code="empty_text")
        hit = self._memory.get(text)
        if hit is not None:
            return hit.copy()
        path = self._cache_path(text)
        if path is not None and path.exists():
            values = json.loads(path.read_text(encoding="utf-8"))
        else:
            values = self._fetch(text)
            if not isinstance(values, list) or len(values) != self.dim:
                got = len(values) if isinstance(values, list) else type(values).__name__
                raise ValidationError(f"embedding dimension mismatch: expected {self.dim}, got {got}")
            if path is not None:
                fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump(values, fh)
                os.replace(tmp, path)
        vec = np.asarray(values, dtype=np.float64)
        if vec.shape != (self.dim,) or not np.all(np.isfinite(vec)):
            raise ValidationError(f"embedding must be {self.dim} finite numbers")
        vec = _l2_normalize(vec)
        self._memory[text] = vec
        return vec.copy()


def external_embed(endpoint_url: str, text: str, dim: int, cache_dir=None) -> np.ndarray:
    return HttpEmbedder(endpoint_url, dim, cache_dir).embed(text)


def embedder_from_identity(identity: Mapping, endpoint_url: str | None = None, cache_dir=None):
    """Rebuild an embedder recorded in a checkpoint."""
    if identity["name"] == "hash":
        return HashEmbedder(int(identity["dim"]), int(identity["seed"]))
    if identity["name"] == "http":
        if endpoint_url is None:
            raise ValidationError("checkpoint uses an HTTP embedder; pass its endpoint url")
        emb = HttpEmbedder(endpoint_url, int(identity["dim"]), cache_dir)
        if emb.identity() != dict(identity):
            raise ValidationError("endpoint url does not match the checkpoint's embedder identity")
        return emb
    raise ValidationError(f"unknown embedder {identity['name']!r}")


# ---------------------------------------------------------------------------
# feature table
# ---------------------------------------------------------------------------


def cost_sentence(cost_per_mtoken: float) -> str:
    return f"Cost per 1M tokens: {cost_per_mtoken:g}."


def task_text(task: TaskInfo) -> str:
    text = task.description.strip() or (asset_description("tasks", task.task_id) or "")
    if not text:
        raise ValidationError(f"task {task.task_id!r} has no description")
    return text


def llm_text(llm: LlmInfo, description: str | None = None) -> str:
    text = (description or llm.description).strip() or (asset_description("llms", llm.llm_id) or "")
    if not text:
        raise ValidationError(f"llm {llm.llm_id!r} has no description")
    return f"{text} {cost_sentence(llm.cost_per_mtoken)}"


def edge_features(records: Sequence[InteractionRecord], normalization: NormalizationParams) -> np.ndarray:
    """[performance, cost] per record, min-max normalised and clamped."""
    perf = normalize([r.performance for r in records], "performance", normalization)
    cost = normalize([r.cost for r in records], "cost", normalization)
    return np.column_stack([np.atleast_1d(perf), np.atleast_1d(cost)]).reshape(len(records), 2)


@dataclass(frozen=True)
class FeatureTable:
    task_ids: tuple[str, ...]
    query_ids: tuple[str, ...]
    llm_ids: tuple[str, ...]
    e_task: np.ndarray
    e_query: np.ndarray
    e_llm: np.ndarray
    query_task: tuple[str, ...]     # task id of each query; its w_tq is 1
    mq_query: tuple[str, ...]       # one entry per LLM-query edge
    mq_llm: tuple[str, ...]
    w_mq: np.ndarray                # (edges, 2) normalised [performance, cost]
    normalization: NormalizationParams
    embedder: Mapping

    @property
    def dim(self) -> int:
        return self.e_task.shape[1]

    @property
    def w_tq(self) -> np.ndarray:
        return np.ones(len(self.query_ids))


def build_feature_table(tasks, llms, queries: Mapping[str, tuple[str, str]], records,
                        normalization: NormalizationParams, embedder) -> FeatureTable:
    """Embed every entity and normalise every interaction's edge feature.

    ``queries`` maps query_id -> (task_id, query_text).
    """
    task_ids = tuple(t.task_id for t in tasks)
    known = set(task_ids)
    for q, (t, _) in queries.items():
        if t not in known:
            raise ValidationError(f"query {q!r} references unknown task {t!r}")
    e_task = np.array([embedder.embed(task_text(t)) for t in tasks]).reshape(len(tasks), embedder.dim)
    e_llm = np.array([embedder.embed(llm_text(m)) for m in llms]).reshape(len(llms), embedder.dim)
    e_query = np.array([embedder.embed(text) for _, text in queries.values()]).reshape(len(queries), embedder.dim)
    records = list(records)
    return FeatureTable(
        task_ids=task_ids,
        query_ids=tuple(queries),
        llm_ids=tuple(m.llm_id for m in llms),
        e_task=e_task,
        e_query=e_query,
        e_llm=e_llm,
        query_task=tuple(t for t, _ in queries.values()),
        mq_query=tuple(r.query_id for r in records),
        mq_llm=tuple(r.llm_id for r in records),
        w_mq=edge_features(records, normalization) if records else np.zeros((0, 2)),
        normalization=normalization,
        embedder=dict(embedder.identity()),
    )

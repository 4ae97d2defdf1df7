"""Interaction logs: schema, ingestion, normalisation, rewards, splits, labels.

A log is JSON-lines. Every line is an object with a ``kind`` field:

* ``task``        -- task_id, name, description, metric_name
* ``llm``         -- llm_id, name, size_label, cost_per_mtoken, description
* ``interaction`` -- task_id, query_id, llm_id, query_text, performance, cost
                     (an optional ``response`` string is kept but never used)

The module also carries the synthetic log generator used for desk-scale
experiments and the distribution statistics written as CSV.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ValidationError

TRAIN, VAL, TEST = "train", "val", "test"
SPLITS = (TRAIN, VAL, TEST)


@dataclass(frozen=True)
class TaskInfo:
    task_id: str
    name: str
    description: str
    metric_name: str = ""


@dataclass(frozen=True)
class LlmInfo:
    llm_id: str
    name: str
    size_label: str
    cost_per_mtoken: float
    description: str = ""


@dataclass(frozen=True)
class InteractionRecord:
    task_id: str
    query_id: str
    llm_id: str
    query_text: str
    performance: float
    cost: float
    response: str | None = None


class InteractionLog(NamedTuple):
    tasks: tuple[TaskInfo, ...]
    llms: tuple[LlmInfo, ...]
    records: tuple[InteractionRecord, ...]

    def task(self, task_id: str) -> TaskInfo:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise ValidationError(f"unknown task {task_id!r}")

    def llm(self, llm_id: str) -> LlmInfo:
        for m in self.llms:
            if m.llm_id == llm_id:
                return m
        raise ValidationError(f"unknown llm {llm_id!r}")

    def queries(self) -> dict[str, tuple[str, str]]:
        """query_id -> (task_id, query_text), in first-appearance order."""
        out: dict[str, tuple[str, str]] = {}
        for r in self.records:
            out.setdefault(r.query_id, (r.task_id, r.query_text))
        return out


# ---------------------------------------------------------------------------
# reference catalogue (task and model pool used in the experiments)
# ---------------------------------------------------------------------------

CATALOG_TASKS = (
    ("alpaca", "Alpaca", "F1"),
    ("gsm8k", "GSM8K", "Accuracy"),
    ("squad", "SQUAD", "F1"),
    ("multi_news", "Multi-News", "F1"),
)

# order matters: the new-LLM setting holds out the last four
CATALOG_LLMS = (
    ("llama-3-7b", "LLaMA-3 (7b)", "7b", 0.2),
    ("mixtral-8x7b", "Mixtral-8x7B", "56b", 0.6),
    ("nousresearch-34b", "NousResearch", "34b", 0.8),
    ("llama-2-7b", "LLaMA-2 (7b)", "7b", 0.2),
    ("mistral-7b", "Mistral-7b", "7b", 0.2),
    ("llama-3-70b", "LLaMA-3 (70b)", "70b", 0.9),
    ("llama-3-turbo-8b", "LLaMA-3-Turbo (8b)", "8b", 0.2),
    ("llama-3-turbo-70b", "LLaMA-3-Turbo (70b)", "70b", 0.9),
    ("llama-3.1-turbo-70b", "Llama-3.1-Turbo (70b)", "70b", 0.9),
    ("qwen-1.5-72b", "Qwen-1.5 (72b)", "72b", 0.9),
)


def asset_description(kind: str, entity_id: str) -> str | None:
    """Shipped description text for a task or LLM id, or None."""
    if kind not in ("tasks", "llms"):
        raise ValueError(kind)
    node = resources.files("graphrouter") / "assets" / "descriptions" / kind / f"{entity_id}.txt"
    try:
        return node.read_text(encoding="utf-8").strip()
    except FileNotFoundError:
        return None


def catalog_tasks() -> list[TaskInfo]:
    return [TaskInfo(i, n, asset_description("tasks", i), m) for i, n, m in CATALOG_TASKS]


def catalog_llms() -> list[LlmInfo]:
    return [LlmInfo(i, n, s, c, asset_description("llms", i)) for i, n, s, c in CATALOG_LLMS]


# ---------------------------------------------------------------------------
# scenarios and rewards
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioWeights:
    name: str
    alpha: float
    beta: float

    _NAMED = {
        "PerformanceFirst": (1.0, 0.0),
        "Balance": (0.5, 0.5),
        "CostFirst": (0.2, 0.8),
    }

    def __post_init__(self):
        fixed = self._NAMED.get(self.name)
        if fixed is not None and (self.alpha, self.beta) != fixed:
            raise ValidationError(f"scenario {self.name} is fixed to (alpha, beta) = {fixed}")
        if fixed is None and self.name != "Custom":
            raise ValidationError(f"unknown scenario name {self.name!r}")

    @classmethod
    def named(cls, name: str) -> "ScenarioWeights":
        key = re.sub(r"[^a-z]", "", name.lower())
        for canon, (a, b) in cls._NAMED.items():
            if canon.lower() == key:
                return cls(canon, a, b)
        raise ValidationError(
            f"unknown scenario {name!r}; expected one of performance-first, balance, cost-first"
        )

    @classmethod
    def custom(cls, alpha: float, beta: float) -> "ScenarioWeights":
        return cls("Custom", float(alpha), float(beta))

    @property
    def slug(self) -> str:
        return re.sub(r"(?<!^)(?=[A-Z])", "-", self.name).lower()


PERFORMANCE_FIRST = ScenarioWeights("PerformanceFirst", 1.0, 0.0)
BALANCE = ScenarioWeights("Balance", 0.5, 0.5)
COST_FIRST = ScenarioWeights("CostFirst", 0.2, 0.8)
SCENARIOS = (PERFORMANCE_FIRST, BALANCE, COST_FIRST)


def compute_reward(performance_norm, cost_norm, scenario: ScenarioWeights):
    return scenario.alpha * performance_norm - scenario.beta * cost_norm


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

_FIELDS = {
    "task": ("task_id", "name", "description", "metric_name"),
    "llm": ("llm_id", "name", "size_label", "cost_per_mtoken", "description"),
    "interaction": ("task_id", "query_id", "llm_id", "query_text", "performance", "cost"),
}


def _parse_line(obj: dict, lineno: int):
    kind = obj.get("kind")
    if kind not in _FIELDS:
        raise ValidationError(f"line {lineno}: unknown or missing kind {kind!r}")
    missing = [f for f in _FIELDS[kind] if f not in obj]
    if missing and not (kind == "llm" and missing == ["description"]):
        raise ValidationError(f"line {lineno}: {kind} record missing fields {missing}")
    try:
        if kind == "task":
            return TaskInfo(
                str(obj["task_id"]), str(obj["name"]), str(obj["description"]), str(obj["metric_name"])
            )
        if kind == "llm":
            cost = float(obj["cost_per_mtoken"])
            if not cost >= 0:
                raise ValidationError(f"line {lineno}: cost_per_mtoken must be >= 0")
            return LlmInfo(
                str(obj["llm_id"]), str(obj["name"]), str(obj["size_label"]), cost,
                str(obj.get("description") or ""),
            )
        perf, cost = float(obj["performance"]), float(obj["cost"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"line {lineno}: bad field value ({exc})") from exc
    if not math.isfinite(perf) or not (math.isfinite(cost) and cost >= 0):
        raise ValidationError(f"line {lineno}: performance must be finite and cost >= 0")
    return InteractionRecord(
        str(obj["task_id"]), str(obj["query_id"]), str(obj["llm_id"]), str(obj["query_text"]),
        perf, cost, obj.get("response"),
    )


def _with_description(item, kind, entity_id):
    if item.description.strip():
        return item
    text = asset_description(kind, entity_id)
    return replace(item, description=text) if text else item


def validate_log(tasks, llms, records) -> InteractionLog:
    def unique(ids, what):
        seen, dup = set(), set()
        for i in ids:
            if i in seen:
                dup.add(i)
            seen.add(i)
        if dup:
            raise ValidationError(f"duplicate {what} ids: {sorted(dup)}")
        return seen

    task_ids = unique([t.task_id for t in tasks], "task")
    llm_ids = unique([m.llm_id for m in llms], "llm")
    tasks = [_with_description(t, "tasks", t.task_id) for t in tasks]
    llms = [_with_description(m, "llms", m.llm_id) for m in llms]
    for t in tasks:
        if not t.description.strip():
            raise ValidationError(f"task {t.task_id!r} has an empty description and no shipped asset")
    bad_tasks = sorted({r.task_id for r in records} - task_ids)
    bad_llms = sorted({r.llm_id for r in records} - llm_ids)
    if bad_tasks or bad_llms:
        parts = []
        if bad_tasks:
            parts.append(f"unknown task ids {bad_tasks}")
        if bad_llms:
            parts.append(f"unknown llm ids {bad_llms}")
        raise ValidationError("referential integrity: " + "; ".join(parts))
    pairs, owner, dups = set(), {}, []
    for r in records:
        key = (r.query_id, r.llm_id)
        if key in pairs:
            dups.append(key)
        pairs.add(key)
        if owner.setdefault(r.query_id, r.task_id) != r.task_id:
            raise ValidationError(f"query {r.query_id!r} is attached to more than one task")
    if dups:
        raise ValidationError(f"duplicate (query_id, llm_id) pairs: {dups[:5]}")
    return InteractionLog(tuple(tasks), tuple(llms), tuple(records))


def ingest(log_path) -> InteractionLog:
    tasks, llms, records = [], [], []
    with open(log_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ValidationError(f"line {lineno}: expected a JSON object")
            item = _parse_line(obj, lineno)
            {TaskInfo: tasks, LlmInfo: llms, InteractionRecord: records}[type(item)].append(item)
    return validate_log(tasks, llms, records)


def record_to_json(item) -> str:
    kind = {TaskInfo: "task", LlmInfo: "llm", InteractionRecord: "interaction"}[type(item)]
    obj = {"kind": kind, **asdict(item)}
    if kind == "interaction" and obj["response"] is None:
        del obj["response"]
    return json.dumps(obj, ensure_ascii=False)


def write_log(log: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in (*log.tasks, *log.llms, *log.records):
            fh.write(record_to_json(item) + "\n")


def write_records(records: Iterable[InteractionRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(record_to_json(r) + "\n")


def read_records(path) -> list[InteractionRecord]:
    """Interaction-only JSON-lines file (e.g. an auxiliary few-shot set)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            obj.setdefault("kind", "interaction")
            item = _parse_line(obj, lineno)
            if not isinstance(item, InteractionRecord):
                raise ValidationError(f"line {lineno}: expected an interaction record")
            out.append(item)
    return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitAssignment:
    assignment: Mapping[str, str]
    held_out: tuple[str, ...] = ()
    aux_query_ids: tuple[str, ...] = ()

    def queries(self, split: str) -> list[str]:
        return [q for q, s in self.assignment.items() if s == split]

    def records(self, records: Iterable[InteractionRecord], split: str) -> list[InteractionRecord]:
        """Records of one split; held-out LLMs are dropped from Train and Val."""
        drop = set(self.held_out) if split in (TRAIN, VAL) else set()
        return [
            r for r in records if self.assignment.get(r.query_id) == split and r.llm_id not in drop
        ]

    def aux_records(self, records: Iterable[InteractionRecord]) -> list[InteractionRecord]:
        aux, held = set(self.aux_query_ids), set(self.held_out)
        return [r for r in records if r.query_id in aux and r.llm_id in held]

    def to_json(self) -> dict:
        return {
            "assignment": dict(self.assignment),
            "held_out": list(self.held_out),
            "aux_query_ids": list(self.aux_query_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitAssignment":
        bad = {s for s in obj["assignment"].values() if s not in SPLITS}
        if bad:
            raise ValidationError(f"unknown split labels {sorted(bad)}")
        return cls(dict(obj["assignment"]), tuple(obj.get("held_out", ())), tuple(obj.get("aux_query_ids", ())))


def _query_ids(records) -> list[str]:
    return sorted({r.query_id for r in records})


def split_standard(records, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitAssignment:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValidationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    qids = _query_ids(records)
    n = len(qids)
    if n < 3:
        raise ValidationError(f"need at least 3 queries to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    labels = np.array([TEST] * n, dtype=object)
    labels[order[:n_train]] = TRAIN
    labels[order[n_train : n_train + n_val]] = VAL
    return SplitAssignment({q: str(labels[i]) for i, q in enumerate(qids)})


def split_new_llm(
    records, held_out_llm_ids: Sequence[str], aux_query_count: int = 80, seed: int = 0,
    ratios=(0.7, 0.1, 0.2),
) -> SplitAssignment:
    """Standard split, with some LLMs hidden from Train/Val and a few-shot auxiliary set.

    The auxiliary set holds the held-out LLMs' records on ``aux_query_count``
    Train queries drawn uniformly without replacement.
    """
    known = {r.llm_id for r in records}
    unknown = sorted(set(held_out_llm_ids) - known)
    if unknown:
        raise ValidationError(f"held-out llms not in log: {unknown}")
    base = split_standard(records, ratios, seed)
    train = sorted(base.queries(TRAIN))
    if aux_query_count > len(train):
        raise ValidationError(
            f"aux_query_count {aux_query_count} exceeds the {len(train)} Train queries"
        )
    rng = np.random.default_rng([seed, 1])
    picked = sorted(rng.choice(len(train), size=aux_query_count, replace=False))
    return SplitAssignment(
        base.assignment, tuple(held_out_llm_ids), tuple(train[i] for i in picked)
    )


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationParams:
    perf_min: float
    perf_max: float
    cost_min: float
    cost_max: float

    def __post_init__(self):
        if self.perf_max < self.perf_min or self.cost_max < self.cost_min:
            raise ValidationError("normalisation max must be >= min")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "NormalizationParams":
        return cls(**{k: float(obj[k]) for k in ("perf_min", "perf_max", "cost_min", "cost_max")})


def fit_normalization(records, split: SplitAssignment | None = None) -> NormalizationParams:
    """Min-max bounds fit on Train records only (all records if ``split`` is None)."""
    rows = split.records(records, TRAIN) if split is not None else list(records)
    if not rows:
        raise ValidationError("cannot fit normalisation: Train split is empty")
    perf = [r.performance for r in rows]
    cost = [r.cost for r in rows]
    return NormalizationParams(min(perf), max(perf), min(cost), max(cost))


def normalize(x, kind: str, params: NormalizationParams):
    if kind == "performance":
        lo, hi = params.perf_min, params.perf_max
    elif kind == "cost":
        lo, hi = params.cost_min, params.cost_max
    else:
        raise ValueError(f"kind must be 'performance' or 'cost', got {kind!r}")
    x = np.asarray(x, dtype=np.float64)
    if hi == lo:
        out = np.full_like(x, 0.5)
    else:
        out = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def record_reward(r: InteractionRecord, scenario, params: NormalizationParams) -> float:
    return compute_reward(
        normalize(r.performance, "performance", params), normalize(r.cost, "cost", params), scenario
    )


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def pick_best(rewards: Mapping[str, float], costs: Mapping[str, float]) -> str:
    """Argmax reward; ties go to the lower raw cost, then the smaller llm id."""
    return min(rewards, key=lambda m: (-rewards[m], costs[m], m))


def best_llm_labels(records, scenario, normalization) -> dict[str, str]:
    rewards: dict[str, dict[str, float]] = defaultdict(dict)
    costs: dict[str, dict[str, float]] = defaultdict(dict)
    for r in records:
        rewards[r.query_id][r.llm_id] = record_reward(r, scenario, normalization)
        costs[r.query_id][r.llm_id] = r.cost
    return {q: pick_best(rewards[q], costs[q]) for q in rewards}


# ---------------------------------------------------------------------------
# synthetic logs
# ---------------------------------------------------------------------------

_TASK_WORDS = {
    "alpaca": "instruction explain describe write suggest list give create",
    "gsm8k": "apples cost total many price each dollars remaining",
    "squad": "passage according article which when where who located",
    "multi_news": "news summarize report officials said announced statement week",
}
_FILLER = (
    "the a of to and in that is for on with as by at from it this be are was "
    "or an not but have has had they their about more some other into than "
    "time people year way day thing world life hand part child eye place work "
    "week case point number group problem fact large small good new first last"
).split()


@dataclass(frozen=True)
class SyntheticConfig:
    n_tasks: int = 4
    n_llms: int = 10
    queries_per_task: int = 600
    noise: float = 0.05
    n_classes: int = 3
    class_spread: float = 0.25
    min_filler: int = 6
    max_filler: int = 14


@dataclass(frozen=True)
class PlantedStructure:
    """Generator internals: what the log was drawn from."""

    task_ids: tuple[str, ...]
    llm_ids: tuple[str, ...]
    affinity: np.ndarray          # (task, llm)
    class_offset: np.ndarray      # (task, class, llm)
    query_task: Mapping[str, int]
    query_class: Mapping[str, int]
    query_tokens: Mapping[str, int]
    llm_out_ratio: np.ndarray     # output tokens per input token, per llm
    llm_cost: np.ndarray          # cost per 1M tokens

    def expected_performance(self, query_id: str) -> np.ndarray:
        t, c = self.query_task[query_id], self.query_class[query_id]
        return np.clip(self.affinity[t] + self.class_offset[t, c], 0.0, 1.0)

    def expected_cost(self, query_id: str) -> np.ndarray:
        return _query_cost(self.query_tokens[query_id], self.llm_out_ratio, self.llm_cost)

    def best_llm(self, query_id: str, scenario, normalization) -> str:
        perf = self.expected_performance(query_id)
        cost = self.expected_cost(query_id)
        rewards = {
            m: compute_reward(
                normalize(perf[j], "performance", normalization),
                normalize(cost[j], "cost", normalization),
                scenario,
            )
            for j, m in enumerate(self.llm_ids)
        }
        return pick_best(rewards, dict(zip(self.llm_ids, cost)))


def _query_cost(tokens, out_ratio, cost_rate):
    out_tokens = np.round(tokens * out_ratio)
    return cost_rate * (tokens + out_tokens) / 1e6


_SIZE_RE = re.compile(r"^\s*(?:(\d+)\s*x\s*)?(\d+(?:\.\d+)?)\s*([kmbt])\s*$", re.I)
_SIZE_UNIT = {"k": 1e-6, "m": 1e-3, "b": 1.0, "t": 1e3}


def parse_size(label: str) -> float:
    """Parameter count in billions from labels like ``7b``, ``56b``, ``8x7B``."""
    m = _SIZE_RE.match(str(label))
    if not m:
        raise ValidationError(f"unparseable model size label {label!r}")
    experts = int(m.group(1)) if m.group(1) else 1
    return experts * float(m.group(2)) * _SIZE_UNIT[m.group(3).lower()]


def _pseudo_word(rng, syllables=3) -> str:
    cons, vow = "bdfgklmnprstvz", "aeiou"
    return "".join(cons[rng.integers(len(cons))] + vow[rng.integers(len(vow))] for _ in range(syllables))


def synthesize(config: SyntheticConfig = SyntheticConfig(), seed: int = 0):
    """Draw a synthetic log with planted structure. Returns ``(log, planted)``.

    performance(q, m) = clip(affinity[t, m] + class_offset[t, c(q), m] + noise, 0, 1)
    where the class c(q) is written into the query text through class-specific
    words, so a text encoder can see it. cost = rate(m) x tokens(q, m).
    """
    rng = np.random.default_rng(seed)
    cat_t, cat_m = catalog_tasks(), catalog_llms()
    tasks = []
    for i in range(config.n_tasks):
        if i < len(cat_t):
            tasks.append(cat_t[i])
        else:
            tasks.append(TaskInfo(f"task-{i}", f"Task {i}", f"Synthetic task number {i} with its own query style.", "F1"))
    llms = []
    for j in range(config.n_llms):
        if j < len(cat_m):
            llms.append(cat_m[j])
        else:
            size = int(rng.choice([7, 13, 34, 70]))
            rate = round(float(0.1 + 0.01 * size), 2)
            llms.append(LlmInfo(
                f"model-{j}", f"Model {j}", f"{size}b", rate,
                f"Synthetic model {j} with {size} billion parameters. Its cost per million tokens is {rate}.",
            ))

    sizes = np.array([parse_size(m.size_label) for m in llms])
    quality = 0.3 + 0.3 * np.log(sizes / 7.0) / np.log(72.0 / 7.0)
    affinity = np.clip(quality[None, :] + rng.uniform(-0.2, 0.2, (config.n_tasks, config.n_llms)), 0.05, 0.95)
    offsets = rng.uniform(-config.class_spread, config.class_spread, (config.n_tasks, config.n_classes, config.n_llms))
    out_ratio = rng.uniform(0.8, 1.5, config.n_llms)
    cost_rate = np.array([m.cost_per_mtoken for m in llms])

    task_words = []
    for i, t in enumerate(tasks):
        words = _TASK_WORDS.get(t.task_id)
        task_words.append(words.split() if words else [_pseudo_word(rng) for _ in range(8)])
    class_words = [[[_pseudo_word(rng) for _ in range(4)] for _ in range(config.n_classes)] for _ in tasks]

    records = []
    q_task, q_class, q_tokens = {}, {}, {}
    for ti, t in enumerate(tasks):
        for k in range(config.queries_per_task):
            qid = f"{t.task_id}-{k:05d}"
            c = int(rng.integers(config.n_classes))
            n_fill = int(rng.integers(config.min_filler, config.max_filler + 1))
            words = (
                list(rng.choice(task_words[ti], 2, replace=False))
                + list(rng.choice(class_words[ti][c], 3, replace=False))
                + list(rng.choice(_FILLER, n_fill))
            )
            words = [str(w) for w in rng.permutation(words)]
            text = " ".join(words).capitalize() + "?"
            tokens = len(words)
            q_task[qid], q_class[qid], q_tokens[qid] = ti, c, tokens
            base = np.clip(affinity[ti] + offsets[ti, c], 0.0, 1.0)
            perf = np.clip(affinity[ti] + offsets[ti, c] + config.noise * rng.standard_normal(config.n_llms), 0.0, 1.0)
            if config.noise == 0:
                perf = base
            cost = _query_cost(tokens, out_ratio, cost_rate)
            for j, m in enumerate(llms):
                records.append(InteractionRecord(
                    t.task_id, qid, m.llm_id, text, round(float(perf[j]), 6), round(float(cost[j]), 12)
                ))
    log = validate_log(tasks, llms, records)
    planted = PlantedStructure(
        tuple(t.task_id for t in tasks), tuple(m.llm_id for m in llms), affinity, offsets,
        q_task, q_class, q_tokens, out_ratio, cost_rate,
    )
    return log, planted


def generate_synthetic(config: SyntheticConfig = SyntheticConfig(), seed: int = 0) -> InteractionLog:
    return synthesize(config, seed)[0]


# ---------------------------------------------------------------------------
# distribution statistics
# ---------------------------------------------------------------------------


def performance_histograms(records, bins: int = 10, task_id: str | None = None) -> list[dict]:
    """One row per (task, llm, bin) over raw performance in [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    groups: dict[tuple[str, str], list[float]] = defaultdict(list)
    llm_order, task_order = [], []
    for r in records:
        if task_id is not None and r.task_id != task_id:
            continue
        if r.llm_id not in llm_order:
            llm_order.append(r.llm_id)
        if r.task_id not in task_order:
            task_order.append(r.task_id)
        groups[(r.task_id, r.llm_id)].append(r.performance)
    rows = []
    for t in task_order:
        for m in llm_order:
            vals = np.clip(groups.get((t, m), []), 0.0, 1.0)
            counts, _ = np.histogram(vals, bins=edges)
            n = max(len(vals), 1)
            for b in range(bins):
                rows.append({
                    "task_id": t, "llm_id": m, "bin_lo": float(edges[b]), "bin_hi": float(edges[b + 1]),
                    "count": int(counts[b]), "fraction": float(counts[b] / n),
                })
    return rows


def win_probability_curve(records, small_llm: str, large_llm: str, thresholds=None,
                          task_id: str | None = None) -> list[dict]:
    """P[perf(small) - perf(large) >= t] over queries answered by both."""
    llms = {r.llm_id for r in records}
    missing = sorted({small_llm, large_llm} - llms)
    if missing:
        raise ValidationError(f"unknown llm(s) for comparison: {missing}")
    if thresholds is None:
        thresholds = np.round(np.linspace(-1.0, 1.0, 41), 10)
    perf: dict[str, dict[str, float]] = defaultdict(dict)
    for r in records:
        if task_id is None or r.task_id == task_id:
            perf[r.query_id][r.llm_id] = r.performance
    diffs = np.array([p[small_llm] - p[large_llm] for p in perf.values() if small_llm in p and large_llm in p])
    if diffs.size == 0:
        raise ValidationError(f"no queries answered by both {small_llm!r} and {large_llm!r}")
    return [{"t": float(t), "probability": float(np.mean(diffs >= t))} for t in thresholds]


def _write_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def distribution_stats(records, out_dir, pair: tuple[str, str] | None = None, bins: int = 10,
                       task_id: str | None = None) -> dict[str, Path]:
    """Write ``histograms.csv`` and, given an LLM pair, ``win_curve.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"histograms": out_dir / "histograms.csv"}
    _write_csv(performance_histograms(records, bins, task_id), paths["histograms"])
    if pair is not None:
        paths["win_curve"] = out_dir / "win_curve.csv"
        _write_csv(win_probability_curve(records, pair[0], pair[1], task_id=task_id), paths["win_curve"])
    return paths

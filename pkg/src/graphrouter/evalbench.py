"""Baseline policies, the oracle, and Performance / Cost / Reward reports.

A policy maps ``(task_id, query_id)`` to an llm id. :func:`evaluate` scores
every policy on the Test queries under each scenario: the mean normalised
performance and cost of the chosen LLMs, and the reward computed from those
two means.
"""

from __future__ import annotations

import csv
import io
import time
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import model as M
from .datahub import (
    SCENARIOS,
    TEST,
    InteractionRecord,
    LlmInfo,
    NormalizationParams,
    ScenarioWeights,
    SplitAssignment,
    compute_reward,
    normalize,
    parse_size,
    pick_best,
    record_reward,
)
from .errors import ValidationError
from .hetgraph import HeteroGraph

REPORT_COLUMNS = ("policy", "scenario", "performance", "cost", "reward")


class Policy(Protocol):
    name: str

    def decide(self, task_id: str, query_id: str) -> str: ...


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantPolicy:
    name: str
    llm_id: str

    def decide(self, task_id: str, query_id: str) -> str:
        return self.llm_id


def _rank_by_size(llms: Sequence[LlmInfo]):
    if not llms:
        raise ValidationError("empty LLM pool")
    return [(parse_size(m.size_label), m.cost_per_mtoken, m.llm_id) for m in llms]


def policy_largest(llms: Sequence[LlmInfo]) -> ConstantPolicy:
    """Always the largest model; equal sizes go to the cheaper one, then the smaller id."""
    size, _, llm_id = min(_rank_by_size(llms), key=lambda r: (-r[0], r[1], r[2]))
    return ConstantPolicy("Largest LLM", llm_id)


def policy_smallest(llms: Sequence[LlmInfo]) -> ConstantPolicy:
    size, _, llm_id = min(_rank_by_size(llms), key=lambda r: (r[0], r[1], r[2]))
    return ConstantPolicy("Smallest LLM", llm_id)


class TablePolicy:
    """Looks decisions up in a precomputed ``query_id -> llm_id`` map."""

    def __init__(self, name: str, choices: Mapping[str, str]):
        self.name = name
        self.choices = dict(choices)

    def decide(self, task_id: str, query_id: str) -> str:
        try:
            return self.choices[query_id]
        except KeyError:
            raise ValidationError(f"{self.name} has no decision for query {query_id!r}") from None


def policy_oracle(records: Iterable[InteractionRecord], scenario: ScenarioWeights,
                  normalization: NormalizationParams, llm_ids: Sequence[str] | None = None) -> TablePolicy:
    """Per-query best reward with full knowledge of every outcome."""
    rewards: dict[str, dict[str, float]] = defaultdict(dict)
    costs: dict[str, dict[str, float]] = defaultdict(dict)
    for r in records:
        rewards[r.query_id][r.llm_id] = record_reward(r, scenario, normalization)
        costs[r.query_id][r.llm_id] = r.cost
    if llm_ids is not None:
        pool = set(llm_ids)
        for q, rw in rewards.items():
            missing = pool - set(rw)
            if missing:
                raise ValidationError(f"oracle: query {q!r} has no record for {sorted(missing)}")
            rewards[q] = {m: v for m, v in rw.items() if m in pool}
    return TablePolicy("Oracle", {q: pick_best(rewards[q], costs[q]) for q in rewards})


def policy_random(llm_ids: Sequence[str], seed: int = 0) -> Policy:
    """Uniform choice per query, reproducible from the seed and the query id."""
    ids = sorted(llm_ids)

    class _Random:
        name = "Random"

        def decide(self, task_id, query_id):
            h = np.frombuffer(query_id.encode("utf-8"), dtype=np.uint8)
            rng = np.random.default_rng([seed, *h.tolist()])
            return ids[int(rng.integers(len(ids)))]

    return _Random()


def policy_graphrouter(params: M.ModelParams, graph: HeteroGraph, query_ids: Sequence[str],
                       name: str = "GraphRouter") -> TablePolicy:
    """Route queries already present in ``graph`` in one batched forward pass."""
    handles = np.array([graph.query_handle(q) for q in query_ids], dtype=np.int64)
    if handles.size == 0:
        return TablePolicy(name, {})
    edges = np.concatenate([graph.query_edges.get(int(h), np.zeros(0, dtype=np.int64)) for h in handles])
    out = M.predict(graph.masked_view(edges), params, handles)
    return TablePolicy(name, dict(zip(query_ids, out.choices())))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    policy: str
    scenario: str
    performance: float
    cost: float
    reward: float


@dataclass
class EvalReport:
    rows: list[ReportRow]
    timings: dict[str, float] = field(default_factory=dict)   # seconds, kept out of the CSV

    def cell(self, policy: str, scenario: str) -> ReportRow:
        for r in self.rows:
            if r.policy == policy and r.scenario == scenario:
                return r
        raise KeyError((policy, scenario))

    @property
    def policies(self) -> list[str]:
        return list(dict.fromkeys(r.policy for r in self.rows))

    @property
    def scenarios(self) -> list[str]:
        return list(dict.fromkeys(r.scenario for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.policy, r.scenario, repr(r.performance), repr(r.cost), repr(r.reward)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValidationError(f"report CSV must have columns {REPORT_COLUMNS}, got {reader.fieldnames}")
        rows = [
            ReportRow(d["policy"], d["scenario"], float(d["performance"]), float(d["cost"]), float(d["reward"]))
            for d in reader
        ]
        return cls(rows)

    def to_text(self, digits: int = 3, timings: bool = False) -> str:
        """Aligned table: one line per policy, Performance / Cost / Reward per scenario."""
        scen = self.scenarios
        header1 = ["", *[c for s in scen for c in (s, "", "")]]
        header2 = ["Policy", *["Performance", "Cost", "Reward"] * len(scen)]
        body = []
        for p in self.policies:
            line = [p]
            for s in scen:
                try:
                    c = self.cell(p, s)
                    line += [f"{c.performance:.{digits}f}", f"{c.cost:.{digits}f}", f"{c.reward:.{digits}f}"]
                except KeyError:
                    line += ["-", "-", "-"]
            body.append(line)
        if timings and self.timings:
            header1.append("")
            header2.append("Time (s)")
            for line in body:
                t = self.timings.get(line[0])
                line.append("-" if t is None else f"{t:.2f}")
        table = [header1, header2, *body]
        widths = [max(len(row[i]) for row in table) for i in range(len(header2))]
        out = []
        for k, row in enumerate(table):
            cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            out.append("  ".join(cells).rstrip())
            if k == 1:
                out.append("-" * len(out[-1]))
        return "\n".join(out) + "\n"


PolicySpec = "Policy | Mapping[str, Policy] | Callable[[ScenarioWeights], Policy]"


def _policy_for(spec, scenario: ScenarioWeights):
    if hasattr(spec, "decide"):
        return spec
    if isinstance(spec, Mapping):
        if scenario.name not in spec:
            raise ValidationError(f"no policy given for scenario {scenario.name}")
        return spec[scenario.name]
    return spec(scenario)


def evaluate(policies: Mapping[str, object], records: Iterable[InteractionRecord],
             scenarios: Sequence[ScenarioWeights] = SCENARIOS, splits: SplitAssignment | None = None,
             normalization: NormalizationParams | None = None, split: str = TEST) -> EvalReport:
    """Score each policy on ``split`` queries (all queries when ``splits`` is None).

    A policy entry is a policy, a mapping from scenario name to policy, or a
    callable taking the scenario.
    """
    if normalization is None:
        raise ValidationError("evaluate needs the normalisation parameters of the bundle")
    records = list(records)
    if splits is not None:
        records = [r for r in records if splits.assignment.get(r.query_id) == split]
    if not records:
        raise ValidationError(f"no records to evaluate on split {split!r}")
    by_edge = {(r.query_id, r.llm_id): r for r in records}
    queries = {}
    for r in records:
        queries.setdefault(r.query_id, r.task_id)

    rows, timings = [], {}
    for name, spec in policies.items():
        elapsed = 0.0
        for sc in scenarios:
            pol = _policy_for(spec, sc)
            t0 = time.perf_counter()
            picks = [(q, pol.decide(t, q)) for q, t in queries.items()]
            elapsed += time.perf_counter() - t0
            perf, cost = [], []
            for q, m in picks:
                if m is None:
                    raise ValidationError(f"policy {name} abstained on query {q!r}")
                rec = by_edge.get((q, m))
                if rec is None:
                    raise ValidationError(f"policy {name} chose {m!r} for {q!r}, which has no record")
                perf.append(rec.performance)
                cost.append(rec.cost)
            p = float(np.mean(normalize(perf, "performance", normalization)))
            c = float(np.mean(normalize(cost, "cost", normalization)))
            rows.append(ReportRow(name, sc.name, p, c, float(compute_reward(p, c, sc))))
        timings[name] = elapsed
    return EvalReport(rows, timings)


# ---------------------------------------------------------------------------
# published numbers
# ---------------------------------------------------------------------------


def _asset_text(name: str) -> str:
    return (resources.files("graphrouter") / "assets" / "published" / name).read_text(encoding="utf-8")


def published_report() -> EvalReport:
    """Performance / Cost / Reward per method and scenario as printed in the original study."""
    return EvalReport.from_csv(_asset_text("table3.csv"))


def published_few_shot() -> list[tuple[str, float, float]]:
    """(method, reward, time cost in seconds) for the new-LLM comparison."""
    reader = csv.DictReader(io.StringIO(_asset_text("table4.csv")))
    return [(d["method"], float(d["reward"]), float(d["time_cost"])) for d in reader]


def relative_changes(rows: Sequence[tuple[str, float, float]], reference: str):
    """Reward improvement and time reduction in percent relative to ``reference``.

    Returns ``(method, reward, improvement_pct, time, reduction_pct)`` rows,
    percentages rounded to two decimals.
    """
    ref = {m: (r, t) for m, r, t in rows}
    if reference not in ref:
        raise ValidationError(f"reference method {reference!r} not among {list(ref)}")
    r0, t0 = ref[reference]
    if r0 == 0 or t0 == 0:
        raise ValidationError("reference reward and time must be non-zero")
    return [
        (m, r, round((r - r0) / abs(r0) * 100, 2), t, round((t0 - t) / t0 * 100, 2))
        for m, r, t in rows
    ]

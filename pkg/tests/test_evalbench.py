"""Policies, the oracle, report arithmetic and the published numbers."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphrouter import datahub as dh
from graphrouter import evalbench as eb
from graphrouter.datahub import BALANCE, SCENARIOS, InteractionRecord
from graphrouter.errors import ValidationError

from conftest import SMALL, toy_log


def small_bundle(seed=0, n_llms=4, queries=15):
    log = dh.generate_synthetic(dataclasses.replace(SMALL, n_llms=n_llms, queries_per_task=queries), seed=seed)
    sp = dh.split_standard(log.records, seed=seed)
    return log, sp, dh.fit_normalization(log.records, sp)


def baselines(log, sp, norm):
    ids = [m.llm_id for m in log.llms]
    test = [r for r in log.records if sp.assignment[r.query_id] == dh.TEST]
    return {
        "Largest LLM": eb.policy_largest(log.llms),
        "Smallest LLM": eb.policy_smallest(log.llms),
        "Random": eb.policy_random(ids, seed=1),
        **{m: eb.ConstantPolicy(m, m) for m in ids},
        "Oracle": lambda sc: eb.policy_oracle(test, sc, norm, ids),
    }


class TestPolicies:
    def test_size_ranking_on_catalogue(self):
        llms = dh.catalog_llms()
        assert eb.policy_largest(llms).llm_id == "qwen-1.5-72b"
        assert eb.policy_smallest(llms).llm_id == "llama-2-7b"

    def test_size_ties_prefer_cheaper(self):
        llms = [dh.LlmInfo("b", "B", "7b", 0.1), dh.LlmInfo("a", "A", "7b", 0.3)]
        assert eb.policy_largest(llms).llm_id == "b"
        assert eb.policy_smallest(llms).llm_id == "b"
        with pytest.raises(ValidationError):
            eb.policy_largest([])

    def test_random_reproducible(self):
        p = eb.policy_random(["a", "b", "c"], seed=4)
        q = eb.policy_random(["c", "b", "a"], seed=4)
        picks = [p.decide("t", f"q{i}") for i in range(50)]
        assert picks == [q.decide("t", f"q{i}") for i in range(50)]
        assert set(picks) == {"a", "b", "c"}

    def test_oracle_picks_best(self):
        log = toy_log(n_queries=8, n_llms=3)
        norm = dh.fit_normalization(log.records)
        o = eb.policy_oracle(log.records, BALANCE, norm)
        assert o.choices == dh.best_llm_labels(log.records, BALANCE, norm)
        with pytest.raises(ValidationError):
            o.decide("t0", "missing")

    def test_oracle_pool_must_be_covered(self):
        log = toy_log(n_queries=2, n_llms=2)
        with pytest.raises(ValidationError):
            eb.policy_oracle(log.records, BALANCE, dh.fit_normalization(log.records), ["m0", "m9"])

    def test_graphrouter_policy(self, small, trained):
        log, sp, norm, _, g = small
        test = sp.queries(dh.TEST)
        pol = eb.policy_graphrouter(trained.params, trained.graph, test)
        assert set(pol.choices) == set(test)
        assert set(pol.choices.values()) <= set(g.llm_ids)


class TestEvaluate:
    def test_reward_equals_formula_exactly(self):
        log, sp, norm = small_bundle()
        rep = eb.evaluate(baselines(log, sp, norm), log.records, SCENARIOS, sp, norm)
        text = rep.to_csv()
        back = eb.EvalReport.from_csv(text)
        for row in back.rows:
            sc = dh.ScenarioWeights.named(row.scenario)
            assert row.reward == sc.alpha * row.performance - sc.beta * row.cost

    def test_constant_policy_means(self):
        log, sp, norm = small_bundle()
        m = log.llms[0].llm_id
        rep = eb.evaluate({"c": eb.ConstantPolicy("c", m)}, log.records, [BALANCE], sp, norm)
        rs = [r for r in log.records if r.llm_id == m and sp.assignment[r.query_id] == dh.TEST]
        cell = rep.cell("c", "Balance")
        assert cell.performance == pytest.approx(np.mean(dh.normalize([r.performance for r in rs], "performance", norm)))
        assert cell.cost == pytest.approx(np.mean(dh.normalize([r.cost for r in rs], "cost", norm)))

    def test_policy_forms(self):
        log, sp, norm = small_bundle()
        c = eb.ConstantPolicy("c", log.llms[0].llm_id)
        by_name = {s.name: c for s in SCENARIOS}
        a = eb.evaluate({"x": c}, log.records, SCENARIOS, sp, norm).rows
        b = eb.evaluate({"x": by_name}, log.records, SCENARIOS, sp, norm).rows
        d = eb.evaluate({"x": lambda sc: c}, log.records, SCENARIOS, sp, norm).rows
        assert a == b == d
        with pytest.raises(ValidationError):
            eb.evaluate({"x": {"Balance": c}}, log.records, SCENARIOS, sp, norm)

    def test_errors(self):
        log, sp, norm = small_bundle()
        with pytest.raises(ValidationError):
            eb.evaluate({"x": eb.ConstantPolicy("x", "ghost")}, log.records, [BALANCE], sp, norm)
        with pytest.raises(ValidationError):
            eb.evaluate({}, log.records, [BALANCE], sp, None)
        with pytest.raises(ValidationError):
            eb.evaluate({}, log.records, [BALANCE], sp, norm, split="holdout")

    def test_timings_kept_out_of_csv(self):
        log, sp, norm = small_bundle()
        rep = eb.evaluate(baselines(log, sp, norm), log.records, [BALANCE], sp, norm)
        assert set(rep.timings) == set(rep.policies)
        assert "time" not in rep.to_csv().lower()

    def test_text_table(self):
        log, sp, norm = small_bundle()
        rep = eb.evaluate(baselines(log, sp, norm), log.records, SCENARIOS, sp, norm)
        text = rep.to_text()
        lines = text.splitlines()
        assert "PerformanceFirst" in lines[0] and "CostFirst" in lines[0]
        assert lines[1].split()[:4] == ["Policy", "Performance", "Cost", "Reward"]
        assert len(lines) == 3 + len(rep.policies)
        assert "Time (s)" in rep.to_text(timings=True)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_oracle_dominates_every_policy(seed, n_llms):
    log, sp, norm = small_bundle(seed, n_llms, queries=6)
    rep = eb.evaluate(baselines(log, sp, norm), log.records, SCENARIOS, sp, norm)
    for sc in SCENARIOS:
        top = rep.cell("Oracle", sc.name).reward
        assert all(rep.cell(p, sc.name).reward <= top for p in rep.policies)


def test_dominated_llm_leaves_oracle_unchanged():
    log, sp, norm = small_bundle()
    worst = dh.LlmInfo("dominated", "Dominated", "7b", 5.0, "A strictly worse model.")
    extra = [
        InteractionRecord(r.task_id, r.query_id, worst.llm_id, r.query_text,
                          min(x.performance for x in log.records if x.query_id == r.query_id) - 0.1,
                          max(x.cost for x in log.records if x.query_id == r.query_id) * 2)
        for r in log.records if r.llm_id == log.llms[0].llm_id
    ]
    bigger = dh.validate_log(log.tasks, log.llms + (worst,), log.records + tuple(extra))
    test = lambda recs: [r for r in recs if sp.assignment[r.query_id] == dh.TEST]   # noqa: E731
    for sc in SCENARIOS:
        a = eb.evaluate({"Oracle": eb.policy_oracle(test(log.records), sc, norm)}, log.records, [sc], sp, norm)
        b = eb.evaluate({"Oracle": eb.policy_oracle(test(bigger.records), sc, norm)}, bigger.records, [sc], sp, norm)
        assert a.rows == b.rows


class TestPublished:
    def test_table_shape(self):
        rep = eb.published_report()
        assert len(rep.policies) == 8
        assert rep.scenarios == ["PerformanceFirst", "Balance", "CostFirst"]

    def test_balance_rows_consistent(self):
        """Only the Oracle row disagrees with its own columns, by one rounding step."""
        rep = eb.published_report()
        off = {}
        for p in rep.policies:
            c = rep.cell(p, "Balance")
            gap = abs(dh.compute_reward(c.performance, c.cost, BALANCE) - c.reward)
            if gap > 0.0005 + 1e-9:
                off[p] = gap
        assert list(off) == ["Oracle"]
        assert off["Oracle"] == pytest.approx(0.001)

    def test_few_shot_percentages(self):
        rows = eb.relative_changes(eb.published_few_shot(), "C2MAB-V")
        by = {r[0]: r for r in rows}
        assert by["GraphRouter (few-shots)"][2] == 9.52
        assert by["GraphRouter (few-shots)"][4] == 99.45
        with pytest.raises(ValidationError):
            eb.relative_changes(eb.published_few_shot(), "nobody")

"""Shared fixtures: small synthetic logs and graphs built from them."""

from __future__ import annotations

import numpy as np
import pytest

from graphrouter import datahub as dh
from graphrouter.datahub import InteractionRecord, LlmInfo, TaskInfo
from graphrouter.features import HashEmbedder, build_feature_table
from graphrouter.hetgraph import build_graph
from graphrouter.trainer import TrainConfig, train

SMALL = dh.SyntheticConfig(n_tasks=2, n_llms=4, queries_per_task=15)
FAST = TrainConfig(hidden=8, layers=2, batch_size=8, max_epochs=6, patience=50)


def prepared(config=SMALL, seed=0, dim=16, scenario=dh.BALANCE, held_out=(), aux=0):
    """(log, splits, normalization, features, graph) for a synthetic config."""
    log = dh.generate_synthetic(config, seed=seed)
    if held_out:
        splits = dh.split_new_llm(log.records, held_out, aux, seed=seed)
    else:
        splits = dh.split_standard(log.records, seed=seed)
    norm = dh.fit_normalization(log.records, splits)
    feats = build_feature_table(log.tasks, log.llms, log.queries(), log.records, norm, HashEmbedder(dim))
    return log, splits, norm, feats, build_graph(log, splits, feats, scenario)


@pytest.fixture(scope="session")
def small():
    return prepared()


@pytest.fixture(scope="session")
def small_new_llm():
    log = dh.generate_synthetic(SMALL)
    return prepared(held_out=(log.llms[-1].llm_id,), aux=5)


@pytest.fixture(scope="session")
def trained(small):
    """Checkpoint from a few epochs on the small bundle."""
    return train(small[4], small[3], FAST)


@pytest.fixture(scope="session")
def trained_new_llm(small_new_llm):
    return train(small_new_llm[4], small_new_llm[3], FAST)


def toy_log(n_queries=3, n_llms=2, seed=0):
    """One task, ``n_llms`` LLMs, ``n_queries`` queries, random outcomes."""
    rng = np.random.default_rng(seed)
    tasks = [TaskInfo("t0", "Toy", "A toy task with short questions.", "acc")]
    llms = [LlmInfo(f"m{j}", f"M{j}", f"{7 * (j + 1)}b", 0.1 * (j + 1), f"Toy model {j}.") for j in range(n_llms)]
    words = "alpha beta gamma delta epsilon zeta eta theta iota kappa".split()
    records = []
    for i in range(n_queries):
        text = " ".join(rng.choice(words, 4))
        for m in llms:
            records.append(InteractionRecord("t0", f"q{i}", m.llm_id, text,
                                             float(rng.uniform()), float(rng.uniform(1e-6, 1e-5))))
    return dh.validate_log(tasks, llms, records)


def toy_graph(seed=0, n_queries=3, n_llms=2, dim=8):
    """Graph over :func:`toy_log` with every query in Train."""
    log = toy_log(n_queries, n_llms, seed)
    splits = dh.SplitAssignment({q: dh.TRAIN for q in log.queries()})
    norm = dh.fit_normalization(log.records, splits)
    feats = build_feature_table(log.tasks, log.llms, log.queries(), log.records, norm, HashEmbedder(dim))
    return build_graph(log, splits, feats, dh.BALANCE)


def end_to_end_gradcheck(seed, h=1e-5, hidden=4, layers=2):
    """Max relative error per parameter tensor between tape and central differences.

    The loss is the masked batch loss of the first query on :func:`toy_graph`.
    """
    from graphrouter import model as M
    from graphrouter import numerics as nx
    from graphrouter.hetgraph import sample_edge_batch

    g = toy_graph(seed)
    params = M.init_params(M.ModelConfig(d_in=g.x_task.shape[1], hidden=hidden, layers=layers), seed)
    batch = sample_edge_batch(g, [0])

    def loss_of(arrays):
        P = {k: nx.Tensor(v) for k, v in arrays.items()}
        return M.batch_loss(batch, P, layers).item()

    P = params.tensors()
    with nx.Tape() as tape:
        L = M.batch_loss(batch, P, layers)
    grads = nx.backward(tape, L, P)
    errors = {}
    for name, value in params.arrays.items():
        num = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in params.arrays.items()}
            minus = {k: v.copy() for k, v in params.arrays.items()}
            plus[name][i] += h
            minus[name][i] -= h
            num[i] = (loss_of(plus) - loss_of(minus)) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(grads[name]).max(), 1e-8)
        errors[name] = float(np.abs(num - grads[name]).max() / scale)
    return errors


ACCEPTANCE: list[str] = []


def verdict(label: str, ok: bool, detail: str) -> bool:
    """Record one acceptance line; printed again in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

"""Add LLMs the router never saw in training, from a description and a few records.

Run: python3 demos/new_llm.py
"""

import time

from graphrouter import datahub as dh
from graphrouter import evalbench as eb
from graphrouter.features import HashEmbedder, build_feature_table
from graphrouter.hetgraph import build_graph
from graphrouter.router import RouterSnapshot, add_llm_few_shot
from graphrouter.trainer import TrainConfig, train


def main():
    log, _ = dh.synthesize(dh.SyntheticConfig(n_tasks=3, n_llms=8, queries_per_task=150))
    held = [m.llm_id for m in log.llms][-2:]
    standard = dh.split_standard(log.records)
    norm = dh.fit_normalization(log.records, standard)
    splits = dh.split_new_llm(log.records, held, aux_query_count=40)
    feats = build_feature_table(log.tasks, log.llms, log.queries(), log.records,
                                dh.fit_normalization(log.records, splits), HashEmbedder())
    graph = build_graph(log, splits, feats, dh.BALANCE)

    t0 = time.perf_counter()
    ckpt = train(graph, feats, TrainConfig(max_epochs=40, base_lr=1e-2))
    trained_s = time.perf_counter() - t0
    print(f"trained on {graph.n_llms} LLMs in {trained_s:.1f}s; held out {held}")

    snap = RouterSnapshot.from_checkpoint(ckpt)
    aux = splits.aux_records(log.records)
    t0 = time.perf_counter()
    for m in held:
        snap = add_llm_few_shot(snap, log.llm(m), None, [r for r in aux if r.llm_id == m])
    print(f"inserted {len(held)} LLMs in {time.perf_counter() - t0:.3f}s, no gradient steps")

    test_q = standard.queries(dh.TEST)
    before = eb.policy_graphrouter(ckpt.params, ckpt.graph, test_q, "before insertion")
    after = eb.policy_graphrouter(snap.params, snap.graph, test_q, "after insertion")
    rep = eb.evaluate({"before insertion": before, "after insertion": after}, log.records, [dh.BALANCE],
                      standard, norm)
    print(rep.to_text(), end="")
    picks = sum(after.decide("", q) in held for q in test_q)
    print(f"\nthe new LLMs take {picks} of {len(test_q)} Test queries")


if __name__ == "__main__":
    main()

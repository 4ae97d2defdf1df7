"""Train a router on a small synthetic log, compare it with the baselines, route one query.

Run: python3 demos/quickstart.py
"""

from graphrouter import datahub as dh
from graphrouter import evalbench as eb
from graphrouter.features import HashEmbedder, build_feature_table
from graphrouter.hetgraph import build_graph
from graphrouter.router import RouterSnapshot, route
from graphrouter.trainer import TrainConfig, train


def main():
    # 3 tasks, 6 LLMs, 150 queries per task; each query's best LLM is planted
    log, _ = dh.synthesize(dh.SyntheticConfig(n_tasks=3, n_llms=6, queries_per_task=150))
    splits = dh.split_standard(log.records)
    norm = dh.fit_normalization(log.records, splits)
    feats = build_feature_table(log.tasks, log.llms, log.queries(), log.records, norm, HashEmbedder())
    graph = build_graph(log, splits, feats, dh.BALANCE)
    print(graph.stats())

    ckpt = train(graph, feats, TrainConfig(max_epochs=40, base_lr=1e-2))
    print(f"best epoch {ckpt.metrics['best_epoch']}, Val reward {ckpt.metrics['val_reward']:.4f}")

    test_q = splits.queries(dh.TEST)
    test_recs = [r for r in log.records if splits.assignment[r.query_id] == dh.TEST]
    policies = {
        "Largest LLM": eb.policy_largest(log.llms),
        "Smallest LLM": eb.policy_smallest(log.llms),
        "GraphRouter": eb.policy_graphrouter(ckpt.params, ckpt.graph, test_q),
        "Oracle": eb.policy_oracle(test_recs, dh.BALANCE, norm),
    }
    print(eb.evaluate(policies, log.records, [dh.BALANCE], splits, norm).to_text(), end="")

    snap = RouterSnapshot.from_checkpoint(ckpt)
    task = log.tasks[0].task_id
    decision = route(snap, task, "Write three short tips for a job interview.")
    print(f"\n{task}: routed to {decision.llm_id}")
    for llm_id, p in sorted(decision.probabilities.items(), key=lambda kv: -kv[1]):
        print(f"  {llm_id:24s} {p:.3f}")


if __name__ == "__main__":
    main()

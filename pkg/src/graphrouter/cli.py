"""``graphrouter`` command line: prepare, train, eval, route, add-llm, stats, serve.

Exit codes: 0 success, 2 invalid input, 3 runtime or numeric failure.

A prepared bundle is a directory holding ``log.jsonl``, ``splits.json``,
``normalization.json``, ``manifest.json`` and, for the new-LLM split,
``aux.jsonl`` with the held-out LLMs' few-shot records.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import datahub as dh
from . import evalbench as eb
from .errors import GraphRouterError, ValidationError
from .features import HashEmbedder, HttpEmbedder, build_feature_table
from .hetgraph import build_graph
from .router import RouterSnapshot, add_llm_few_shot, route, serve
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("graphrouter")

BUNDLE_VERSION = 1


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bundle:
    log: dh.InteractionLog
    splits: dh.SplitAssignment
    normalization: dh.NormalizationParams
    aux: tuple[dh.InteractionRecord, ...]
    manifest: dict


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_bundle(out: Path, log: dh.InteractionLog, splits: dh.SplitAssignment,
                 normalization: dh.NormalizationParams, provenance: dict) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dh.write_log(log, out / "log.jsonl")
    _dump_json(splits.to_json(), out / "splits.json")
    _dump_json(normalization.to_json(), out / "normalization.json")
    files = ["log.jsonl", "splits.json", "normalization.json"]
    aux = splits.aux_records(log.records)
    if splits.held_out:
        dh.write_records(aux, out / "aux.jsonl")
        files.append("aux.jsonl")
    elif (out / "aux.jsonl").exists():
        (out / "aux.jsonl").unlink()
    counts = {s: len(splits.queries(s)) for s in dh.SPLITS}
    manifest = {
        "bundle_version": BUNDLE_VERSION,
        "provenance": provenance,
        "counts": {
            "tasks": len(log.tasks), "llms": len(log.llms), "records": len(log.records),
            "queries": counts, "aux_records": len(aux),
        },
        "held_out": list(splits.held_out),
        "files": {f: _sha256(out / f) for f in files},
    }
    _dump_json(manifest, out / "manifest.json")
    return out


def read_bundle(path) -> Bundle:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise ValidationError(f"{path} is not a prepared bundle (no manifest.json)")
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("bundle_version") != BUNDLE_VERSION:
        raise ValidationError(f"bundle version {manifest.get('bundle_version')} != {BUNDLE_VERSION}")
    for name, digest in manifest.get("files", {}).items():
        if not (path / name).is_file():
            raise ValidationError(f"bundle file {name} is missing")
        if _sha256(path / name) != digest:
            raise ValidationError(f"bundle file {name} does not match its manifest checksum")
    log = dh.ingest(path / "log.jsonl")
    splits = dh.SplitAssignment.from_json(json.loads((path / "splits.json").read_text(encoding="utf-8")))
    norm = dh.NormalizationParams.from_json(json.loads((path / "normalization.json").read_text(encoding="utf-8")))
    aux = tuple(dh.read_records(path / "aux.jsonl")) if (path / "aux.jsonl").is_file() else ()
    return Bundle(log, splits, norm, aux, manifest)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_TRAIN_FLAGS = ("hidden", "layers", "batch_size", "max_epochs", "base_lr", "patience", "seed")


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return obj


def resolve_train_config(args) -> tuple[TrainConfig, dict]:
    """Defaults, then the config file, then explicit flags. Returns (config, embedder spec)."""
    file_cfg = _load_config(getattr(args, "config", None))
    embedder = {"name": "hash", "dim": 64, "seed": 0, **file_cfg.pop("embedder", {})}
    train_part = {k: v for k, v in file_cfg.items() if k != "scenario"}
    unknown = set(train_part) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    cfg = TrainConfig.from_json(train_part)
    scenario = getattr(args, "scenario", None) or file_cfg.get("scenario")
    if scenario:
        cfg = replace(cfg, scenario=dh.ScenarioWeights.named(scenario))
    overrides = {k: getattr(args, k) for k in _TRAIN_FLAGS if getattr(args, k, None) is not None}
    if overrides:
        cfg = TrainConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}, **overrides})
    for key in ("embed_url", "embed_dim", "embed_cache"):
        v = getattr(args, key, None)
        if v is not None:
            embedder[{"embed_url": "url", "embed_dim": "dim", "embed_cache": "cache_dir"}[key]] = v
    if embedder.get("url"):
        embedder["name"] = "http"
    return cfg, embedder


def make_embedder(spec: dict):
    if spec["name"] == "hash":
        return HashEmbedder(int(spec.get("dim", 64)), int(spec.get("seed", 0)))
    if spec["name"] == "http":
        if not spec.get("url"):
            raise ValidationError("http embedder needs a url")
        return HttpEmbedder(spec["url"], int(spec["dim"]), spec.get("cache_dir"))
    raise ValidationError(f"unknown embedder {spec['name']!r}")


def graph_for(bundle: Bundle, scenario: dh.ScenarioWeights, embedder):
    log = bundle.log
    feats = build_feature_table(log.tasks, log.llms, log.queries(), log.records, bundle.normalization, embedder)
    return build_graph(log, bundle.splits, feats, scenario), feats


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    if bool(args.log) == bool(args.synthetic):
        raise ValidationError("give exactly one of --log or --synthetic")
    if args.log:
        log = dh.ingest(args.log)
        source = {"log": str(args.log), "log_sha256": _sha256(Path(args.log))}
    else:
        syn = dh.SyntheticConfig(**_load_config(args.synthetic_config))
        if args.noise is not None:
            syn = replace(syn, noise=args.noise)
        log = dh.generate_synthetic(syn, seed=args.seed)
        source = {"synthetic": {f.name: getattr(syn, f.name) for f in fields(syn)}}
    if args.split == "standard":
        splits = dh.split_standard(log.records, seed=args.seed)
    else:
        if args.held_out_ids:
            ids = args.held_out_ids.split(",")
        elif 0 < args.held_out < len(log.llms):
            ids = [m.llm_id for m in log.llms][-args.held_out:]
        else:
            raise ValidationError(f"--held-out must be between 1 and {len(log.llms) - 1}")
        splits = dh.split_new_llm(log.records, ids, aux_query_count=args.aux_queries, seed=args.seed)
    norm = dh.fit_normalization(log.records, splits)
    provenance = {"split": args.split, "seed": args.seed, **source}
    out = write_bundle(Path(args.out), log, splits, norm, provenance)
    m = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    print(f"bundle written to {out}: {m['counts']['records']} records, queries {m['counts']['queries']}, "
          f"aux records {m['counts']['aux_records']}")
    return 0


def _out_paths(out: Path) -> dict[str, Path]:
    stem = out.with_suffix("") if out.suffix else out
    return {
        "metrics": stem.parent / (stem.name + ".metrics.jsonl"),
        "config": stem.parent / (stem.name + ".config.json"),
        "timings": stem.parent / (stem.name + ".timings.json"),
    }


def cmd_train(args) -> int:
    cfg, emb_spec = resolve_train_config(args)
    embedder = make_embedder(emb_spec)
    bundle = read_bundle(args.bundle)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    paths = _out_paths(out)
    _dump_json({"train": cfg.to_json(), "embedder": {k: v for k, v in emb_spec.items() if k != "cache_dir"},
                "bundle": str(args.bundle)}, paths["config"])
    t0 = time.perf_counter()
    graph, feats = graph_for(bundle, cfg.scenario, embedder)

    def report(row):
        if args.verbose:
            print(f"epoch {row['epoch']:4d}  loss {row['loss']:.5f}  val reward {row['val_reward']:.5f}"
                  + ("  *" if row["best"] else ""), flush=True)

    ckpt = train(graph, feats, cfg, metrics_path=paths["metrics"], on_epoch=report)
    elapsed = time.perf_counter() - t0
    save_checkpoint(out, ckpt)
    _dump_json({"train_seconds": elapsed}, paths["timings"])
    m = ckpt.metrics
    print(f"checkpoint written to {out}: {m['epochs_run']} epochs, best epoch {m['best_epoch']}, "
          f"val reward {m['val_reward']:.4f}")
    return 0


def _snapshot(path, args) -> tuple[RouterSnapshot, Checkpoint]:
    ckpt = load_checkpoint(path)
    embedder = None
    if ckpt.embedder.get("name") == "http":
        if not getattr(args, "embed_url", None):
            raise ValidationError("checkpoint uses an HTTP embedder; pass --embed-url")
        embedder = HttpEmbedder(args.embed_url, int(ckpt.embedder["dim"]), getattr(args, "embed_cache", None))
    return RouterSnapshot.from_checkpoint(ckpt, embedder), ckpt


def cmd_eval(args) -> int:
    bundle = read_bundle(args.bundle)
    scenarios = dh.SCENARIOS if args.scenarios == "all" else tuple(
        dh.ScenarioWeights.named(s) for s in args.scenarios.split(",")
    )
    ckpts = [load_checkpoint(p) for p in args.ckpt]
    by_scenario = {}
    for c in ckpts:
        by_scenario.setdefault(c.config.scenario.name, c)
    pool_ids = ckpts[0].graph.llm_ids
    pool = [m for m in bundle.log.llms if m.llm_id in set(pool_ids)]
    test_q = bundle.splits.queries(dh.TEST)

    def router_for(sc):
        c = by_scenario.get(sc.name)
        if c is None:
            c = ckpts[0]
            logger.warning("no checkpoint trained for %s; using the %s checkpoint", sc.name, c.config.scenario.name)
        return eb.policy_graphrouter(c.params, c.graph, test_q)

    records = [r for r in bundle.log.records if r.llm_id in set(pool_ids)]
    policies = {
        "Largest LLM": eb.policy_largest(pool),
        "Smallest LLM": eb.policy_smallest(pool),
        "GraphRouter": router_for,
        "Oracle": lambda sc: eb.policy_oracle(
            [r for r in records if bundle.splits.assignment.get(r.query_id) == dh.TEST], sc, bundle.normalization,
            pool_ids,
        ),
    }
    report = eb.evaluate(policies, records, scenarios, bundle.splits, bundle.normalization)
    text = report.to_text()
    print(text, end="")
    if args.with_published:
        print("\nPublished numbers (original study):")
        print(eb.published_report().to_text(), end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "report.csv")
        (out / "report.txt").write_text(text, encoding="utf-8")
        _dump_json({"decide_seconds": report.timings}, out / "timings.json")
    return 0


def cmd_route(args) -> int:
    snap, _ = _snapshot(args.ckpt, args)
    decision = route(snap, args.task, args.query)
    print(json.dumps(decision.to_json(), indent=2, sort_keys=True))
    return 0


def _read_text_arg(value: str | None) -> str | None:
    if value and value.startswith("@"):
        return Path(value[1:]).read_text(encoding="utf-8").strip()
    return value


def cmd_add_llm(args) -> int:
    snap, ckpt = _snapshot(args.ckpt, args)
    aux = dh.read_records(args.aux) if args.aux else []
    known = {}
    if args.bundle:
        known = {m.llm_id: m for m in read_bundle(args.bundle).log.llms}
    t0 = time.perf_counter()
    for llm_id in args.llm_id:
        info = known.get(llm_id)
        if info is None:
            if args.cost is None:
                raise ValidationError(f"llm {llm_id!r} is not in the bundle; pass --cost (and --size, --desc)")
            info = dh.LlmInfo(llm_id, args.name or llm_id, args.size or "", float(args.cost), "")
        elif args.cost is not None:
            info = replace(info, cost_per_mtoken=float(args.cost))
        mine = [r for r in aux if r.llm_id == llm_id]
        snap = add_llm_few_shot(snap, info, _read_text_arg(args.desc), mine)
        print(f"added {llm_id} with {len(mine)} auxiliary records")
    elapsed = time.perf_counter() - t0
    new = Checkpoint(ckpt.config, ckpt.params, ckpt.normalization, ckpt.embedder, snap.graph, ckpt.metrics)
    out = Path(args.out)
    save_checkpoint(out, new)
    _dump_json({"insert_seconds": elapsed}, _out_paths(out)["timings"])
    print(f"snapshot {snap.snapshot_id} written to {out}: {snap.n_llms} llms")
    return 0


def cmd_stats(args) -> int:
    bundle = read_bundle(args.bundle)
    pair = tuple(args.pair.split(",")) if args.pair else None
    if pair is not None and len(pair) != 2:
        raise ValidationError("--pair takes two llm ids separated by a comma")
    paths = dh.distribution_stats(bundle.log.records, args.out, pair, args.bins, args.task)
    for kind, p in paths.items():
        print(f"{kind}: {p}")
    return 0


def cmd_serve(args) -> int:
    snap, _ = _snapshot(args.ckpt, args)
    svc = serve(snap, args.bind)
    print(f"serving snapshot {snap.snapshot_id} at {svc.url} (Ctrl-C to stop)", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        svc.shutdown()
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphrouter", description="Graph-based LLM router")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="ingest or generate a log and write a prepared bundle")
    s.add_argument("--log", help="interaction log (JSON lines)")
    s.add_argument("--synthetic", action="store_true", help="generate a synthetic log")
    s.add_argument("--synthetic-config", help="JSON file with synthetic generator options")
    s.add_argument("--noise", type=float, help="synthetic performance noise")
    s.add_argument("--split", choices=("standard", "new-llm"), default="standard")
    s.add_argument("--held-out", type=int, default=4, help="hold out the last N llms (new-llm split)")
    s.add_argument("--held-out-ids", help="comma-separated llm ids to hold out instead")
    s.add_argument("--aux-queries", type=int, default=80)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    def embed_flags(s):
        s.add_argument("--embed-url", help="HTTP embedding service")
        s.add_argument("--embed-cache", help="directory for cached embeddings")

    s = sub.add_parser("train", help="train a router on a bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--scenario", help="performance-first, balance or cost-first")
    s.add_argument("--config", help="JSON config file")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--hidden", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--base-lr", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--embed-dim", type=int)
    s.add_argument("-v", "--verbose", action="store_true", help="print one line per epoch")
    embed_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score baselines, oracle and router on Test queries")
    s.add_argument("--bundle", required=True)
    s.add_argument("--ckpt", required=True, nargs="+", help="one checkpoint per scenario")
    s.add_argument("--scenarios", default="all")
    s.add_argument("--out-dir")
    s.add_argument("--with-published", action="store_true", help="also print the published table")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("route", help="route one query")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--query", required=True)
    embed_flags(s)
    s.set_defaults(func=cmd_route)

    s = sub.add_parser("add-llm", help="insert new llms from descriptions and few-shot records")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--llm-id", required=True, action="append")
    s.add_argument("--aux", help="auxiliary records (JSON lines)")
    s.add_argument("--bundle", help="bundle whose log describes the llms")
    s.add_argument("--desc", help="description text, or @file")
    s.add_argument("--cost", type=float, help="cost per 1M tokens")
    s.add_argument("--size", help="size label such as 7b")
    s.add_argument("--name")
    s.add_argument("--out", required=True, help="new checkpoint path")
    embed_flags(s)
    s.set_defaults(func=cmd_add_llm)

    s = sub.add_parser("stats", help="performance histograms and win-probability curves")
    s.add_argument("--bundle", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pair", help="small,large llm ids for the win curve")
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--task")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("serve", help="HTTP routing service")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--bind", default="127.0.0.1:8080")
    embed_flags(s)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GraphRouterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

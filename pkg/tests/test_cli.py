"""The command line end to end on a tiny synthetic bundle."""

import json

import numpy as np
import pytest

from graphrouter import cli
from graphrouter import trainer as T

TINY = {"n_tasks": 2, "n_llms": 4, "queries_per_task": 15}
TRAIN_FLAGS = ["--hidden", "8", "--max-epochs", "4", "--batch-size", "8", "--embed-dim", "16"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "syn.json").write_text(json.dumps(TINY))
    assert run("prepare", "--synthetic", "--synthetic-config", d / "syn.json", "--out", d / "b") == 0
    assert run("prepare", "--synthetic", "--synthetic-config", d / "syn.json", "--split", "new-llm",
               "--held-out", 1, "--aux-queries", 5, "--out", d / "nb") == 0
    assert run("train", "--bundle", d / "b", "--out", d / "m.bin", *TRAIN_FLAGS) == 0
    assert run("train", "--bundle", d / "nb", "--out", d / "n.bin", *TRAIN_FLAGS) == 0
    return d


class TestPrepare:
    def test_bundle_contents(self, work):
        man = json.loads((work / "b" / "manifest.json").read_text())
        assert man["counts"]["records"] == 2 * 15 * 4
        assert set(man["files"]) == {"log.jsonl", "splits.json", "normalization.json"}
        nman = json.loads((work / "nb" / "manifest.json").read_text())
        assert len(nman["held_out"]) == 1 and nman["counts"]["aux_records"] == 5
        assert (work / "nb" / "aux.jsonl").is_file()

    def test_rerun_byte_identical(self, work, tmp_path):
        run("prepare", "--synthetic", "--synthetic-config", work / "syn.json", "--out", tmp_path / "b")
        for f in ("log.jsonl", "splits.json", "normalization.json", "manifest.json"):
            assert (tmp_path / "b" / f).read_bytes() == (work / "b" / f).read_bytes()

    def test_tampered_bundle_rejected(self, work, tmp_path, capsys):
        run("prepare", "--synthetic", "--synthetic-config", work / "syn.json", "--out", tmp_path / "b")
        with open(tmp_path / "b" / "splits.json", "a") as fh:
            fh.write(" ")
        assert run("stats", "--bundle", tmp_path / "b", "--out", tmp_path / "s") == 2
        assert "checksum" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [
        ["prepare", "--out", "x"],
        ["prepare", "--synthetic", "--split", "new-llm", "--held-out", "0", "--out", "x"],
        ["prepare", "--log", "/nonexistent/log.jsonl", "--out", "x"],
    ])
    def test_invalid_input_exit_2(self, argv, tmp_path):
        argv[-1] = str(tmp_path / argv[-1])
        assert run(*argv) == 2

    def test_malformed_log(self, tmp_path, capsys):
        (tmp_path / "log.jsonl").write_text('{"task_id": "t"}\n')
        assert run("prepare", "--log", tmp_path / "log.jsonl", "--out", tmp_path / "b") == 2
        assert capsys.readouterr().err.startswith("error:")


class TestTrain:
    def test_side_files(self, work):
        metrics = (work / "m.metrics.jsonl").read_text().splitlines()
        assert len(metrics) == 4
        cfg = json.loads((work / "m.config.json").read_text())
        assert cfg["train"]["hidden"] == 8 and cfg["embedder"] == {"name": "hash", "dim": 16, "seed": 0}
        assert "train_seconds" in json.loads((work / "m.timings.json").read_text())

    def test_rerun_byte_identical(self, work, tmp_path):
        assert run("train", "--bundle", work / "b", "--out", tmp_path / "m.bin", *TRAIN_FLAGS) == 0
        assert (tmp_path / "m.bin").read_bytes() == (work / "m.bin").read_bytes()
        assert (tmp_path / "m.metrics.jsonl").read_bytes() == (work / "m.metrics.jsonl").read_bytes()

    def test_config_file_then_flags(self, work, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"hidden": 4, "max_epochs": 2, "scenario": "cost-first",
                                                     "embedder": {"dim": 16}}))
        assert run("train", "--bundle", work / "b", "--config", tmp_path / "c.json", "--max-epochs", 1,
                   "--out", tmp_path / "c.bin") == 0
        ck = T.load_checkpoint(tmp_path / "c.bin")
        assert (ck.config.hidden, ck.config.max_epochs, ck.config.scenario.name) == (4, 1, "CostFirst")

    def test_bad_config(self, work, tmp_path):
        (tmp_path / "c.json").write_text('{"dropout": 0.5}')
        assert run("train", "--bundle", work / "b", "--config", tmp_path / "c.json", "--out", tmp_path / "x") == 2
        (tmp_path / "c.json").write_text("{oops")
        assert run("train", "--bundle", work / "b", "--config", tmp_path / "c.json", "--out", tmp_path / "x") == 2
        assert run("train", "--bundle", work / "b", "--hidden", 0, "--out", tmp_path / "x") == 2

    def test_numeric_failure_exit_3(self, work, tmp_path, monkeypatch):
        monkeypatch.setattr(T.M, "batch_loss", lambda *a: T.nx.Tensor(np.array(np.inf)))
        assert run("train", "--bundle", work / "b", "--out", tmp_path / "x.bin", *TRAIN_FLAGS) == 3
        assert not (tmp_path / "x.bin").exists()


class TestEval:
    def test_report_files(self, work, tmp_path, capsys):
        assert run("eval", "--bundle", work / "b", "--ckpt", work / "m.bin", "--out-dir", tmp_path,
                   "--with-published") == 0
        out = capsys.readouterr().out
        assert "GraphRouter" in out and "Published numbers" in out
        csv = (tmp_path / "report.csv").read_text().splitlines()
        assert csv[0] == "policy,scenario,performance,cost,reward"
        assert len(csv) == 1 + 4 * 3
        assert set(json.loads((tmp_path / "timings.json").read_text())["decide_seconds"]) == {
            "Largest LLM", "Smallest LLM", "GraphRouter", "Oracle"}

    def test_rerun_byte_identical(self, work, tmp_path):
        run("eval", "--bundle", work / "b", "--ckpt", work / "m.bin", "--out-dir", tmp_path / "a")
        run("eval", "--bundle", work / "b", "--ckpt", work / "m.bin", "--out-dir", tmp_path / "b")
        for f in ("report.csv", "report.txt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_scenario_subset_and_errors(self, work, tmp_path):
        assert run("eval", "--bundle", work / "b", "--ckpt", work / "m.bin", "--scenarios", "balance",
                   "--out-dir", tmp_path) == 0
        assert len((tmp_path / "report.csv").read_text().splitlines()) == 5
        assert run("eval", "--bundle", work / "b", "--ckpt", work / "m.bin", "--scenarios", "cheap") == 2
        (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
        assert run("eval", "--bundle", work / "b", "--ckpt", tmp_path / "bad.bin") == 2


class TestRouteAndAddLlm:
    def test_route(self, work, capsys):
        task = json.loads((work / "b" / "log.jsonl").read_text().splitlines()[0])
        task_id = task.get("task_id") or task.get("task", {}).get("task_id")
        assert run("route", "--ckpt", work / "m.bin", "--task", task_id, "--query", "write a poem") == 0
        out = json.loads(capsys.readouterr().out)
        assert out["llm_id"] in out["logits"]

    def test_route_unknown_task(self, work, capsys):
        assert run("route", "--ckpt", work / "m.bin", "--task", "ghost", "--query", "q") == 2
        assert "ghost" in capsys.readouterr().err

    def test_add_llm_from_bundle(self, work, tmp_path, capsys):
        held = json.loads((work / "nb" / "manifest.json").read_text())["held_out"][0]
        assert run("add-llm", "--ckpt", work / "n.bin", "--bundle", work / "nb", "--aux", work / "nb" / "aux.jsonl",
                   "--llm-id", held, "--out", tmp_path / "a.bin") == 0
        assert "with 5 auxiliary records" in capsys.readouterr().out
        ck = T.load_checkpoint(tmp_path / "a.bin")
        assert held in ck.graph.llm_ids
        assert ck.params.digest() == T.load_checkpoint(work / "n.bin").params.digest()
        assert "insert_seconds" in json.loads((tmp_path / "a.timings.json").read_text())

    def test_add_llm_by_hand(self, work, tmp_path):
        (tmp_path / "d.txt").write_text("A small fast model for short answers.")
        assert run("add-llm", "--ckpt", work / "n.bin", "--llm-id", "brand-new", "--cost", 0.2, "--size", "7b",
                   "--desc", f"@{tmp_path / 'd.txt'}", "--out", tmp_path / "h.bin") == 0
        assert "brand-new" in T.load_checkpoint(tmp_path / "h.bin").graph.llm_ids
        assert run("add-llm", "--ckpt", work / "n.bin", "--llm-id", "other", "--out", tmp_path / "x.bin") == 2


def test_stats(work, tmp_path):
    log = [json.loads(x) for x in (work / "b" / "log.jsonl").read_text().splitlines()]
    ids = sorted({r["llm_id"] for r in log if "llm_id" in r})
    assert run("stats", "--bundle", work / "b", "--out", tmp_path, "--pair", f"{ids[0]},{ids[1]}") == 0
    assert (tmp_path / "histograms.csv").is_file() and (tmp_path / "win_curve.csv").is_file()
    assert run("stats", "--bundle", work / "b", "--out", tmp_path, "--pair", "a,b,c") == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as err:
        run("train")
    assert err.value.code == 2

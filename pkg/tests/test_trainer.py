"""Training loop, validation, early stopping and the checkpoint format."""

import dataclasses
import json
import math
import struct

import numpy as np
import pytest

from graphrouter import datahub as dh
from graphrouter import trainer as T
from graphrouter.errors import NumericError, ValidationError

from conftest import FAST, prepared


class TestConfig:
    def test_defaults(self):
        c = T.TrainConfig()
        assert (c.hidden, c.layers, c.batch_size, c.base_lr, c.patience) == (32, 2, 32, 1e-3, 50)
        assert c.scenario == dh.BALANCE

    @pytest.mark.parametrize("field,value", [
        ("hidden", 0), ("layers", -1), ("batch_size", 2.5), ("max_epochs", True), ("base_lr", 0.0), ("base_lr", float("nan")),
    ])
    def test_invalid(self, field, value):
        with pytest.raises(ValidationError):
            T.TrainConfig(**{field: value})

    def test_json_round_trip(self):
        c = T.TrainConfig(hidden=16, scenario=dh.COST_FIRST)
        assert T.TrainConfig.from_json(json.loads(json.dumps(c.to_json()))) == c
        assert T.TrainConfig.from_json({"scenario": "cost-first"}).scenario == dh.COST_FIRST
        with pytest.raises(ValidationError):
            T.TrainConfig.from_json({"dropout": 0.1})


class TestTrain:
    def test_metrics(self, trained):
        m = trained.metrics
        assert m["epochs_run"] == 6
        assert m["steps"] == 6 * m["batches_per_epoch"]
        assert 1 <= m["best_epoch"] <= 6
        assert m["val_reward"] == pytest.approx(0.5 * m["val_performance"] - 0.5 * m["val_cost"])

    def test_best_val_parameters_kept(self, small, trained):
        g = small[4]
        reward, _, _ = T.validate(g, trained.params, FAST)
        assert reward == trained.metrics["val_reward"]

    def test_metrics_log(self, small, tmp_path):
        _, _, _, feats, g = small
        rows = []
        T.train(g, feats, dataclasses.replace(FAST, max_epochs=3), tmp_path / "m.jsonl", on_epoch=rows.append)
        lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert lines == rows
        assert [r["epoch"] for r in lines] == [1, 2, 3]
        per = lines[0]["step"]
        assert lines[0]["lr"] == pytest.approx(FAST.base_lr * (1 - (per - 1) / (3 * per)))
        assert all(r["lr"] > s["lr"] for r, s in zip(lines, lines[1:]))

    def test_early_stopping(self, small):
        _, _, _, feats, g = small
        ck = T.train(g, feats, dataclasses.replace(FAST, max_epochs=40, patience=2))
        m = ck.metrics
        assert m["epochs_run"] == m["best_epoch"] + 2 or m["epochs_run"] == 40

    def test_deterministic(self, small, trained):
        _, _, _, feats, g = small
        again = T.train(g, feats, FAST)
        assert T.checkpoint_bytes(again) == T.checkpoint_bytes(trained)

    def test_needs_val(self, small):
        log, sp, norm, feats, g = small
        no_val = dataclasses.replace(g, query_split=np.where(g.query_split == 1, 0, g.query_split).astype(np.int8))
        with pytest.raises(ValidationError):
            T.train(no_val, feats, FAST)

    def test_non_finite_loss_aborts(self, small, monkeypatch):
        _, _, _, feats, g = small
        monkeypatch.setattr(T.M, "batch_loss", lambda *a: T.nx.Tensor(np.array(np.nan)))
        with pytest.raises(NumericError, match="largest gradient norms"):
            T.train(g, feats, FAST)

    def test_planted_toy_fits(self):
        """1 task, 3 LLMs, 60 noise-free queries: loss falls below 0.1 ln 3."""
        cfg = dh.SyntheticConfig(n_tasks=1, n_llms=3, queries_per_task=60, noise=0.0)
        _, _, _, feats, g = prepared(cfg, dim=32)
        losses = []
        T.train(g, feats, T.TrainConfig(hidden=32, max_epochs=200, patience=200, base_lr=1e-2),
                on_epoch=lambda r: losses.append(r["loss"]))
        assert min(losses) < 0.1 * math.log(3)


class TestCheckpoint:
    def test_round_trip_byte_identical(self, trained, tmp_path):
        p = tmp_path / "ck.bin"
        T.save_checkpoint(p, trained)
        loaded = T.load_checkpoint(p)
        assert T.checkpoint_bytes(loaded) == p.read_bytes()
        assert loaded.params.digest() == trained.params.digest()
        assert loaded.graph.equals(trained.graph)
        assert loaded.config == trained.config and loaded.normalization == trained.normalization
        assert not (tmp_path / "ck.bin.tmp").exists()

    def test_bad_magic(self, trained):
        buf = bytearray(T.checkpoint_bytes(trained))
        buf[0:1] = b"X"
        with pytest.raises(T.CheckpointError, match="offset 0"):
            T.parse_checkpoint(bytes(buf))

    def test_version_mismatch(self, trained):
        buf = bytearray(T.checkpoint_bytes(trained))
        buf[8:12] = struct.pack("<I", 99)
        with pytest.raises(T.CheckpointError, match="version 99"):
            T.parse_checkpoint(bytes(buf))

    def test_flipped_byte_detected(self, trained):
        buf = bytearray(T.checkpoint_bytes(trained))
        buf[-5] ^= 0xFF
        with pytest.raises(T.CheckpointError, match="checksum mismatch"):
            T.parse_checkpoint(bytes(buf))

    @pytest.mark.parametrize("cut", [4, 15, 200, -1])
    def test_truncated(self, trained, cut):
        buf = T.checkpoint_bytes(trained)
        with pytest.raises(T.CheckpointError, match="corrupt checkpoint"):
            T.parse_checkpoint(buf[:cut])

    def test_trailing_bytes(self, trained):
        with pytest.raises(T.CheckpointError, match="trailing"):
            T.parse_checkpoint(T.checkpoint_bytes(trained) + b"\0")

    def test_embedder_mismatch(self, trained):
        buf = T.checkpoint_bytes(trained)
        T.parse_checkpoint(buf, {"name": "hash", "dim": 16, "seed": 0})
        with pytest.raises(T.CheckpointError, match="embedder identity"):
            T.parse_checkpoint(buf, {"name": "hash", "dim": 16, "seed": 1})

"""Single-query routing, few-shot LLM insertion and the HTTP service."""

import json
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from graphrouter import datahub as dh
from graphrouter import router as R
from graphrouter.errors import ValidationError
from graphrouter.features import HashEmbedder


def call(url, method="GET", body=None, raw=None):
    data = raw if raw is not None else (json.dumps(body).encode() if body is not None else None)
    req = urllib.request.Request(url, data=data, method=method, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=30) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


@pytest.fixture(scope="module")
def snap(trained):
    return R.RouterSnapshot.from_checkpoint(trained)


@pytest.fixture(scope="module")
def new_llm_parts(small_new_llm, trained_new_llm):
    log, sp, _, _, _ = small_new_llm
    held = log.llm(sp.held_out[0])
    return R.RouterSnapshot.from_checkpoint(trained_new_llm), held, sp.aux_records(log.records)


class TestRoute:
    def test_decision_fields(self, snap):
        d = R.route(snap, snap.graph.task_ids[0], "Explain how to write a list of suggestions.")
        body = d.to_json()
        assert set(body) == {"llm_id", "logits", "probabilities", "snapshot_id"}
        assert set(body["logits"]) == set(snap.graph.llm_ids)
        assert sum(body["probabilities"].values()) == pytest.approx(1.0)
        assert body["llm_id"] == max(body["logits"], key=body["logits"].get)
        assert body["snapshot_id"] == snap.snapshot_id

    def test_repeatable_and_snapshot_untouched(self, snap):
        n = snap.graph.n_queries
        a = R.route(snap, snap.graph.task_ids[1], "how many apples").to_json()
        b = R.route(snap, snap.graph.task_ids[1], "how many apples").to_json()
        assert a == b
        assert snap.graph.n_queries == n

    def test_errors(self, snap):
        with pytest.raises(ValidationError) as err:
            R.route(snap, "no-such-task", "hello")
        assert err.value.code == "unknown_task" and "no-such-task" in str(err.value)
        with pytest.raises(ValidationError) as err:
            R.route(snap, snap.graph.task_ids[0], "  ")
        assert err.value.code == "empty_query"

    def test_snapshot_id_stable(self, trained, snap):
        assert R.RouterSnapshot.from_checkpoint(trained).snapshot_id == snap.snapshot_id

    def test_embedder_must_match(self, trained):
        with pytest.raises(ValidationError) as err:
            R.RouterSnapshot.from_checkpoint(trained, HashEmbedder(16, seed=9))
        assert err.value.code == "embedder_mismatch"


class TestFewShot:
    def test_insert_adds_candidate(self, new_llm_parts):
        base, held, aux = new_llm_parts
        new = R.add_llm_few_shot(base, held, None, aux)
        assert new.n_llms == base.n_llms + 1
        assert held.llm_id not in base.graph.llm_ids
        assert new.snapshot_id != base.snapshot_id
        assert new.params is base.params
        d = R.route(new, new.graph.task_ids[0], "a new question")
        assert held.llm_id in d.logits

    def test_existing_logits_change_only_through_graph(self, new_llm_parts):
        base, held, _ = new_llm_parts
        new = R.add_llm_few_shot(base, held, "A model with no interactions yet.", [])
        a = R.route(base, base.graph.task_ids[0], "same text").logits
        b = R.route(new, new.graph.task_ids[0], "same text").logits
        for m, v in a.items():   # an isolated node sends no messages
            assert b[m] == pytest.approx(v, abs=1e-12)


class TestService:
    @pytest.fixture()
    def service(self, snap):
        svc = R.serve(snap, "127.0.0.1:0")
        yield svc
        svc.shutdown()

    def test_health(self, service, snap):
        status, body = call(service.url + "/health")
        assert status == 200
        assert body == {"snapshot_id": snap.snapshot_id, "n_llms": snap.n_llms, "n_tasks": snap.n_tasks}

    def test_route_matches_library(self, service, snap):
        t = snap.graph.task_ids[0]
        status, body = call(service.url + "/route", "POST", {"task_id": t, "query_text": "write a story"})
        assert status == 200
        assert body == json.loads(json.dumps(R.route(snap, t, "write a story").to_json()))

    @pytest.mark.parametrize("payload,code", [
        ({"task_id": "ghost", "query_text": "x"}, "unknown_task"),
        ({"query_text": "x"}, "missing_field"),
        ({"task_id": 3, "query_text": "x"}, "invalid_field"),
        ({"task_id": "alpaca", "query_text": ""}, "empty_query"),
    ])
    def test_route_errors(self, service, payload, code):
        status, body = call(service.url + "/route", "POST", payload)
        assert status == 400
        assert body["error"]["code"] == code

    def test_bad_json_and_paths(self, service):
        assert call(service.url + "/route", "POST", raw=b"{nope")[1]["error"]["code"] == "invalid_json"
        assert call(service.url + "/route", "POST", raw=b"[1]")[1]["error"]["code"] == "invalid_json"
        assert call(service.url + "/nothing")[0] == 404
        assert call(service.url + "/nothing", "POST", {})[1]["error"]["code"] == "not_found"

    def test_concurrent_identical(self, service, snap):
        payload = {"task_id": snap.graph.task_ids[0], "query_text": "list three ideas"}
        with ThreadPoolExecutor(8) as pool:
            bodies = list(pool.map(lambda _: call(service.url + "/route", "POST", payload)[1], range(20)))
        assert all(b == bodies[0] for b in bodies)


def test_llms_endpoint_swaps_snapshot(new_llm_parts):
    base, held, aux = new_llm_parts
    svc = R.serve(base)
    try:
        body = {
            "llm_info": {"llm_id": held.llm_id, "name": held.name, "size_label": held.size_label,
                         "cost_per_mtoken": held.cost_per_mtoken, "description": held.description},
            "aux_records": [{"task_id": r.task_id, "query_id": r.query_id, "performance": r.performance,
                             "cost": r.cost} for r in aux],
        }
        status, out = call(svc.url + "/llms", "POST", body)
        assert status == 200 and out["n_llms"] == base.n_llms + 1
        assert svc.snapshot.snapshot_id == out["snapshot_id"]
        expected = R.add_llm_few_shot(base, held, None, aux).snapshot_id
        assert out["snapshot_id"] == expected
        _, routed = call(svc.url + "/route", "POST", {"task_id": base.graph.task_ids[0], "query_text": "q"})
        assert held.llm_id in routed["logits"] and routed["snapshot_id"] == expected
        status, again = call(svc.url + "/llms", "POST", body)
        assert status == 400 and again["error"]["code"] == "duplicate_llm"
        status, bad = call(svc.url + "/llms", "POST", {"llm_info": {"name": "x"}})
        assert status == 400 and bad["error"]["code"] == "invalid_llm_info"
    finally:
        svc.shutdown()


def test_bind_address_validated(snap):
    with pytest.raises(ValidationError):
        R.serve(snap, "localhost:http")

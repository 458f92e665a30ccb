import numpy as np
import pytest
from fastapi.testclient import TestClient

from slidergen.service import GenerateRequest, InferenceEngine, create_app


@pytest.fixture(scope="module")
def engine(tiny_run):
    return InferenceEngine.from_files(tiny_run["result"].checkpoint_path,
                                      tiny_run["world_path"])


@pytest.fixture(scope="module")
def client(engine):
    return TestClient(create_app(engine, max_batch=8))


def _req(**kw):
    base = dict(prompt_class=1, sliders=[0.5, 0.5, 0.5], seed=7)
    base.update(kw)
    return base


def test_healthz(client, tiny_run):
    resp = client.get("/healthz")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok"
    assert body["model_step"] == tiny_run["train_cfg"].total_steps


def test_schema_matches_world(client, tiny_run):
    world = tiny_run["world"]
    body = client.get("/schema").json()
    assert body["attributes"] == world.attribute_names
    assert body["n_attributes"] == world.spec.n_attributes
    assert len(body["prompt_classes"]) == world.spec.n_prompt_classes
    assert body["latent_dim"] == world.spec.latent_dim
    assert body["max_batch"] == 8


def test_generate_roundtrip(client, tiny_run):
    resp = client.post("/generate", json=_req())
    assert resp.status_code == 200
    body = resp.json()
    spec = tiny_run["world"].spec
    assert len(body["latent"]) == spec.latent_dim
    assert len(body["measured_attributes"]) == spec.n_attributes
    assert all(0.0 <= x <= 1.0 for x in body["measured_attributes"])
    assert len(body["identity"]) == spec.identity_dim
    assert body["render"].lstrip().startswith("<?xml")
    import xml.etree.ElementTree as ET
    ET.fromstring(body["render"].split("\n", 1)[1])


def test_identical_requests_identical_bytes(client):
    r1 = client.post("/generate", json=_req())
    r2 = client.post("/generate", json=_req())
    assert r1.content == r2.content


def test_different_seed_changes_output(client):
    r1 = client.post("/generate", json=_req(seed=1)).json()
    r2 = client.post("/generate", json=_req(seed=2)).json()
    assert r1["latent"] != r2["latent"]


class TestValidation:
    def test_prompt_class_out_of_range(self, client):
        resp = client.post("/generate", json=_req(prompt_class=99))
        assert resp.status_code == 422
        assert resp.json()["field"] == "prompt_class"

    def test_slider_out_of_range_names_field(self, client):
        resp = client.post("/generate", json=_req(sliders=[0.5, 1.2, 0.5]))
        assert resp.status_code == 422
        assert resp.json()["field"] == "sliders"

    def test_slider_count(self, client):
        resp = client.post("/generate", json=_req(sliders=[0.5, 0.5]))
        assert resp.status_code == 422
        assert resp.json()["field"] == "sliders"

    def test_negative_seed(self, client):
        resp = client.post("/generate", json=_req(seed=-1))
        assert resp.status_code == 422
        assert resp.json()["field"] == "seed"

    def test_steps_out_of_range(self, client):
        resp = client.post("/generate", json=_req(steps=10_000))
        assert resp.status_code == 422
        assert resp.json()["field"] == "steps"

    def test_malformed_body(self, client):
        resp = client.post("/generate", json={"prompt_class": 0})
        assert resp.status_code == 422


class TestBatch:
    def test_batch_equals_singles(self, client):
        reqs = [_req(seed=s) for s in (3, 4, 5)]
        batch = client.post("/batch-generate", json={"requests": reqs}).json()["responses"]
        singles = [client.post("/generate", json=r).json() for r in reqs]
        assert batch == singles

    def test_empty_batch(self, client):
        resp = client.post("/batch-generate", json={"requests": []})
        assert resp.status_code == 200
        assert resp.json()["responses"] == []

    def test_oversize_batch_rejected(self, client):
        reqs = [_req(seed=s) for s in range(9)]
        resp = client.post("/batch-generate", json={"requests": reqs})
        assert resp.status_code == 413


def test_cors_headers(client):
    resp = client.get("/schema", headers={"Origin": "http://localhost:5173"})
    assert resp.headers.get("access-control-allow-origin") in ("*", "http://localhost:5173")


def test_non_finite_model_output_is_500(tiny_run):
    engine = InferenceEngine.from_files(tiny_run["result"].checkpoint_path,
                                        tiny_run["world_path"])
    engine.params["head.b"][:] = np.nan
    client = TestClient(create_app(engine, max_batch=8), raise_server_exceptions=False)
    resp = client.post("/generate", json=_req())
    assert resp.status_code == 500


def test_world_hash_mismatch_rejected(tiny_run, tmp_path):
    from slidergen.world import WorldSpec

    other = WorldSpec(world_seed=12345)
    path = tmp_path / "other.json"
    other.save(path)
    with pytest.raises(Exception, match="hash"):
        InferenceEngine.from_files(tiny_run["result"].checkpoint_path, path)


def test_latency_smoke(engine):
    import time

    req = GenerateRequest(prompt_class=0, sliders=[0.5, 0.5, 0.5], seed=1)
    engine.generate(req)
    t0 = time.perf_counter()
    engine.generate(req)
    assert time.perf_counter() - t0 < 1.0

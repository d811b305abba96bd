"""
HTTP API for launching experiments and browsing the run registry
"""
import pytest
from fastapi.testclient import TestClient
from sqlalchemy import inspect

from subspace_cl.api import app
from subspace_cl.config import ABLATION_PRESETS
from subspace_cl.database import Base, engine


@pytest.fixture
def client():
    with TestClient(app) as test_client:
        yield test_client


class TestStatus:
    def test_root(self, client):
        response = client.get("/")
        assert response.status_code == 200
        assert response.json()["status"] == "active"

    def test_health(self, client):
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json()["status"] == "ok"

    def test_presets(self, client):
        presets = client.get("/presets").json()
        assert set(presets) == set(ABLATION_PRESETS)
        assert presets["full_loda"]["train"]["optimizer"] == "gao"

    def test_registry_created_on_startup(self):
        Base.metadata.drop_all(bind=engine)
        assert not inspect(engine).has_table("experiment_runs")
        with TestClient(app):
            assert inspect(engine).has_table("experiment_runs")


class TestExperiments:
    def test_invalid_config(self, client):
        response = client.post("/experiments", json={"config": {"stream": {"kappa": 2.0}}})
        assert response.status_code == 422

    def test_unknown_preset(self, client):
        response = client.post("/experiments", json={"preset": "everything"})
        assert response.status_code == 422
        assert "full_loda" in response.json()["detail"]

    def test_background_run_is_recorded(self, client, small_overrides):
        response = client.post("/experiments", json={"config": small_overrides, "seed": 2})
        assert response.status_code == 200
        body = response.json()
        assert body["status"] == "started"
        assert body["output_dir"] == small_overrides["output_dir"]

        runs = client.get("/experiments", params={"limit": 50}).json()
        matching = [run for run in runs if run["fingerprint"] == body["fingerprint"]]
        assert matching and matching[0]["status"] == "completed"
        assert matching[0]["seed"] == 2

        detail = client.get(f"/experiments/{matching[0]['id']}").json()
        assert detail["report"]["fingerprint"] == body["fingerprint"]
        assert len(detail["report"]["accuracy_matrix"]) == small_overrides["stream"]["num_tasks"]

    def test_missing_run(self, client):
        response = client.get("/experiments/999999")
        assert response.status_code == 404

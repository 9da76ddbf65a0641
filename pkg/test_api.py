"""
Tests for the FastAPI endpoints
"""
import pytest
from fastapi.testclient import TestClient

from config import settings
from main import app


@pytest.fixture
def client(monkeypatch, tmp_path):
    """Client whose default output directory is a scratch directory"""
    monkeypatch.setattr(settings, "experiment_config", None)
    monkeypatch.setattr(settings, "output_dir", str(tmp_path / "api"))
    return TestClient(app)


@pytest.fixture
def workspace_client(client, monkeypatch, trained_workspace, tmp_path):
    """Client serving the shared trained workspace"""
    config_file = tmp_path / "workspace.json"
    config_file.write_text(trained_workspace["config"].model_dump_json())
    monkeypatch.setattr(settings, "experiment_config", str(config_file))
    return client


class TestSystemEndpoints:
    """Test health and rule listing"""

    def test_health(self, client):
        """Test health check"""
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json() == {"status": "healthy", "version": settings.api_version}

    def test_rules(self, client):
        """Test the acceptance rule catalogue"""
        data = client.get("/api/v1/rules").json()
        assert data["total_rules"] == 6
        assert data["rules"][0]["rule_id"] == "AR001"


class TestReconstruction:
    """Test reconstruction and consistency endpoints"""

    def test_reconstruct(self, workspace_client, trained_workspace):
        """Test a multimodal reconstruction over HTTP"""
        response = workspace_client.post(
            "/api/v1/reconstruct",
            json={"checkpoint": trained_workspace["multimodal"], "fraction": 0.25, "sigma": 0.1, "seed": 2},
        )
        assert response.status_code == 200
        data = response.json()
        assert data["success"] is True
        assert "disorientation_mean" in data["metrics"]

    def test_particle_override(self, workspace_client, trained_workspace):
        """Test the request can change the particle count"""
        response = workspace_client.post(
            "/api/v1/reconstruct",
            json={"checkpoint": trained_workspace["unimodal"], "fraction": 0.5, "particles": 4},
        )
        assert response.status_code == 200
        assert response.json()["model"] == "unimodal-w16"

    def test_missing_dataset_is_404(self, client):
        """Test a reconstruction before gen-data reports not found"""
        response = client.post("/api/v1/reconstruct", json={"checkpoint": "none.ckpt", "fraction": 0.5})
        assert response.status_code == 404

    def test_missing_checkpoint_is_404(self, workspace_client):
        """Test an unknown checkpoint reports not found"""
        response = workspace_client.post("/api/v1/reconstruct", json={"checkpoint": "none.ckpt", "fraction": 0.5})
        assert response.status_code == 404

    def test_invalid_fraction_is_422(self, client):
        """Test request validation"""
        response = client.post("/api/v1/reconstruct", json={"checkpoint": "x", "fraction": 1.5})
        assert response.status_code == 422

    def test_consistency(self, workspace_client, trained_workspace):
        """Test consistency errors come back per sample"""
        response = workspace_client.post(
            "/api/v1/consistency", json={"checkpoint": trained_workspace["multimodal"], "n": 2}
        )
        assert response.status_code == 200
        assert len(response.json()["errors"]) == 2

    def test_consistency_on_unimodal_is_400(self, workspace_client, trained_workspace):
        """Test the check refuses a main-only checkpoint"""
        response = workspace_client.post(
            "/api/v1/consistency", json={"checkpoint": trained_workspace["unimodal"], "n": 2}
        )
        assert response.status_code == 400


class TestEvaluate:
    """Test the acceptance endpoint"""

    def test_empty_directory(self, client, tmp_path):
        """Test every rule is skipped without tables"""
        response = client.post("/api/v1/evaluate", json={"output_dir": str(tmp_path)})
        assert response.status_code == 200
        data = response.json()
        assert data["total_rules_checked"] == 0
        assert data["grade"] == "A"
        assert (tmp_path / "acceptance_report.json").exists()

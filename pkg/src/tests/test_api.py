# src/tests/test_api.py

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from src.main import app
from src.models.detector import init_detector_params
from src.services.checkpoint_store import CheckpointStore
from src.services.config import settings
from src.services.model_registry import model_registry
from src.tests.conftest import make_tiny_config

PREFIX = settings.API_PREFIX


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "OUTPUT_DIR", str(tmp_path))
    monkeypatch.setattr(settings, "CHECKPOINT_PATH", None)
    model_registry.clear()
    yield TestClient(app)
    model_registry.clear()


@pytest.fixture
def checkpoint(tmp_path):
    cfg = make_tiny_config()
    path = CheckpointStore.save(tmp_path / "ckpt" / "model", init_detector_params(cfg), cfg, steps=3)
    return str(path)


def _points(n=50, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([
        rng.uniform(-4.0, 4.0, size=(n, 2)),
        rng.uniform(0.0, 2.0, size=n),
        rng.uniform(0.0, 1.0, size=n),
    ])
    return pts.tolist()


def test_health_without_checkpoint(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    assert resp.json() == {"status": "ok", "checkpoint": None, "loaded": False}


def test_detect_without_checkpoint_is_404(client):
    resp = client.post(f"{PREFIX}/detect", json={"points": _points()})
    assert resp.status_code == 404


def test_detect_unknown_checkpoint_is_404(client, tmp_path):
    resp = client.post(f"{PREFIX}/detect", json={"points": _points(), "checkpoint": str(tmp_path / "missing")})
    assert resp.status_code == 404


def test_detect_with_checkpoint(client, checkpoint):
    resp = client.post(f"{PREFIX}/detect", json={"points": _points(), "checkpoint": checkpoint, "max_detections": 4})
    assert resp.status_code == 200
    data = resp.json()
    assert data["num_points"] == 50
    assert data["points_in_grid"] == 50
    assert data["count"] == len(data["boxes"]) == 4
    scores = [b["score"] for b in data["boxes"]]
    assert scores == sorted(scores, reverse=True)
    assert model_registry.is_loaded(checkpoint)


def test_detect_uses_default_checkpoint(client, checkpoint, monkeypatch):
    monkeypatch.setattr(settings, "CHECKPOINT_PATH", checkpoint)
    resp = client.post(f"{PREFIX}/detect", json={"points": []})
    assert resp.status_code == 200
    assert resp.json()["num_points"] == 0
    assert client.get("/health").json()["loaded"] is True


def test_detect_rejects_malformed_points(client, checkpoint):
    resp = client.post(f"{PREFIX}/detect", json={"points": [[0.0, 1.0, 2.0]], "checkpoint": checkpoint})
    assert resp.status_code == 422


def test_detect_rejects_bad_intensity(client, checkpoint):
    resp = client.post(f"{PREFIX}/detect", json={"points": [[0.0, 0.0, 0.0, 3.0]], "checkpoint": checkpoint})
    assert resp.status_code == 400


def test_report_lookup(client, tmp_path):
    (tmp_path / "run1").mkdir()
    (tmp_path / "run1" / "metrics.json").write_text(json.dumps({"mean_ap": 0.25}), encoding="utf-8")
    (tmp_path / "summary.json").write_text(json.dumps({"rows": 3}), encoding="utf-8")

    assert client.get(f"{PREFIX}/reports/run1").json() == {"mean_ap": 0.25}
    assert client.get(f"{PREFIX}/reports/run1/metrics.json").json() == {"mean_ap": 0.25}
    assert client.get(f"{PREFIX}/reports/summary").json() == {"rows": 3}
    assert client.get(f"{PREFIX}/reports/absent").status_code == 404


def test_report_invalid_json(client, tmp_path):
    (tmp_path / "broken.json").write_text("{not json", encoding="utf-8")
    assert client.get(f"{PREFIX}/reports/broken").status_code == 400


def test_report_rejects_odd_names(client):
    assert client.get(f"{PREFIX}/reports/a%20b").status_code == 400


def test_report_absolute_path_is_rejected(client, tmp_path_factory):
    outside = tmp_path_factory.mktemp("outside")
    (outside / "leak.json").write_text(json.dumps({"secret": 1}), encoding="utf-8")
    resp = client.get(f"{PREFIX}/reports/{outside}/leak")
    assert resp.status_code == 400


def test_report_symlink_out_of_output_dir_is_rejected(client, tmp_path, tmp_path_factory):
    outside = tmp_path_factory.mktemp("linked")
    (outside / "metrics.json").write_text(json.dumps({"secret": 1}), encoding="utf-8")
    (tmp_path / "escape").symlink_to(outside, target_is_directory=True)
    assert client.get(f"{PREFIX}/reports/escape").status_code == 400

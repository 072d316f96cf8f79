"""
Tests for the HTTP service.
"""
import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.services.parser import program_to_dict
from tests import programs


@pytest.fixture
def client():
    with TestClient(app) as test_client:
        yield test_client


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "healthy"
    assert body["version"] == "1.0.0"


def test_analyze(client, program_json):
    response = client.post("/analyze", json={"program": program_json})
    assert response.status_code == 200
    assert response.json()["coarse"] == []


def test_analyze_parse_error(client, program_json):
    """Test that an invalid program maps to 400 with the parse error code."""
    del program_json["nodes"]
    response = client.post("/analyze", json={"program": program_json})
    assert response.status_code == 400
    assert response.json()["error"] == "PARSE_ERROR"


def test_optimize_stop_after(client):
    payload = {"program": program_to_dict(programs.spmc_fanout()), "stop_after": "coarse"}
    response = client.post("/optimize", json=payload)

    assert response.status_code == 200
    body = response.json()
    assert body["report"]["stages"] == ["coarse"]
    assert "node1_dup_a" in [n["name"] for n in body["program"]["nodes"]]


def test_optimize_with_simulation(client, program_json):
    payload = {"program": program_json, "simulate": True, "numeric_mode": "int", "seed": 1}
    response = client.post("/optimize", json=payload)

    assert response.status_code == 200
    simulation = response.json()["report"]["simulation"]
    assert simulation["outcome"] == "completed"
    assert simulation["reference_match"] is True


def test_optimize_budget_exceeded(client, program_json):
    payload = {"program": program_json, "budget": {"dsp": 0, "bram18k": 0, "lut": 0, "ff": 0}}
    response = client.post("/optimize", json=payload)
    assert response.status_code == 422
    assert response.json()["error"] == "BUDGET_EXCEEDED"


def test_simulate_with_inputs(client, program_json):
    payload = {"program": program_json, "numeric_mode": "int", "inputs": {"x": [5, 6, 7, 8]}}
    response = client.post("/simulate", json=payload)

    assert response.status_code == 200
    assert response.json()["reference_match"] is True


def test_simulate_deadlock(client):
    """Test that a deadlocked run carries its diagnosis."""
    payload = {"program": program_to_dict(programs.double_reader()), "numeric_mode": "int"}
    response = client.post("/simulate", json=payload)

    assert response.status_code == 200
    body = response.json()
    assert body["outcome"] == "deadlock"
    assert body["deadlock"]["classification"] == "starved_reader"


def test_simulate_wrong_input_size(client, program_json):
    payload = {"program": program_json, "inputs": {"x": [1, 2]}}
    response = client.post("/simulate", json=payload)
    assert response.status_code == 400
    assert response.json()["error"] == "PARSE_ERROR"

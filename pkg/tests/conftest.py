"""
Pytest configuration and fixtures.
"""
import numpy as np
import pytest

from app.config import settings
from app.models.schedule import CostTable, SchedulerConfig
from tests import programs


@pytest.fixture
def integer_mode(monkeypatch):
    """Exact 32-bit integer arithmetic for the duration of a test."""
    monkeypatch.setattr(settings, "NUMERIC_MODE", "int")
    yield True


@pytest.fixture
def costs():
    """Shipped default cost table."""
    return CostTable()


@pytest.fixture
def scheduler_config():
    """Exploration knobs with the settings defaults."""
    return SchedulerConfig.from_settings()


@pytest.fixture
def mini_pipeline():
    return programs.mini_pipeline()


@pytest.fixture
def copy_chain():
    return programs.copy_chain()


@pytest.fixture
def ones_inputs():
    """All-ones tensors for the mini pipeline."""
    return {
        "x": np.ones((6, 6), dtype=np.int64),
        "weight": np.ones((3, 3), dtype=np.int64),
    }


@pytest.fixture
def program_json():
    """Minimal program in the JSON wire format."""
    return {
        "name": "copy",
        "arrays": [
            {"name": "x", "shape": [4], "placement": "external"},
            {"name": "t", "shape": [4]},
            {"name": "y", "shape": [4], "placement": "external"},
        ],
        "nodes": [
            {
                "name": "produce",
                "body": [
                    {
                        "loop": {
                            "var": "i",
                            "lower": 0,
                            "upper": 4,
                            "children": [
                                {"stmt": {"kind": "load", "array": "x", "index": ["i"], "result": "v"}},
                                {"stmt": {"kind": "store", "array": "t", "index": [{"i": 1, "const": 0}], "operands": ["v"]}},
                            ],
                        }
                    }
                ],
            },
            {
                "name": "consume",
                "body": [
                    {
                        "loop": {
                            "var": "i",
                            "lower": 0,
                            "upper": 4,
                            "children": [
                                {"stmt": {"kind": "load", "array": "t", "index": ["i"], "result": "v"}},
                                {"stmt": {"kind": "compute", "op": "add", "operands": ["v", 1], "result": "s"}},
                                {"stmt": {"kind": "store", "array": "y", "index": ["i"], "operands": ["s"]}},
                            ],
                        }
                    }
                ],
            },
        ],
    }

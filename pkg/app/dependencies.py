"""
FastAPI dependency injection for common dependencies.
"""
from typing import Optional

from app.models.schedule import CostTable, ResourceVector
from app.services.perf_model import load_cost_table, load_device

# Loaded once per process (singletons)
_cost_table: Optional[CostTable] = None
_device: Optional[ResourceVector] = None


def get_cost_table() -> CostTable:
    """Operation cost table (``COST_TABLE_PATH`` or the shipped defaults)."""
    global _cost_table

    if _cost_table is None:
        _cost_table = load_cost_table()

    return _cost_table


def get_device() -> ResourceVector:
    """Device resource limits (``DEVICE_PATH`` or the settings defaults)."""
    global _device

    if _device is None:
        _device = load_device()

    return _device

"""
Compiler endpoints: analyze, optimize and simulate a program.
"""
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from fastapi import APIRouter, Depends
from pydantic import BaseModel, Field

from app.config import settings
from app.dependencies import get_cost_table, get_device
from app.models.schedule import CostTable, ResourceVector
from app.services.interpreter import random_inputs, reference_execute
from app.services.parser import program_from_dict, program_to_dict
from app.services.pipeline import PipelineOptions, analyze_program, as_written_graph, run_pipeline
from app.services.report_builder import emit_report
from app.services.simulator import compare_with_reference, detect_deadlock, simulate
from app.utils.errors import ProgramParseError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

router = APIRouter()


class AnalyzeRequest(BaseModel):
    """Request model for violation analysis."""
    program: Dict[str, Any]


class OptimizeRequest(BaseModel):
    """Request model for the optimization flow."""
    program: Dict[str, Any]
    max_parallel: Optional[int] = Field(default=None, ge=1)
    threshold: Optional[float] = Field(default=None, ge=1.0)
    budget: Optional[Dict[str, int]] = None
    enable_downscale: Optional[bool] = None
    enable_upscale: bool = True
    hbm_channels: Optional[int] = None
    fifo_depths: Dict[str, int] = Field(default_factory=dict)
    stop_after: Optional[str] = None
    simulate: bool = False
    seed: int = 0
    numeric_mode: Optional[Literal["float", "int"]] = None
    inputs: Optional[Dict[str, List[float]]] = None


class SimulateRequest(BaseModel):
    """Request model for simulating a program as written."""
    program: Dict[str, Any]
    buffer: Literal["fifo", "pingpong", "sequential"] = "fifo"
    depth: int = Field(default=2, ge=1)
    seed: int = 0
    numeric_mode: Optional[Literal["float", "int"]] = None
    inputs: Optional[Dict[str, List[float]]] = None
    max_cycles: Optional[int] = Field(default=None, ge=1)


def _integer(mode: Optional[str]) -> bool:
    return settings.integer_mode if mode is None else mode == "int"


def _tensors(raw: Optional[Dict[str, List[float]]], program, integer: bool, seed: int):
    if raw is None:
        return random_inputs(program, seed, integer)
    tensors = {}
    for name, values in raw.items():
        try:
            decl = program.array(name)
        except KeyError:
            raise ProgramParseError(f"unknown array '{name}'", location=f"$.inputs.{name}")
        flat = np.asarray(values, dtype=np.int64 if integer else np.float64)
        if flat.size != decl.size:
            raise ProgramParseError(f"expected {decl.size} values, got {flat.size}", location=f"$.inputs.{name}")
        tensors[name] = flat.reshape(decl.shape)
    return tensors


@router.post("/analyze")
async def analyze(request: AnalyzeRequest):
    """
    Report coarse and fine violations of a program.

    Returns:
        Violation report
    """
    program = program_from_dict(request.program)
    return analyze_program(program).model_dump()


@router.post("/optimize")
async def optimize(
    request: OptimizeRequest,
    costs: CostTable = Depends(get_cost_table),
    device: ResourceVector = Depends(get_device),
):
    """
    Run the optimization flow.

    Returns:
        Run report plus the transformed program
    """
    program = program_from_dict(request.program)
    integer = _integer(request.numeric_mode)
    budget = device.model_copy(update=request.budget) if request.budget else device
    options = PipelineOptions(
        max_parallel=request.max_parallel,
        threshold=request.threshold,
        budget=budget,
        enable_downscale=request.enable_downscale,
        enable_upscale=request.enable_upscale,
        hbm_channels=request.hbm_channels,
        fifo_depths=request.fifo_depths,
        stop_after=request.stop_after,
        simulate=request.simulate,
        seed=request.seed,
        integer_mode=integer,
    )
    inputs = _tensors(request.inputs, program, integer, request.seed) if request.simulate else None
    artifacts = run_pipeline(program, options, costs, inputs)
    logger.info(f"Optimized '{program.name}' via API")
    return {
        "report": emit_report(artifacts),
        "program": program_to_dict(artifacts.transformed or artifacts.graph.as_program()),
    }


@router.post("/simulate")
async def simulate_program(request: SimulateRequest, costs: CostTable = Depends(get_cost_table)):
    """
    Simulate the program as written with one buffer kind on every edge.

    Returns:
        Simulation summary with a deadlock diagnosis or the reference check
    """
    program = program_from_dict(request.program)
    integer = _integer(request.numeric_mode)
    graph = as_written_graph(program, request.buffer, request.depth)
    source = graph.as_program()
    tensors = _tensors(request.inputs, source, integer, request.seed)
    result = simulate(graph, None, tensors, costs, max_cycles=request.max_cycles, integer_mode=integer)
    payload: Dict[str, Any] = result.summary()
    if result.outcome == "deadlock":
        payload["deadlock"] = detect_deadlock(result).model_dump()
    else:
        reference = reference_execute(source, tensors, integer)
        payload["reference_match"] = compare_with_reference(result, reference, "exact" if integer else "approx")
    return payload

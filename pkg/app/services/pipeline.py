"""
End-to-end optimization flow.

coarse elimination -> fine elimination -> buffer determination -> reuse
pass (with re-check) -> off-chip transfer plan -> DSE -> optional
simulation against the sequential reference. ``stop_after`` ends the flow
after any named stage.
"""
import time
from typing import Dict, List, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.models.analysis import ViolationReport
from app.models.graph import BufferSpec, DataflowGraph
from app.models.memory import TransferPlan
from app.models.program import Program
from app.models.schedule import CostTable, DseReport, ResourceVector, ScheduleMap, SchedulerConfig
from app.models.simulation import SimResult
from app.services.buffer_planner import apply_reuse_pass, assign_hbm_channels, determine_buffers, producer_blocks
from app.services.coarse_elimination import eliminate_coarse
from app.services.fine_elimination import eliminate_fine
from app.services.graph_builder import build_dataflow_graph
from app.services.interpreter import random_inputs, reference_execute
from app.services.loop_tree import strip_annotations
from app.services.scheduler import annotate_program, run_dse
from app.services.simulator import compare_with_reference, simulate
from app.services.violation_detector import analyze_graph
from app.utils.errors import CompilerError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

STAGES = ("coarse", "fine", "buffers", "reuse", "hbm", "dse", "simulate")


class PipelineOptions(BaseModel):
    """Knobs of one compiler run; ``None`` falls back to settings."""

    model_config = ConfigDict(frozen=True)

    max_parallel: Optional[int] = Field(default=None, ge=1)
    threshold: Optional[float] = Field(default=None, ge=1.0)
    budget: Optional[ResourceVector] = None
    enable_downscale: Optional[bool] = None
    enable_upscale: bool = True
    hbm_channels: Optional[int] = None
    fifo_depths: Dict[str, int] = Field(default_factory=dict)
    stop_after: Optional[str] = None
    simulate: bool = False
    seed: int = 0
    integer_mode: Optional[bool] = None

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig.from_settings(
            max_parallel=self.max_parallel,
            n_threshold=self.threshold,
            budget=self.budget,
            enable_downscale=self.enable_downscale,
            enable_upscale=self.enable_upscale,
        )


class PipelineArtifacts(BaseModel):
    """Everything a run produced, stage by stage."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    program: Program
    graph: DataflowGraph
    found: ViolationReport
    transformed: Optional[Program] = None
    stages: List[str] = Field(default_factory=list)
    transfer_plan: Optional[TransferPlan] = None
    schedules: ScheduleMap = Field(default_factory=dict)
    dse: Optional[DseReport] = None
    simulation: Optional[SimResult] = None
    reference_match: Optional[bool] = None
    wall_time_s: float = 0.0


def raw_program(program: Program) -> Program:
    """Program without loop annotations or partition factors (the flow chooses its own)."""
    nodes = tuple(node.model_copy(update={"body": strip_annotations(node.body)}) for node in program.nodes)
    arrays = tuple(decl.model_copy(update={"partition": ()}) for decl in program.arrays)
    return program.model_copy(update={"nodes": nodes, "arrays": arrays})


def analyze_program(program: Program) -> ViolationReport:
    """Violation report of the program as written, no transformation."""
    return analyze_graph(build_dataflow_graph(program))


def as_written_graph(program: Program, kind: str = "fifo", depth: Optional[int] = None) -> DataflowGraph:
    """
    Graph of the program as written, every edge given the same buffer kind.

    No violation is eliminated, which is what reproducing a broken design
    in simulation needs.
    """
    graph = build_dataflow_graph(raw_program(program))
    for edge in graph.edges:
        decl = graph.array(edge.array)
        if kind == "fifo":
            spec = BufferSpec(kind="fifo", depth=depth or settings.FIFO_DEFAULT_DEPTH, width_bits=decl.elem_bits)
        elif kind == "pingpong":
            block, _ = producer_blocks(graph.node(edge.producer), edge.array)
            spec = BufferSpec(kind="pingpong", block_elems=block, width_bits=decl.elem_bits)
        else:
            spec = BufferSpec(kind="sequential", block_elems=decl.size, width_bits=decl.elem_bits)
        graph = graph.replace_edge(edge.model_copy(update={"spec": spec}))
    return graph


def run_pipeline(
    program: Program,
    options: Optional[PipelineOptions] = None,
    costs: Optional[CostTable] = None,
    inputs: Optional[Mapping[str, np.ndarray]] = None,
) -> PipelineArtifacts:
    """
    Run the optimization flow.

    Args:
        program: Validated input program
        options: Run options
        costs: Operation cost table
        inputs: Input tensors for simulation (random from ``options.seed``
            when omitted)

    Returns:
        Artifacts of every stage that ran

    Raises:
        CompilerError: Any stage failure (subclass names the stage)
    """
    opts = options or PipelineOptions()
    table = costs or CostTable()
    if opts.stop_after is not None and opts.stop_after not in STAGES:
        raise CompilerError(f"unknown stage '{opts.stop_after}'", status_code=400, error_code="INVALID_OPTION")
    started = time.perf_counter()
    source = raw_program(program)
    graph = build_dataflow_graph(source)
    artifacts = PipelineArtifacts(program=source, graph=graph, found=analyze_graph(graph))
    logger.info(
        f"Pipeline on '{program.name}': {len(artifacts.found.coarse)} coarse, {len(artifacts.found.fine)} fine violation(s)"
    )

    def done(stage: str) -> bool:
        artifacts.stages.append(stage)
        artifacts.graph = graph
        logger.debug(f"Stage '{stage}' finished")
        return opts.stop_after == stage

    graph = eliminate_coarse(graph)
    if done("coarse"):
        return _finish(artifacts, started)
    graph = eliminate_fine(graph)
    if done("fine"):
        return _finish(artifacts, started)
    graph = determine_buffers(graph, opts.fifo_depths)
    if done("buffers"):
        return _finish(artifacts, started)
    graph = apply_reuse_pass(graph, opts.fifo_depths)
    if done("reuse"):
        return _finish(artifacts, started)
    artifacts.transfer_plan = assign_hbm_channels(graph, opts.hbm_channels)
    if done("hbm"):
        return _finish(artifacts, started)

    graph, artifacts.schedules, artifacts.dse = run_dse(graph, opts.scheduler_config(), table)
    artifacts.transformed = annotate_program(graph, artifacts.schedules)
    if done("dse") or not opts.simulate:
        return _finish(artifacts, started)

    integer = settings.integer_mode if opts.integer_mode is None else opts.integer_mode
    tensors = dict(inputs) if inputs is not None else random_inputs(source, opts.seed, integer)
    artifacts.simulation = simulate(graph, artifacts.schedules, tensors, table, integer_mode=integer)
    if artifacts.simulation.outcome == "completed":
        reference = reference_execute(source, tensors, integer)
        artifacts.reference_match = compare_with_reference(
            artifacts.simulation, reference, "exact" if integer else "approx"
        )
    done("simulate")
    return _finish(artifacts, started)


def _finish(artifacts: PipelineArtifacts, started: float) -> PipelineArtifacts:
    if artifacts.transformed is None:
        artifacts.transformed = artifacts.graph.as_program()
    artifacts.wall_time_s = time.perf_counter() - started
    logger.info(f"Pipeline stages {artifacts.stages} done in {artifacts.wall_time_s:.3f}s")
    return artifacts

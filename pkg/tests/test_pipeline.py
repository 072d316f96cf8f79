"""
End-to-end tests for the optimization flow and its reports.
"""
import json

import pytest

from app.services.buffer_planner import determine_buffers
from app.services.coarse_elimination import eliminate_coarse
from app.services.fine_elimination import eliminate_fine
from app.services.graph_builder import build_dataflow_graph
from app.services.interpreter import random_inputs, reference_execute
from app.services.parser import program_to_dict
from app.services.pipeline import PipelineOptions, analyze_program, raw_program, run_pipeline
from app.services.report_builder import build_report, emit_report, write_artifacts
from app.services.simulator import compare_with_reference, simulate
from app.services.violation_detector import compare_edge
from app.utils.errors import CompilerError
from tests import programs
from tests.programs import outputs_match


def test_stop_after_coarse():
    artifacts = run_pipeline(programs.spmc_fanout(), PipelineOptions(stop_after="coarse"))
    assert artifacts.stages == ["coarse"]
    assert artifacts.dse is None
    assert "node1_dup_a" in artifacts.transformed.node_names


def test_unknown_stage():
    with pytest.raises(CompilerError) as exc:
        run_pipeline(programs.copy_chain(), PipelineOptions(stop_after="nowhere"))
    assert exc.value.error_code == "INVALID_OPTION"


def test_mini_pipeline_end_to_end():
    """Test the pad/conv/relu flow: simulated output equals the reference."""
    source = programs.mini_pipeline()
    artifacts = run_pipeline(source, PipelineOptions(simulate=True, integer_mode=True, seed=3))

    assert artifacts.stages == ["coarse", "fine", "buffers", "reuse", "hbm", "dse", "simulate"]
    assert artifacts.simulation.outcome == "completed"
    assert artifacts.reference_match is True
    assert outputs_match(source, artifacts.transformed, seeds=range(3))


def test_two_streams_deepened_fifo_completes():
    artifacts = run_pipeline(programs.two_streams(), PipelineOptions(simulate=True, integer_mode=True))
    assert artifacts.graph.edge("a", "produce", "consume").spec.depth == 8
    assert artifacts.simulation.outcome == "completed"
    assert artifacts.reference_match is True


def test_double_reader_falls_back_to_sequential():
    """Test that an unfixable re-read still yields a correct design."""
    artifacts = run_pipeline(programs.double_reader(), PipelineOptions(simulate=True, integer_mode=True))
    edge = artifacts.graph.edge("t", "produce", "consume")
    assert edge.spec.kind == "sequential"
    assert artifacts.graph.fifo_percentage == 0.0
    assert artifacts.reference_match is True


@pytest.mark.parametrize("name", ["spmc_fanout", "mpsc_init_pad", "residual_block", "matmul_k_outer", "max_pool"])
def test_transformed_program_equivalent(name):
    source = programs.ALL_FIXTURES[name]()
    artifacts = run_pipeline(source, PipelineOptions(integer_mode=True))
    assert outputs_match(source, artifacts.transformed, seeds=range(3))


def test_raw_program_strips_partitions():
    source = programs.copy_chain()
    partitioned = source.model_copy(
        update={"arrays": tuple(d.model_copy(update={"partition": (2,)}) for d in source.arrays)}
    )
    assert all(d.partition == () for d in raw_program(partitioned).arrays)


def test_analyze_program_reports_without_transforming():
    report = analyze_program(programs.transposed_reader())
    assert [v.kind for v in report.fine] == ["order_mismatch"]
    assert report.coarse == []


def test_build_report_sections():
    artifacts = run_pipeline(programs.matmul_k_outer(), PipelineOptions(simulate=True, integer_mode=True))
    report = build_report(artifacts)

    assert report["program"] == "matmul_k_outer"
    assert report["violations"]["found"]["fine"] == {"count_mismatch": 1}
    assert report["violations"]["applied"]["fine.reduction_rewrite"] == 1
    assert [(b["array"], b["producer"], b["consumer"]) for b in report["buffers"]] == [("C", "matmul", "drain")]
    assert [s["stage"] for s in report["dse"]["stages"]] == ["PA", "UP", "DP", "final"]
    assert report["simulation"]["reference_match"] is True
    json.dumps(report, default=str)


def test_write_artifacts(tmp_path):
    """Test the emitted artifact set."""
    artifacts = run_pipeline(programs.copy_chain(), PipelineOptions(simulate=True, integer_mode=True))
    written = write_artifacts(artifacts, str(tmp_path / "out"))

    assert set(written) == {"program", "log", "buffers", "dse", "report", "simulation", "trace", "occupancy"}
    program = json.loads((tmp_path / "out" / "program.json").read_text())
    assert [n["name"] for n in program["nodes"]] == ["produce", "consume"]
    report = emit_report(artifacts, str(tmp_path / "report.json"))
    assert json.loads((tmp_path / "report.json").read_text())["fifo_percentage"] == report["fifo_percentage"]


@pytest.mark.parametrize("name", ["unfusable_writers", "entangled_buffer"])
def test_unresolved_coarse_array_still_compiles(name):
    """Test that an array coarse elimination gives up on is buffered, not streamed."""
    artifacts = run_pipeline(programs.ALL_FIXTURES[name](), PipelineOptions(simulate=True, integer_mode=True))

    edges = [e for e in artifacts.graph.edges if e.array == "buf"]
    assert edges
    assert all(e.spec.kind == "sequential" for e in edges)
    assert artifacts.graph.fifo_percentage == 0.0
    assert artifacts.stages[-1] == "simulate"
    assert artifacts.simulation.outcome == "completed"
    assert artifacts.reference_match is True


@pytest.mark.parametrize("name", sorted(programs.ALL_FIXTURES))
def test_clean_fifo_designs_complete(name):
    """Test that every design whose FIFOs the detector passes runs to the reference result."""
    source = programs.ALL_FIXTURES[name]()
    graph = determine_buffers(eliminate_fine(eliminate_coarse(build_dataflow_graph(source))))
    for edge in graph.edges:
        if edge.spec.kind == "fifo":
            assert compare_edge(graph, edge) == []

    inputs = random_inputs(source, seed=7, integer_mode=True)
    result = simulate(graph, None, inputs, integer_mode=True)
    assert result.outcome == "completed"
    assert compare_with_reference(result, reference_execute(source, inputs, integer_mode=True), "exact")


@pytest.mark.parametrize("name", sorted(programs.ALL_FIXTURES))
def test_pipeline_idempotent(name):
    """Test that optimizing an optimized program changes nothing."""
    once = run_pipeline(programs.ALL_FIXTURES[name](), PipelineOptions(integer_mode=True))
    twice = run_pipeline(once.transformed, PipelineOptions(integer_mode=True))

    assert program_to_dict(twice.transformed) == program_to_dict(once.transformed)
    assert [(e.key, e.spec.kind) for e in twice.graph.edges] == [(e.key, e.spec.kind) for e in once.graph.edges]
    assert twice.schedules == once.schedules

"""
Tests for the discrete-event simulator and deadlock diagnosis.
"""
import csv
import json

import pytest

from app.services.buffer_planner import determine_buffers
from app.services.fine_elimination import eliminate_fine
from app.services.graph_builder import build_dataflow_graph
from app.services.interpreter import random_inputs, reference_execute
from app.services.pipeline import as_written_graph
from app.services.simulator import (
    compare_with_reference,
    detect_deadlock,
    simulate,
    write_occupancy_csv,
    write_trace_jsonl,
)
from app.utils.errors import SimulationError, SimulationTimeoutError
from tests import programs


def _run(program, kind="fifo", depth=None, seed=0):
    graph = as_written_graph(program, kind, depth)
    inputs = random_inputs(program, seed=seed, integer_mode=True)
    return simulate(graph, None, inputs, integer_mode=True), inputs


@pytest.mark.parametrize("kind", ["fifo", "pingpong", "sequential"])
def test_copy_chain_matches_reference(kind):
    """Test that every buffer kind reproduces the reference outputs."""
    source = programs.copy_chain_2d()
    result, inputs = _run(source, kind)

    assert result.outcome == "completed"
    assert result.finished == ["produce", "consume"]
    reference = reference_execute(source, inputs, integer_mode=True)
    assert compare_with_reference(result, reference, "exact")


def test_buffer_kinds_order_total_cycles():
    """Test FIFO < ping-pong < sequential on a streaming chain."""
    source = programs.copy_chain_2d()
    fifo = _run(source, "fifo")[0].total_cycles
    pingpong = _run(source, "pingpong")[0].total_cycles
    sequential = _run(source, "sequential")[0].total_cycles

    assert sequential == 80
    assert fifo < pingpong < sequential


@pytest.mark.parametrize("build", [programs.three_stage_chain, programs.scale_relu_chain, programs.offset_chain])
def test_buffer_kinds_order_three_node_chains(build):
    source = build()
    cycles = {}
    for kind in ("fifo", "pingpong", "sequential"):
        result, inputs = _run(source, kind)
        assert result.outcome == "completed"
        assert compare_with_reference(result, reference_execute(source, inputs, integer_mode=True), "exact")
        cycles[kind] = result.total_cycles
    assert cycles["fifo"] < cycles["pingpong"] < cycles["sequential"]


def test_fifo_occupancy_bounded():
    result, _ = _run(programs.copy_chain_2d(), "fifo", depth=2)
    samples = result.channel_trace["t:produce->consume"]
    assert max(occupancy for _, occupancy in samples) <= 2


def test_starved_reader():
    """Test a consumer waiting for data the producer never sends."""
    result, _ = _run(programs.double_reader())
    assert result.outcome == "deadlock"

    info = detect_deadlock(result)
    assert info.classification == "starved_reader"
    assert info.starved == "consume"
    assert info.wait_for == [("consume", "produce", "t")]


def test_stuck_writer():
    result, _ = _run(programs.over_producer())
    assert result.outcome == "deadlock"

    info = detect_deadlock(result)
    assert info.classification == "stuck_writer"
    assert info.starved == "produce"


def test_cyclic_wait():
    """Test the classic two-stream deadlock at FIFO depth 2."""
    result, _ = _run(programs.two_streams(), depth=2)
    assert result.outcome == "deadlock"

    info = detect_deadlock(result)
    assert info.classification == "cyclic_wait"
    assert set(info.cycle_nodes) == {"produce", "consume"}


def test_two_streams_complete_with_deep_fifo():
    source = programs.two_streams()
    result, inputs = _run(source, depth=8)
    assert result.outcome == "completed"
    assert compare_with_reference(result, reference_execute(source, inputs, integer_mode=True), "exact")


def test_misordered_fifo_reads():
    """Test that an order mismatch completes but reads the wrong values."""
    source = programs.transposed_reader()
    result, inputs = _run(source)

    assert result.outcome == "completed"
    assert result.misordered_reads["t:produce->consume"] > 0
    assert not compare_with_reference(result, reference_execute(source, inputs, integer_mode=True), "exact")


def test_detect_deadlock_needs_deadlock():
    result, _ = _run(programs.copy_chain())
    with pytest.raises(SimulationError):
        detect_deadlock(result)


def test_compare_needs_completed_run():
    result, _ = _run(programs.double_reader())
    with pytest.raises(SimulationError):
        compare_with_reference(result, {})


def test_missing_buffer_spec():
    with pytest.raises(SimulationError):
        simulate(build_dataflow_graph(programs.copy_chain()), inputs={})


def test_max_cycles_timeout():
    graph = as_written_graph(programs.copy_chain_2d(), "sequential")
    inputs = random_inputs(programs.copy_chain_2d(), seed=0, integer_mode=True)
    with pytest.raises(SimulationTimeoutError):
        simulate(graph, None, inputs, max_cycles=5, integer_mode=True)


def test_trace_and_occupancy_files(tmp_path):
    result, _ = _run(programs.copy_chain())
    trace = tmp_path / "trace.jsonl"
    occupancy = tmp_path / "occupancy.csv"
    write_trace_jsonl(result, str(trace))
    write_occupancy_csv(result, str(occupancy))

    events = [json.loads(line) for line in trace.read_text().splitlines()]
    assert {"cycle", "node", "event"} <= set(events[0])
    assert events[0]["event"] == "start"

    with open(occupancy, newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["channel", "cycle", "occupancy"]
    assert len(rows) > 1


def test_count_mismatch_deadlocks_until_rewritten():
    """Test the accumulating producer: stuck as written, exact once its reduction is rewritten."""
    source = programs.matmul_k_outer()
    broken, _ = _run(source)
    assert broken.outcome == "deadlock"
    assert detect_deadlock(broken).classification == "stuck_writer"
    assert detect_deadlock(broken).starved == "matmul"

    graph = determine_buffers(eliminate_fine(build_dataflow_graph(source)))
    assert graph.edge("C", "matmul", "drain").spec.kind == "fifo"
    inputs = random_inputs(source, seed=4, integer_mode=True)
    result = simulate(graph, None, inputs, integer_mode=True)
    assert result.outcome == "completed"
    assert compare_with_reference(result, reference_execute(source, inputs, integer_mode=True), "exact")


def test_pingpong_producer_released_by_finished_consumer():
    """Test that blocks nobody reads do not hold the producer back."""
    source = programs.over_producer()
    result, inputs = _run(source, "pingpong")
    assert result.outcome == "completed"
    assert result.finished == ["produce", "consume"]
    assert compare_with_reference(result, reference_execute(source, inputs, integer_mode=True), "exact")


def test_sequential_shared_array_runs_in_program_order():
    """Test that writers of a shared sequential array take turns before the reader."""
    source = programs.unfusable_writers()
    result, inputs = _run(source, "sequential")
    assert result.outcome == "completed"
    resumed = {e.node: e.cycle for e in result.events if e.event == "resumed:buf"}
    assert resumed["second"] >= result.activity["first"][1]
    assert resumed["drain"] >= result.activity["second"][1]
    assert compare_with_reference(result, reference_execute(source, inputs, integer_mode=True), "exact")

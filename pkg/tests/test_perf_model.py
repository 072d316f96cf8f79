"""
Tests for the analytical latency and resource model.
"""
import json

from app.models.graph import BufferSpec
from app.models.program import LoopDirective
from app.models.schedule import CostTable, ScheduleAnnotation
from app.services.graph_builder import build_dataflow_graph
from app.services.perf_model import (
    NodeModel,
    analyze_node_timing,
    estimate_graph_latency,
    estimate_node_latency,
    estimate_resources,
    load_cost_table,
    memory_access_delay,
)
from app.services.pipeline import as_written_graph
from tests import programs


def test_pipelined_loop_latency():
    """Test trip * II + depth for a plain elementwise loop."""
    node = programs.elementwise_add().node("add")
    assert estimate_node_latency(node) == 103


def test_unroll_without_partition_is_port_bound():
    node = programs.elementwise_add().node("add")
    sched = ScheduleAnnotation(loops={"i": LoopDirective(unroll=4)})
    assert estimate_node_latency(node, sched) == 53


def test_unroll_with_partition():
    """Test that partitioning removes the port bottleneck of an unrolled loop."""
    node = programs.elementwise_add().node("add")
    sched = ScheduleAnnotation(loops={"i": LoopDirective(unroll=4)}, partitions={"x": (4,), "y": (4,)})
    assert estimate_node_latency(node, sched) == 28


def test_memory_access_delay():
    assert memory_access_delay(27, 2, 1) == 14
    assert memory_access_delay(8, 2, 4) == 1
    assert memory_access_delay(0) == 0


def test_reduction_recurrence_bounds_ii():
    """Test that a carried accumulation sets the II to the op latency."""
    timing = analyze_node_timing(programs.gemm_relu_chain().node("gemm"))
    region = timing.dominant
    assert region.key == "i/j/k"
    assert region.ii == 3
    assert region.ii_causes["recurrence"] == 3
    assert timing.latency == 288


def test_scalar_reduction_latency():
    timing = analyze_node_timing(programs.scalar_sum().node("sum"))
    assert timing.latency == 20
    assert timing.regions[0].ii_causes["recurrence"] == 1


def test_unrolled_dsp_usage():
    node = programs.vector_mac().node("vmac")
    model = NodeModel(node, ScheduleAnnotation(loops={"i": LoopDirective(unroll=8)}))
    assert model.resources.dsp == 8
    assert NodeModel(node).resources.dsp == 1


def test_buffer_bram_blocks():
    """Test BRAM blocks for ping-pong, sequential and FIFO storage."""
    graph = build_dataflow_graph(programs.copy_chain(1024))
    edge = graph.edges[0]

    pingpong = graph.replace_edge(edge.model_copy(update={"spec": BufferSpec(kind="pingpong", block_elems=1024)}))
    assert estimate_resources(pingpong).bram18k == 4

    sequential = graph.replace_edge(edge.model_copy(update={"spec": BufferSpec(kind="sequential", block_elems=1024)}))
    assert estimate_resources(sequential).bram18k == 2

    fifo = graph.replace_edge(edge.model_copy(update={"spec": BufferSpec(kind="fifo", depth=2)}))
    assert estimate_resources(fifo).bram18k == 1


def test_graph_latency_by_buffer_kind():
    """Test that FIFOs overlap nodes most and sequential buffers not at all."""
    source = programs.copy_chain_2d()
    fifo = estimate_graph_latency(as_written_graph(source, "fifo"))
    pingpong = estimate_graph_latency(as_written_graph(source, "pingpong"))
    sequential = estimate_graph_latency(as_written_graph(source, "sequential"))

    assert sequential == 80
    assert fifo < pingpong < sequential


def test_load_cost_table_override(tmp_path):
    path = tmp_path / "costs.json"
    path.write_text(json.dumps({"ops": {"mul": {"lat": 5, "dsp": 2}}, "ports_per_bank": 1}))
    table = load_cost_table(str(path))

    assert table.cost("mul").lat == 5
    assert table.cost("add").lat == 1
    assert table.ports_per_bank == 1


def test_default_cost_table():
    table = CostTable()
    assert table.cost("mac").lat == 3
    assert table.cost("div").lut == 400
    assert table.bram_block_bits == 18432

"""
Tests for buffer determination, the reuse re-check and HBM channel planning.
"""
import pytest

from app.services.buffer_planner import (
    apply_reuse_pass,
    assign_hbm_channels,
    blocks_monotone,
    determine_buffers,
    plan_double_buffer,
    producer_blocks,
    size_fifo_depths,
)
from app.services.coarse_elimination import eliminate_coarse
from app.services.fine_elimination import eliminate_fine
from app.services.graph_builder import build_dataflow_graph
from app.utils.errors import TransformError
from tests import programs


def _buffers(program, **kwargs):
    return determine_buffers(eliminate_fine(build_dataflow_graph(program)), **kwargs)


def test_clean_edges_become_fifos(mini_pipeline):
    """Test FIFO-first assignment after fine elimination."""
    graph = _buffers(mini_pipeline)
    assert [e.spec.kind for e in graph.edges] == ["fifo", "fifo"]
    assert all(e.spec.depth >= 2 for e in graph.edges)
    assert graph.fifo_percentage == 1.0
    assert all(e.producer_summary is not None and e.consumer_summary is not None for e in graph.edges)


def test_fifo_depth_sizing_two_streams():
    """Test that a stream consumed after its sibling is deepened to its length."""
    graph = _buffers(programs.two_streams())

    assert graph.edge("a", "produce", "consume").spec.depth == 8
    assert graph.edge("b", "produce", "consume").spec.depth == 2
    raised = [r for r in graph.log if r.action == "fifo_depth"]
    assert [(r.array, r.details["depth"]) for r in raised] == [("a", 8)]


def test_size_fifo_depths_respects_fixed():
    graph = eliminate_fine(build_dataflow_graph(programs.two_streams()))
    assert size_fifo_depths(graph, {"a": 2, "b": 2}, fixed={"a"}) == {"a": 2, "b": 2}


def test_fifo_depth_override():
    graph = _buffers(programs.two_streams(), fifo_depths={"a": 3})
    assert graph.edge("a", "produce", "consume").spec.depth == 3


def test_producer_blocks():
    """Test one block per top-level producer iteration."""
    source = programs.copy_chain_2d()
    block, block_of = producer_blocks(source.node("produce"), "t")
    assert block == 8
    assert block_of[(0, 7)] == 0
    assert block_of[(3, 0)] == 3
    assert blocks_monotone(source.node("consume"), "t", block_of)

    transposed = programs.transposed_reader()
    _, row_blocks = producer_blocks(transposed.node("produce"), "t")
    assert not blocks_monotone(transposed.node("consume"), "t", row_blocks)


def test_pingpong_for_monotone_downgrade():
    """Test that an over-producing edge gets a ping-pong buffer of one block."""
    graph = _buffers(programs.over_producer())
    edge = graph.edge("t", "produce", "consume")
    assert edge.status == "pingpong_only"
    assert edge.spec.kind == "pingpong"
    assert edge.spec.block_elems == 1
    assert graph.fifo_percentage == 0.0


def test_sequential_for_non_monotone_reads():
    graph = _buffers(programs.double_reader())
    edge = graph.edge("t", "produce", "consume")
    assert edge.status == "sequential"
    assert edge.reason == "non_monotone_blocks"
    assert edge.spec.kind == "sequential"
    assert edge.spec.block_elems == 8
    assert graph.log[-1].action == "sequential"


def test_plan_double_buffer_keeps_sequential():
    graph = _buffers(programs.double_reader())
    edge = graph.edge("t", "produce", "consume")
    planned, record = plan_double_buffer(graph, edge)
    assert planned.spec.kind == "sequential"
    assert record is None


def test_shared_array_gets_sequential_buffer():
    """Test that ping-pong-only edges of an array with two writers fall back to sequential."""
    graph = determine_buffers(eliminate_coarse(build_dataflow_graph(programs.unfusable_writers())))

    for producer in ("first", "second"):
        edge = graph.edge("buf", producer, "drain")
        assert edge.status == "sequential"
        assert edge.reason == "shared_array"
        assert edge.spec.kind == "sequential"
        assert edge.spec.block_elems == 4
    records = [r for r in graph.log if r.action == "sequential"]
    assert [r.details["previous"] for r in records] == ["fusion_infeasible", "fusion_infeasible"]


def test_reuse_pass_restores_fifo(mini_pipeline):
    """Test that a stencil edge left to ping-pong comes back as a FIFO."""
    graph = determine_buffers(eliminate_fine(build_dataflow_graph(mini_pipeline), enable_reuse=False))
    assert graph.edge("padded", "pad", "conv").spec.kind != "fifo"

    graph = apply_reuse_pass(graph)
    actions = [r.action for r in graph.log]
    assert "reuse_buffer" in actions
    assert "restore_fifo" in actions
    assert graph.edge("padded", "pad", "conv").spec.kind == "fifo"
    assert graph.fifo_percentage == 1.0


def test_reuse_pass_noop_without_stencils():
    graph = _buffers(programs.copy_chain())
    assert apply_reuse_pass(graph) is graph


def test_hbm_largest_first(mini_pipeline):
    """Test largest-first placement onto the lightest channel."""
    graph = build_dataflow_graph(mini_pipeline)
    plan = assign_hbm_channels(graph, 2)

    assert plan.assignment == {"x": 0, "out": 1, "weight": 0}
    assert plan.channel_bytes == [180, 144]
    assert plan.imbalance == 36
    weight = next(b for b in plan.bursts if b.array == "weight")
    assert (weight.channel, weight.offset, weight.length) == (0, 144, 36)


def test_hbm_single_channel(copy_chain):
    plan = assign_hbm_channels(build_dataflow_graph(copy_chain), 1)
    assert plan.assignment == {"x": 0, "y": 0}
    assert plan.channel_bytes == [64]


def test_hbm_rejects_zero_channels(copy_chain):
    with pytest.raises(TransformError) as exc:
        assign_hbm_channels(build_dataflow_graph(copy_chain), 0)
    assert exc.value.reason == "precondition"

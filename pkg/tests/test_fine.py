"""
Tests for fine-grained violation elimination: reduction rewrite, reuse
buffers, loop permutation and ping-pong downgrade.
"""
import pytest

from app.models.memory import DepthMap
from app.services.access_analysis import access_summary, enumerate_accesses
from app.services.fine_elimination import (
    apply_permutation,
    eliminate_fine,
    generate_permutation_map,
    rewrite_reduction,
)
from app.services.graph_builder import build_dataflow_graph
from app.services.reuse_buffer import generate_reuse_buffers, is_stencil_consumer
from app.services.violation_detector import detect_fine_violations
from app.utils.errors import TransformError
from tests import programs
from tests.programs import outputs_match


def test_rewrite_reduction_matmul():
    """Test that a k-outer matmul stores each output element once."""
    source = programs.matmul_k_outer()
    rewritten = rewrite_reduction(source.node("matmul"), "C")

    assert access_summary(rewritten, "C", "write").count == 16
    addresses = enumerate_accesses(rewritten, "C", "write")
    assert addresses == [(i, j) for i in range(4) for j in range(4)]


def test_rewrite_reduction_rejects_plain_copy():
    with pytest.raises(TransformError) as exc:
        rewrite_reduction(programs.copy_chain().node("produce"), "t")
    assert exc.value.reason == "rewrite_infeasible"


def test_eliminate_fine_matmul():
    source = programs.matmul_k_outer()
    graph = eliminate_fine(build_dataflow_graph(source))

    record = graph.log[-1]
    assert record.action == "reduction_rewrite"
    assert record.counts_before == (80, 16)
    assert record.counts_after == (16, 16)
    assert "matmul_C_acc" in graph.as_program().array_names
    assert detect_fine_violations(graph) == []
    assert outputs_match(source, graph.as_program())


def test_eliminate_fine_max_pool():
    """Test that the max identity seeds the pooled accumulator."""
    source = programs.max_pool()
    graph = eliminate_fine(build_dataflow_graph(source))

    record = graph.log[-1]
    assert record.action == "reduction_rewrite"
    assert record.counts_before == (20, 4)
    assert record.counts_after == (4, 4)
    assert "pool_pooled_acc" in graph.as_program().array_names
    assert outputs_match(source, graph.as_program())


def test_reuse_buffer_plan(mini_pipeline):
    conv = mini_pipeline.node("conv")
    assert is_stencil_consumer(conv, "padded", (8, 8))

    rewritten, plan = generate_reuse_buffers(conv, "padded", (8, 8))
    assert plan.kernel == (3, 3)
    assert plan.reads_before == 324
    assert plan.reads_after == 64
    assert plan.line_buffer == "conv_padded_lb"
    assert plan.line_buffer_shape == (3, 8)
    assert plan.window_buffer == "conv_padded_wb"
    assert plan.window_buffer_shape == (3, 3)
    assert plan.rewritten_regions == ("line_update", "window_shift", "compute")
    assert access_summary(rewritten, "padded", "read").count == 64


def test_non_stencil_consumer():
    assert not is_stencil_consumer(programs.double_reader().node("consume"), "t", (8,))


def test_eliminate_fine_mini_pipeline(mini_pipeline):
    """Test that the conv consumer reads every padded element once after reuse."""
    graph = eliminate_fine(build_dataflow_graph(mini_pipeline))

    reuse = [r for r in graph.log if r.action == "reuse_buffer"]
    assert len(reuse) == 1
    assert reuse[0].edge == ("padded", "pad", "conv")
    assert reuse[0].counts_before == (64, 324)
    assert reuse[0].counts_after == (64, 64)
    assert all(e.status == "clean" for e in graph.edges)
    assert detect_fine_violations(graph) == []
    assert outputs_match(mini_pipeline, graph.as_program(), seeds=range(3))


def test_permutation_map_transposed():
    source = programs.transposed_reader()
    depth_map = generate_permutation_map(source.node("produce"), source.node("consume"), "t")
    assert depth_map.pairs == {0: 1, 1: 0}
    assert depth_map.tiling_applied == ()


def test_apply_permutation():
    """Test that swapping depths 0 and 1 yields row-major reads."""
    consumer = programs.transposed_reader().node("consume")
    permuted = apply_permutation(consumer, DepthMap(pairs={0: 1, 1: 0}))
    assert enumerate_accesses(permuted, "t", "read")[:3] == [(0, 0), (0, 1), (0, 2)]
    assert apply_permutation(consumer, DepthMap(pairs={0: 0, 1: 1})) is consumer


def test_apply_permutation_rejects_bad_map():
    consumer = programs.transposed_reader().node("consume")
    with pytest.raises(TransformError) as exc:
        apply_permutation(consumer, DepthMap(pairs={0: 5, 5: 0}))
    assert exc.value.reason == "map_infeasible"


def test_eliminate_fine_transposed():
    source = programs.transposed_reader()
    graph = eliminate_fine(build_dataflow_graph(source))

    record = graph.log[-1]
    assert record.action == "permutation"
    assert record.depth_map == {0: 1, 1: 0}
    assert detect_fine_violations(graph) == []
    assert outputs_match(source, graph.as_program())


def test_double_reader_downgraded():
    """Test that a non-stencil re-read falls back to a ping-pong buffer."""
    graph = eliminate_fine(build_dataflow_graph(programs.double_reader()))

    edge = graph.edge("t", "produce", "consume")
    assert edge.status == "pingpong_only"
    assert edge.reason == "reuse_infeasible"
    assert graph.log[-1].action == "downgrade"


def test_reuse_disabled_downgrades(mini_pipeline):
    graph = eliminate_fine(build_dataflow_graph(mini_pipeline), enable_reuse=False)
    assert graph.edge("padded", "pad", "conv").status == "pingpong_only"


def test_clean_graph_untouched():
    graph = build_dataflow_graph(programs.copy_chain())
    assert eliminate_fine(graph) is graph

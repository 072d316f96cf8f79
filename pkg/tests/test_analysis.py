"""
Tests for graph construction, access analysis and violation detection.
"""
import pytest

from app.services.access_analysis import (
    access_summary,
    classify_loops,
    enumerate_accesses,
    has_loop_carried_dependence,
)
from app.services.graph_builder import build_dataflow_graph, topological_order
from app.services.ir_builder import array, copy_nest, load, loop, node, program, store
from app.services.violation_detector import (
    analyze_graph,
    compare_edge,
    detect_coarse_violations,
    detect_fine_violations,
    symbolic_order_key,
)
from app.utils.errors import AnalysisError, CyclicDataflowError
from tests import programs


def test_mini_pipeline_edges(mini_pipeline):
    """Test that the motivating pipeline has one edge per connection."""
    graph = build_dataflow_graph(mini_pipeline)
    assert [e.key for e in graph.edges] == [("padded", "pad", "conv"), ("conv_out", "conv", "relu")]
    assert topological_order(graph) == ["pad", "conv", "relu"]


def test_private_arrays_make_no_edges():
    graph = build_dataflow_graph(programs.scalar_sum())
    assert graph.edges == ()
    assert graph.array_index == {}


def test_array_index_spmc():
    graph = build_dataflow_graph(programs.spmc_fanout())
    assert graph.array_index["a"] == (("node1",), ("node2", "node3"))


def test_cyclic_dataflow_rejected():
    """Test that a feedback loop through internal arrays is an error."""
    looped = program(
        "looped",
        [array("a", 4), array("b", 4)],
        [
            node("n1", loop("i", 4, load("v", "b", "i"), store("a", ["i"], "v"))),
            node("n2", loop("i", 4, load("v", "a", "i"), store("b", ["i"], "v"))),
        ],
    )
    with pytest.raises(CyclicDataflowError) as exc:
        build_dataflow_graph(looped)
    assert exc.value.error_code == "CYCLIC_DATAFLOW"


def test_access_summary_symbolic_count(mini_pipeline):
    conv = mini_pipeline.node("conv")
    summary = access_summary(conv, "padded", "read")
    assert summary.count == 324
    assert summary.dim_to_depth == (0, 1)
    assert summary.order_signature == (("h", 6), ("w", 6), ("kh", 3), ("kw", 3))


def test_access_summary_guarded():
    """Test that gated accesses are counted over the gated domain."""
    consumer = programs.guarded_copy().node("consume")
    summary = access_summary(consumer, "t", "read")
    assert summary.guarded
    assert summary.count == 8


def test_pad_write_count_matches_enumeration(mini_pipeline):
    pad = mini_pipeline.node("pad")
    addresses = enumerate_accesses(pad, "padded", "write")
    assert access_summary(pad, "padded", "write").count == len(addresses) == 64
    assert addresses[:3] == [(0, 0), (0, 1), (0, 2)]


def test_access_summary_requires_access(mini_pipeline):
    with pytest.raises(AnalysisError):
        access_summary(mini_pipeline.node("pad"), "out", "write")


def test_loop_carried_dependence():
    """Test dependence detection at a given depth."""
    scan = programs.prefix_sum().node("scan")
    assert has_loop_carried_dependence(scan, 0)
    assert has_loop_carried_dependence(scan, 0, ignore_reductions=True)

    total = programs.scalar_sum().node("sum")
    assert has_loop_carried_dependence(total, "i")
    assert not has_loop_carried_dependence(total, "i", ignore_reductions=True)

    copy = copy_nest("c", "x", "y", [4, 4])
    assert not has_loop_carried_dependence(copy, 0)
    assert not has_loop_carried_dependence(copy, 1)


def test_depth_out_of_range():
    with pytest.raises(AnalysisError):
        has_loop_carried_dependence(copy_nest("c", "x", "y", [4]), 3)


def test_classify_loops():
    """Test free / fifo_index / outer_unsafe labels."""
    assert classify_loops(programs.prefix_sum().node("scan"), []) == {"i": "outer_unsafe"}
    assert classify_loops(programs.scalar_sum().node("sum"), []) == {"i": "free"}
    copy = copy_nest("c", "t", "y", [4, 8], ["i", "j"])
    assert classify_loops(copy, ["t"]) == {"i": "fifo_index", "i/j": "fifo_index"}
    assert classify_loops(copy, []) == {"i": "free", "i/j": "free"}


def test_coarse_detection_patterns():
    """Test SPMC, MPSC and MPMC recognition."""
    spmc = detect_coarse_violations(build_dataflow_graph(programs.spmc_fanout()))
    assert [(v.array, v.pattern) for v in spmc] == [("a", "SPMC")]

    mpsc = detect_coarse_violations(build_dataflow_graph(programs.mpsc_init_pad()))
    assert [(v.array, v.pattern, v.writers) for v in mpsc] == [("buf", "MPSC", ("init", "fill"))]

    mpmc = detect_coarse_violations(build_dataflow_graph(programs.mpmc_reused_buffer()))
    assert [(v.array, v.pattern) for v in mpmc] == [("buffer", "MPMC")]


def test_fine_count_mismatch():
    graph = build_dataflow_graph(programs.double_reader())
    found = detect_fine_violations(graph)
    count = [v for v in found if v.kind == "count_mismatch"]
    assert len(count) == 1
    assert count[0].edge == ("t", "produce", "consume")
    assert count[0].detail == (8, 16)


def test_fine_order_mismatch():
    graph = build_dataflow_graph(programs.transposed_reader())
    found = detect_fine_violations(graph)
    assert [v.kind for v in found] == ["order_mismatch"]
    assert found[0].confirmed


def test_stencil_consumer_count_mismatch(mini_pipeline):
    graph = build_dataflow_graph(mini_pipeline)
    found = compare_edge(graph, graph.edge("padded", "pad", "conv"))
    assert "count_mismatch" in {v.kind for v in found}
    assert compare_edge(graph, graph.edge("conv_out", "conv", "relu")) == []


def test_pool_count_mismatch():
    """Test that an accumulating producer writes more often than it is read."""
    graph = build_dataflow_graph(programs.max_pool())
    found = detect_fine_violations(graph)
    count = [v for v in found if v.kind == "count_mismatch"]
    assert count[0].detail == (20, 4)


def test_symbolic_verdict_over_cap():
    """Test that an edge over the enumeration cap gets an unconfirmed verdict."""
    graph = build_dataflow_graph(programs.transposed_reader())
    found = compare_edge(graph, graph.edges[0], cap=1)
    assert [v.kind for v in found] == ["order_mismatch"]
    assert not found[0].confirmed


def test_clean_edges_have_no_findings():
    for build in (programs.copy_chain, programs.copy_chain_2d, programs.gemm_relu_chain, programs.unbalanced_chain):
        assert detect_fine_violations(build_dataflow_graph(build())) == []


def test_analyze_graph_reports_coarse_first():
    report = analyze_graph(build_dataflow_graph(programs.spmc_fanout()))
    assert len(report.coarse) == 1
    assert report.fine == []
    assert not report.clean


@pytest.mark.parametrize("name", sorted(programs.ALL_FIXTURES))
def test_symbolic_verdicts_match_enumeration(name):
    """Test that closed-form counts and order keys agree with the enumerated sequences."""
    graph = build_dataflow_graph(programs.ALL_FIXTURES[name]())
    for edge in graph.edges:
        producer, consumer = graph.node(edge.producer), graph.node(edge.consumer)
        writes = enumerate_accesses(producer, edge.array, "write")
        reads = enumerate_accesses(consumer, edge.array, "read")
        assert access_summary(producer, edge.array, "write").count == len(writes)
        assert access_summary(consumer, edge.array, "read").count == len(reads)

        w_key = symbolic_order_key(producer, edge.array, "write")
        r_key = symbolic_order_key(consumer, edge.array, "read")
        if w_key is None or r_key is None or len(writes) != len(reads):
            continue
        enumerated = {v.kind for v in compare_edge(graph, edge)}
        symbolic = {v.kind for v in compare_edge(graph, edge, cap=0)}
        assert symbolic == enumerated
        assert (w_key != r_key) == (writes != reads)

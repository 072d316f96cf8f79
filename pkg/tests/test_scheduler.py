"""
Tests for design-space exploration and inter-task propagation.
"""
import pytest

from app.models.program import LoopDirective
from app.models.schedule import NodeSchedule, ResourceVector, ScheduleAnnotation, SchedulerConfig
from app.services.buffer_planner import determine_buffers
from app.services.fine_elimination import eliminate_fine
from app.services.graph_builder import build_dataflow_graph
from app.services.pipeline import PipelineOptions, run_pipeline
from app.services.scheduler import (
    annotate_program,
    initial_allocation,
    proportional_degrees,
    propagate_inter_task,
    run_dse,
    upscale,
)
from app.utils.errors import BudgetExceededError
from tests import programs


def _buffered(program):
    return determine_buffers(eliminate_fine(build_dataflow_graph(program)))


def test_proportional_degrees():
    assert proportional_degrees({"a": 1000, "b": 4000, "c": 2000}) == {"a": 1, "b": 4, "c": 2}
    assert proportional_degrees({"a": 0, "b": 0}) == {"a": 1, "b": 1}


def test_initial_allocation_balanced_chain(scheduler_config):
    """Test that equal nodes scale together up to the trip count."""
    graph = _buffered(programs.copy_chain())
    sm = initial_allocation(graph, scheduler_config)
    assert {name: s.degree for name, s in sm.items()} == {"produce": 8, "consume": 8}
    assert sm["produce"].annotation.loops["i0"].unroll == 8


def test_max_parallel_caps_degrees():
    graph = _buffered(programs.unbalanced_chain())
    cfg = SchedulerConfig.from_settings(max_parallel=1)
    _, sm, report = run_dse(graph, cfg)
    assert all(s.degree == 1 for s in sm.values())
    assert all(d == 1 for d in report.snapshot("final").degrees.values())


def test_budget_too_small():
    """Test that a design over budget at degree 1 is rejected."""
    graph = _buffered(programs.copy_chain())
    cfg = SchedulerConfig.from_settings(budget=ResourceVector(dsp=0, bram18k=0, lut=0, ff=0))
    with pytest.raises(BudgetExceededError) as exc:
        initial_allocation(graph, cfg)
    assert exc.value.exit_code == 4
    assert exc.value.error_code == "BUDGET_EXCEEDED"


def test_upscale_never_slows_the_graph(scheduler_config):
    graph = _buffered(programs.unbalanced_chain())
    _, _, report = run_dse(graph, scheduler_config)

    pa, up = report.snapshot("PA"), report.snapshot("UP")
    assert up.latency <= pa.latency
    assert [s.stage for s in report.snapshots] == ["PA", "UP", "DP", "final"]


def test_downscale_saves_resources(scheduler_config):
    """Test that DP never costs more than UP and stays within n times its latency."""
    graph = _buffered(programs.unbalanced_chain())
    _, _, report = run_dse(graph, scheduler_config)

    up, dp = report.snapshot("UP"), report.snapshot("DP")
    assert dp.resources.fits(up.resources)
    assert dp.latency <= scheduler_config.n_threshold * up.latency


def test_downscale_disabled():
    graph = _buffered(programs.unbalanced_chain())
    _, _, report = run_dse(graph, SchedulerConfig.from_settings(enable_downscale=False))
    assert report.snapshot("DP") is None


def test_upscale_balanced_graph_is_fixpoint(scheduler_config):
    graph = _buffered(programs.copy_chain())
    sm = initial_allocation(graph, scheduler_config)
    assert upscale(graph, sm, scheduler_config) == sm


def test_propagation_keeps_matching_streams(scheduler_config):
    """Test that equally unrolled endpoints keep their FIFO."""
    graph = _buffered(programs.copy_chain())
    sm = initial_allocation(graph, scheduler_config)
    propagated, _ = propagate_inter_task(graph, sm, scheduler_config)
    assert propagated.fifo_percentage == 1.0
    assert not [r for r in propagated.log if r.action == "downgrade"]


def test_run_dse_copy_chain_all_fifo(scheduler_config):
    graph = _buffered(programs.copy_chain())
    final, sm, report = run_dse(graph, scheduler_config)
    assert report.fifo_percentage == 1.0
    assert report.downgrades == []
    assert set(sm) == {"produce", "consume"}


def test_annotate_program(scheduler_config):
    """Test that schedules land in loop annotations and array partitions."""
    graph = _buffered(programs.copy_chain())
    final, sm, _ = run_dse(graph, scheduler_config)
    annotated = annotate_program(final, sm)

    loop = annotated.node("produce").body[0]
    assert loop.annotation is not None
    assert loop.annotation.unroll == sm["produce"].annotation.loops["i0"].unroll
    assert annotated.array("x").partition == sm["produce"].annotation.partitions["x"]


def test_empty_graph_dse():
    graph = build_dataflow_graph(programs.vector_mac())
    final, sm, report = run_dse(graph)
    assert set(sm) == {"vmac"}
    assert report.fifo_percentage == 1.0


def _unrolled(factor):
    loops = {"i": LoopDirective(unroll=factor, pipeline=True)} if factor > 1 else {"i": LoopDirective(pipeline=True)}
    return NodeSchedule(degree=factor, annotation=ScheduleAnnotation(loops=loops))


def test_propagation_conflict_downgrades_one_edge(scheduler_config):
    """Test that B and D demanding different widths at C only costs the C -> D FIFO."""
    graph = _buffered(programs.conflict_chain())
    sm = {"stage_a": _unrolled(2), "stage_b": _unrolled(2), "stage_c": _unrolled(1), "stage_d": _unrolled(4)}
    propagated, aligned = propagate_inter_task(graph, sm, scheduler_config)

    downgrades = [r for r in propagated.log if r.action == "downgrade"]
    assert len(downgrades) == 1
    assert downgrades[0].edge == ("cd", "stage_c", "stage_d")
    assert downgrades[0].reason == "schedule_conflict"
    assert downgrades[0].details["node"] == "stage_c"
    assert propagated.edge("ab", "stage_a", "stage_b").spec.kind == "fifo"
    assert propagated.edge("bc", "stage_b", "stage_c").spec.kind == "fifo"
    assert propagated.edge("cd", "stage_c", "stage_d").spec.kind == "pingpong"
    assert aligned["stage_c"].annotation.loops["i"].unroll == 2
    assert propagated.fifo_percentage == pytest.approx(2 / 3)


@pytest.mark.parametrize(
    "name",
    ["copy_chain", "copy_chain_2d", "mpmc_reused_buffer", "transposed_reader", "vector_mac", "elementwise_add"],
)
def test_conflict_free_corpus_all_fifo(name):
    artifacts = run_pipeline(programs.ALL_FIXTURES[name](), PipelineOptions(stop_after="dse"))
    assert artifacts.dse.fifo_percentage == 1.0
    assert artifacts.dse.downgrades == []


@pytest.mark.parametrize("build", [programs.unbalanced_chain, programs.deep_chain])
def test_dse_stage_properties(build, scheduler_config):
    """Test UP never slows, DP never costs more and stays within n times UP, budget holds."""
    _, _, report = run_dse(_buffered(build()), scheduler_config)

    pa, up, dp, final = (report.snapshot(stage) for stage in ("PA", "UP", "DP", "final"))
    assert up.latency <= pa.latency
    assert dp.resources.fits(up.resources)
    assert dp.latency <= 2.0 * up.latency
    assert final.resources.fits(scheduler_config.budget)
    assert report.wall_time_s < 10

"""
Resource-aware, bottleneck-centric design-space exploration.

Stage one (PA) hands out parallelism degrees in proportion to node
latency; stage two (UP) multiplies the degree of bottleneck nodes; stage
three (DP) takes parallelism back from nodes much faster than the slowest
one. A degree is realized as unroll factors on the loops around the
node's dominant pipelined region plus matching array partitions.
Inter-task propagation then makes both ends of every FIFO agree on the
stream width, downgrading the edge when they cannot.
"""
import math
import time
from typing import Dict, List, Optional, Set, Tuple

from app.models.analysis import LoopClasses
from app.models.graph import BufferEdge, DataflowGraph, TransformRecord
from app.models.program import ArrayDecl, LoopDirective, Program, TaskNode
from app.models.schedule import (
    CostTable,
    DseReport,
    NodeSchedule,
    ResourceVector,
    ScheduleAnnotation,
    ScheduleMap,
    SchedulerConfig,
    StageSnapshot,
)
from app.services.access_analysis import classify_loops
from app.services.buffer_planner import plan_double_buffer
from app.services.graph_builder import topological_edges, topological_order
from app.services.loop_tree import access_sites, loop_map, map_loops
from app.services.perf_model import NodeModel, estimate_graph_latency, estimate_resources, stream_profile
from app.services.violation_detector import compare_edge
from app.utils.errors import BudgetExceededError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

PASS = "dse"


def proportional_degrees(latencies: Dict[str, int]) -> Dict[str, int]:
    """Degrees proportional to latency, the fastest node getting 1."""
    positive = [lat for lat in latencies.values() if lat > 0]
    if not positive:
        return {name: 1 for name in latencies}
    floor = min(positive)
    return {name: max(1, round(lat / floor)) for name, lat in latencies.items()}


def _largest_divisor(n: int, limit: int) -> int:
    for candidate in range(min(n, limit), 0, -1):
        if n % candidate == 0:
            return candidate
    return 1


def _fifo_arrays(graph: DataflowGraph) -> Set[str]:
    return {e.array for e in graph.edges if e.spec is not None and e.spec.kind == "fifo"}


def _ancestors(key: str) -> List[str]:
    parts = key.split("/")
    return ["/".join(parts[:i]) for i in range(1, len(parts))]


def _dim_drivers(node: TaskNode, array: str, modes: Tuple[str, ...] = ("write", "read")) -> Dict[int, List[str]]:
    """Per dimension of ``array``, keys of the non-trivial loops driving it (outermost first)."""
    drivers: Dict[int, List[str]] = {}
    sites = [site for mode in modes for site in access_sites(node, array, mode)]
    for site in sites:
        for key, loop in zip(site.keys, site.loops):
            if loop.trip_count <= 1:
                continue
            for d, expr in enumerate(site.stmt.index):
                if expr.coeff(loop.var) != 0 and key not in drivers.setdefault(d, []):
                    drivers[d].append(key)
    return drivers


class _Explorer:
    """Shared context of one exploration: classes, realization chains and estimates."""

    def __init__(self, graph: DataflowGraph, cfg: Optional[SchedulerConfig] = None, costs: Optional[CostTable] = None):
        self.graph = graph
        self.cfg = cfg or SchedulerConfig.from_settings()
        self.costs = costs or CostTable()
        self.arrays: Dict[str, ArrayDecl] = {decl.name: decl for decl in graph.arrays}
        self.order = topological_order(graph) if graph.nodes else []
        self.budget_bound = False
        self._refresh()

    def _refresh(self) -> None:
        fifo = _fifo_arrays(self.graph)
        self.classes: Dict[str, LoopClasses] = {}
        self.chains: Dict[str, List[str]] = {}
        self.heads: Dict[str, Optional[str]] = {}
        for node in self.graph.nodes:
            touched = {a for a in fifo if access_sites(node, a, "read") or access_sites(node, a, "write")}
            self.classes[node.name] = classify_loops(node, touched)
            self.chains[node.name] = self._eligible(node)
        base = {node.name: self.realize(node.name, 1) for node in self.graph.nodes}
        self.profile = stream_profile(self.graph, base, self.costs) if self.graph.edges else {}

    def _eligible(self, node: TaskNode) -> List[str]:
        """Loops a degree may unroll: free innermost-first, then fifo_index innermost-first."""
        timing = NodeModel(node, None, self.costs, self.arrays, self._streams(node.name)).timing()
        region = timing.dominant
        self.heads[node.name] = region.key if region is not None else None
        if region is None:
            return []
        loops = loop_map(node)
        chain = [k for k in _ancestors(region.key) + list(region.chain) if loops[k].trip_count > 1]
        labels = self.classes[node.name]
        free = [k for k in reversed(chain) if labels.get(k) == "free"]
        fifo_index = [k for k in reversed(chain) if labels.get(k) == "fifo_index"]
        return free + fifo_index

    def _streams(self, name: str) -> Set[str]:
        return {e.array for e in self.graph.edges_of(name) if e.spec is not None and e.spec.kind == "fifo"}

    def realize(self, name: str, degree: int, unrolls: Optional[Dict[str, int]] = None) -> NodeSchedule:
        """
        Turn a degree into loop directives and array partitions.

        Each eligible loop takes the largest divisor of its trip count that
        still fits the remaining degree. ``unrolls`` bypasses the greedy
        choice with explicit factors.
        """
        node = self.graph.node(name)
        loops = loop_map(node)
        if unrolls is None:
            unrolls = {}
            remaining = degree
            for key in self.chains.get(name, []):
                if remaining <= 1:
                    break
                factor = _largest_divisor(loops[key].trip_count, remaining)
                if factor > 1:
                    unrolls[key] = factor
                    remaining //= factor
        head = self.heads.get(name)
        directives: Dict[str, LoopDirective] = {}
        for key, factor in unrolls.items():
            if factor > 1:
                directives[key] = LoopDirective(unroll=factor, pipeline=key == head)
        if head is not None and head not in directives:
            directives[head] = LoopDirective(pipeline=True)
        achieved = 1
        for factor in unrolls.values():
            achieved *= factor
        annotation = ScheduleAnnotation(loops=directives, partitions=self._partitions(node, unrolls))
        return NodeSchedule(degree=achieved, annotation=annotation)

    def _partitions(self, node: TaskNode, unrolls: Dict[str, int]) -> Dict[str, Tuple[int, ...]]:
        fifo = self._streams(node.name)
        partitions: Dict[str, Tuple[int, ...]] = {}
        for array, decl in self.arrays.items():
            if array in fifo:
                continue
            drivers = _dim_drivers(node, array)
            factors = []
            for d, extent in enumerate(decl.shape):
                factor = 1
                for key in drivers.get(d, []):
                    factor *= unrolls.get(key, 1)
                factors.append(min(factor, extent))
            if any(f > 1 for f in factors):
                partitions[array] = tuple(factors)
        return partitions

    def unrolls_of(self, schedule: NodeSchedule) -> Dict[str, int]:
        return {k: d.unroll for k, d in schedule.annotation.loops.items() if d.unroll > 1}

    # estimates

    def node_latency(self, name: str, schedule: NodeSchedule) -> int:
        return NodeModel(self.graph.node(name), schedule.annotation, self.costs, self.arrays, self._streams(name)).latency

    def latencies(self, sm: ScheduleMap) -> Dict[str, int]:
        return {name: self.node_latency(name, sm[name]) for name in self.order}

    def graph_latency(self, sm: ScheduleMap) -> int:
        return estimate_graph_latency(self.graph, sm, self.costs, self.profile)

    def resources(self, sm: ScheduleMap) -> ResourceVector:
        return estimate_resources(self.graph, sm, self.costs)

    def fits(self, sm: ScheduleMap) -> bool:
        return self.resources(sm).fits(self.cfg.budget)

    def snapshot(self, stage: str, sm: ScheduleMap) -> StageSnapshot:
        snap = StageSnapshot(
            stage=stage,
            latency=self.graph_latency(sm),
            resources=self.resources(sm),
            degrees={name: sm[name].degree for name in self.order},
        )
        logger.info(f"DSE {stage}: latency {snap.latency}, resources {snap.resources.model_dump()}, degrees {snap.degrees}")
        return snap

    # stages

    def initial_allocation(self) -> ScheduleMap:
        base = {name: self.realize(name, 1) for name in self.order}
        required = self.resources(base)
        if not required.fits(self.cfg.budget):
            raise BudgetExceededError(required=required.model_dump(), budget=self.cfg.budget.model_dump())
        ratios = proportional_degrees(self.latencies(base))
        best = base
        for scale in range(1, self.cfg.max_parallel + 1):
            target = {name: ratios[name] * scale for name in self.order}
            if any(d > self.cfg.max_parallel for d in target.values()):
                logger.debug(f"PA scaling stops at x{scale}: max_parallel {self.cfg.max_parallel} binds")
                break
            candidate = {name: self.realize(name, target[name]) for name in self.order}
            if not self.fits(candidate):
                self.budget_bound = True
                logger.warning(f"PA scaling stops at x{scale}: resource budget binds")
                break
            if scale > 1 and all(candidate[n].degree == best[n].degree for n in self.order):
                break
            best = candidate
        return best

    def upscale(self, sm: ScheduleMap) -> ScheduleMap:
        factor = math.ceil(self.cfg.n_threshold)
        for round_no in range(1, self.cfg.max_up_iters + 1):
            latencies = self.latencies(sm)
            positive = [lat for lat in latencies.values() if lat > 0]
            if not positive:
                return sm
            floor = min(positive)
            changed = False
            for name in self.order:
                if latencies[name] < self.cfg.n_threshold * floor:
                    continue
                current = sm[name].degree
                wanted = min(factor * current, self.cfg.max_parallel)
                if wanted <= current:
                    continue
                candidate = self.realize(name, wanted)
                if candidate.degree <= current:
                    continue
                trial = {**sm, name: candidate}
                if not self.fits(trial):
                    self.budget_bound = True
                    logger.warning(f"UP: '{name}' stays at degree {current} (budget)")
                    continue
                if self.graph_latency(trial) > self.graph_latency(sm):
                    continue
                logger.info(f"UP round {round_no}: '{name}' degree {current} -> {candidate.degree}")
                sm = trial
                changed = True
            if not changed:
                logger.debug(f"UP reached a fixpoint after {round_no} round(s)")
                break
        return sm

    def downscale(self, sm: ScheduleMap) -> ScheduleMap:
        latencies = self.latencies(sm)
        if not latencies:
            return sm
        longest = max(latencies.values())
        bottleneck = next(name for name in self.order if latencies[name] == longest)
        reference = self.graph_latency(sm)
        step = math.ceil(self.cfg.n_threshold)
        for name in self.order:
            if name == bottleneck:
                continue
            while sm[name].degree > 1 and latencies[name] * self.cfg.n_threshold <= longest:
                candidate = self.realize(name, max(1, sm[name].degree // step))
                if candidate.degree >= sm[name].degree:
                    break
                lowered = self.node_latency(name, candidate)
                trial = {**sm, name: candidate}
                if lowered > longest or self.graph_latency(trial) > self.cfg.n_threshold * reference:
                    break
                if not self.resources(trial).fits(self.resources(sm)):
                    break
                logger.info(f"DP: '{name}' degree {sm[name].degree} -> {candidate.degree}")
                sm = trial
                latencies[name] = lowered
        return sm

    def propagate(self, sm: ScheduleMap) -> Tuple[DataflowGraph, ScheduleMap]:
        graph = self.graph
        sm = dict(sm)
        pinned: Dict[str, Dict[str, int]] = {name: {} for name in self.order}
        records: List[TransformRecord] = []
        for edge in topological_edges(graph):
            if edge.spec is None or edge.spec.kind != "fifo":
                continue
            obligation = self._align(edge, sm, pinned)
            if obligation is None:
                continue
            records.append(obligation)
            graph = self._downgrade(graph, edge, obligation)

        for edge in graph.edges:
            if edge.spec is not None and edge.spec.kind == "fifo" and compare_edge(graph, edge):
                record = TransformRecord(pass_name=PASS, action="downgrade", edge=edge.key, array=edge.array, reason="recheck")
                records.append(record)
                graph = self._downgrade(graph, edge, record)

        self.graph = graph.with_log(*records)
        if records:
            self._refresh()
        if not self.fits(sm):
            sm = self._withdraw_fifo_unrolls(sm)
        return self.graph, sm

    def _align(self, edge: BufferEdge, sm: ScheduleMap, pinned: Dict[str, Dict[str, int]]) -> Optional[TransformRecord]:
        """Copy the wider endpoint's stream unrolling to the other one; a record means conflict."""
        widths = {}
        drivers = {}
        for name, mode in ((edge.producer, "write"), (edge.consumer, "read")):
            drivers[name] = _dim_drivers(self.graph.node(name), edge.array, (mode,))
            unrolls = self.unrolls_of(sm[name])
            widths[name] = {d: math.prod(unrolls.get(k, 1) for k in keys) for d, keys in drivers[name].items()}
        p, c = widths[edge.producer], widths[edge.consumer]
        dims = sorted(set(p) | set(c))
        if all(p.get(d, 1) == c.get(d, 1) for d in dims):
            for name in (edge.producer, edge.consumer):
                for keys in drivers[name].values():
                    for k in keys:
                        pinned[name].setdefault(k, self.unrolls_of(sm[name]).get(k, 1))
            return None
        source, target = (edge.producer, edge.consumer) if math.prod(p.values()) >= math.prod(c.values()) else (edge.consumer, edge.producer)
        loops = loop_map(self.graph.node(target))
        unrolls = self.unrolls_of(sm[target])
        labels = self.classes[target]
        for d in dims:
            demanded = widths[source].get(d, 1)
            if demanded == widths[target].get(d, 1):
                continue
            keys = drivers[target].get(d, [])
            reason = None
            key = keys[-1] if keys else None
            if key is None:
                reason = "no loop drives the dimension"
            elif any(unrolls.get(k, 1) > 1 for k in keys[:-1]):
                reason = "dimension is unrolled on several loops"
            elif labels.get(key) == "outer_unsafe" or loops[key].trip_count % demanded:
                reason = f"loop '{key}' cannot be unrolled by {demanded}"
            elif pinned[target].get(key, demanded) != demanded:
                reason = f"loop '{key}' is already bound to {pinned[target][key]}"
            if reason is not None:
                logger.warning(f"Propagation conflict on {edge.key} at '{target}': {reason}")
                return TransformRecord(
                    pass_name=PASS,
                    action="downgrade",
                    edge=edge.key,
                    array=edge.array,
                    reason="schedule_conflict",
                    details={"node": target, "loop": key, "demanded": demanded, "message": reason},
                )
            unrolls[key] = demanded  # type: ignore[index]
            pinned[target][key] = demanded  # type: ignore[index]
        for keys in drivers[source].values():
            for k in keys:
                pinned[source].setdefault(k, self.unrolls_of(sm[source]).get(k, 1))
        sm[target] = self.realize(target, 0, unrolls={k: f for k, f in unrolls.items() if f > 1})
        logger.info(f"Propagated stream width of '{edge.array}' from '{source}' to '{target}'")
        return None

    def _downgrade(self, graph: DataflowGraph, edge: BufferEdge, record: TransformRecord) -> DataflowGraph:
        current = graph.edge(*edge.key).model_copy(update={"status": "pingpong_only", "reason": record.reason})
        planned, extra = plan_double_buffer(graph, current)
        graph = graph.replace_edge(planned)
        return graph.with_log(extra) if extra is not None else graph

    def _withdraw_fifo_unrolls(self, sm: ScheduleMap) -> ScheduleMap:
        logger.warning("Schedule over budget after propagation; withdrawing stream unrolls")
        trimmed: ScheduleMap = {}
        for name in self.order:
            labels = self.classes[name]
            kept = {k: f for k, f in self.unrolls_of(sm[name]).items() if labels.get(k) != "fifo_index"}
            trimmed[name] = self.realize(name, 0, unrolls=kept)
        if self.fits(trimmed):
            return trimmed
        logger.warning("Still over budget; falling back to degree 1 everywhere")
        return {name: self.realize(name, 1) for name in self.order}


def initial_allocation(graph: DataflowGraph, cfg: Optional[SchedulerConfig] = None, costs: Optional[CostTable] = None) -> ScheduleMap:
    """
    Stage one: degrees proportional to degree-1 latency, scaled up together.

    Raises:
        BudgetExceededError: The design does not fit even at degree 1
    """
    return _Explorer(graph, cfg, costs).initial_allocation()


def upscale(graph: DataflowGraph, sm: ScheduleMap, cfg: Optional[SchedulerConfig] = None, costs: Optional[CostTable] = None) -> ScheduleMap:
    """
    Stage two: grow bottlenecks.

    Every node at least ``n`` times slower than the fastest node gets
    ``min(ceil(n) * degree, max_parallel)`` per round, when that fits the
    budget and does not slow the graph; stops at a fixpoint or after
    ``max_up_iters`` rounds.
    """
    return _Explorer(graph, cfg, costs).upscale(sm)


def downscale(graph: DataflowGraph, sm: ScheduleMap, cfg: Optional[SchedulerConfig] = None, costs: Optional[CostTable] = None) -> ScheduleMap:
    """Stage three: divide the degree of nodes ``n`` times faster than the bottleneck."""
    return _Explorer(graph, cfg, costs).downscale(sm)


def propagate_inter_task(
    graph: DataflowGraph,
    sm: ScheduleMap,
    cfg: Optional[SchedulerConfig] = None,
    costs: Optional[CostTable] = None,
) -> Tuple[DataflowGraph, ScheduleMap]:
    """
    Make both ends of every FIFO unroll its dimensions alike.

    Edges are visited in topological order; the wider endpoint's unroll
    factors are copied to the other. A demand that clashes with a factor
    already bound by an earlier edge, or that the partner loop cannot take,
    downgrades the edge to ping-pong. FIFO edges are re-checked with the
    violation detector afterwards.
    """
    return _Explorer(graph, cfg, costs).propagate(sm)


def run_dse(
    graph: DataflowGraph,
    cfg: Optional[SchedulerConfig] = None,
    costs: Optional[CostTable] = None,
) -> Tuple[DataflowGraph, ScheduleMap, DseReport]:
    """
    PA, then UP and DP when enabled, then inter-task propagation.

    Returns:
        (graph with propagation downgrades, final schedules, report with a
        snapshot per stage)
    """
    started = time.perf_counter()
    explorer = _Explorer(graph, cfg, costs)
    report = DseReport()
    if not graph.nodes:
        return graph, {}, report
    sm = explorer.initial_allocation()
    report.snapshots.append(explorer.snapshot("PA", sm))
    if explorer.cfg.enable_upscale:
        sm = explorer.upscale(sm)
        report.snapshots.append(explorer.snapshot("UP", sm))
    if explorer.cfg.enable_downscale:
        sm = explorer.downscale(sm)
        report.snapshots.append(explorer.snapshot("DP", sm))
    graph, sm = explorer.propagate(sm)
    report.snapshots.append(explorer.snapshot("final", sm))
    report.fifo_percentage = graph.fifo_percentage
    report.downgrades = [r for r in graph.log if r.action == "downgrade"]
    report.budget_bound = explorer.budget_bound
    report.wall_time_s = time.perf_counter() - started
    logger.info(f"DSE of '{graph.name}' done in {report.wall_time_s:.3f}s, FIFO share {report.fifo_percentage:.0%}")
    return graph, sm, report


def annotate_program(graph: DataflowGraph, sm: ScheduleMap) -> Program:
    """Program with the schedule written into loop annotations and array partitions."""
    nodes = []
    partitions: Dict[str, List[int]] = {}
    for node in graph.nodes:
        schedule = sm.get(node.name)
        annotation = schedule.annotation if schedule is not None else ScheduleAnnotation()
        body = map_loops(node.body, lambda key, loop: loop.model_copy(update={"annotation": annotation.directive(key)}))
        nodes.append(node.model_copy(update={"body": body}))
        for array, factors in annotation.partitions.items():
            merged = partitions.setdefault(array, [1] * len(factors))
            partitions[array] = [max(a, b) for a, b in zip(merged, factors)]
    arrays = tuple(
        decl.model_copy(update={"partition": tuple(partitions[decl.name])}) if decl.name in partitions else decl
        for decl in graph.arrays
    )
    return Program(name=graph.name, arrays=arrays, nodes=tuple(nodes))

"""
Analytical latency and resource model.

Innermost loops, and loops scheduled with ``pipeline``, are pipelined:
latency = ceil(iterations / unroll) * II + depth, where a pipelined loop
absorbs its perfectly nested children and fully unrolls anything else
below it. The initiation interval is the largest of the requested II,
the latency of a carried accumulation, memory port contention and stream
accesses per iteration. Sequential code costs the sum of its operation
latencies.

``NodeModel.timeline`` replays the same model per executed statement,
which is what the simulator advances its processes by.
"""
import itertools
import math
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Set, Tuple

from app.config import settings
from app.models.graph import BufferEdge, DataflowGraph
from app.models.program import ArrayDecl, Loop, LoopDirective, Stmt, TaskNode
from app.models.schedule import (
    CostTable,
    NodeSchedule,
    NodeTiming,
    RegionTiming,
    ResourceVector,
    ScheduleAnnotation,
    ScheduleMap,
)
from app.services.access_analysis import reduction_pairs
from app.services.buffer_planner import block_tag
from app.services.graph_builder import topological_order
from app.services.loop_tree import Site, iter_sites, join_key, segment_names, walk_executed
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

Path = Tuple[int, ...]
TimelineEntry = Tuple[int, Path, Stmt, Dict[str, int]]


def load_cost_table(path: Optional[str] = None) -> CostTable:
    """Cost table from JSON (``settings.COST_TABLE_PATH`` by default) or the shipped defaults."""
    source = path or settings.COST_TABLE_PATH
    if source:
        logger.info(f"Cost table loaded from {source}")
        return CostTable.from_json(source)
    return CostTable()


def load_device(path: Optional[str] = None) -> ResourceVector:
    source = path or settings.DEVICE_PATH
    return ResourceVector.from_json(source) if source else ResourceVector.device()


def memory_access_delay(elements: int, ports: int = 2, partition: int = 1) -> int:
    """Cycles to move ``elements`` through ``ports`` ports of each of ``partition`` banks."""
    if elements <= 0:
        return 0
    return math.ceil(elements / (ports * max(1, partition)))


def _op_kind(stmt: Stmt) -> str:
    return stmt.op if stmt.kind == "compute" else stmt.kind  # type: ignore[return-value]


class _Region:
    """Static facts about a pipelined region the timeline needs."""

    def __init__(self, chain: List[Tuple[str, Loop, Path]], timing: RegionTiming, offsets: Dict[Path, int]):
        self.chain = chain
        self.timing = timing
        self.offsets = offsets


class NodeModel:
    """
    Timing and compute-resource model of one scheduled node.

    Args:
        node: Task node
        sched: Loop directives and partitions (loop annotations are used
            for loops the schedule does not mention)
        costs: Operation cost table
        arrays: Declarations of the arrays the node touches (sizes and
            default partitions)
        streams: Arrays the node reaches through FIFOs; they see no port
            contention, only one access slot per statement
    """

    def __init__(
        self,
        node: TaskNode,
        sched: Optional[ScheduleAnnotation] = None,
        costs: Optional[CostTable] = None,
        arrays: Optional[Mapping[str, ArrayDecl]] = None,
        streams: Iterable[str] = (),
    ):
        self.node = node
        self.sched = sched or ScheduleAnnotation()
        self.costs = costs or CostTable()
        self.arrays = dict(arrays or {})
        self.streams: Set[str] = set(streams)
        self.regions: List[RegionTiming] = []
        self._sites: Dict[Path, Site] = {site.path: site for site in iter_sites(node.body)}
        self._reductions = reduction_pairs(node)
        self._loop_latency: Dict[Path, int] = {}
        self._iteration_latency: Dict[Path, int] = {}
        self._unroll: Dict[Path, int] = {}
        self._pipelined: Dict[Path, _Region] = {}
        self._dsp = self._lut = self._ff = 0
        self.latency = self._body_latency(node.body, "", (), 1, 1)

    # static model

    def directive(self, key: str, loop: Loop) -> Optional[LoopDirective]:
        return self.sched.directive(key) or loop.annotation

    def _lat(self, stmt: Stmt) -> int:
        return 0 if stmt.kind == "guard" else self.costs.cost(_op_kind(stmt)).lat

    def _charge(self, stmt: Stmt, copies: int) -> None:
        if stmt.kind == "guard":
            return
        cost = self.costs.cost(_op_kind(stmt))
        self._dsp += cost.dsp * copies
        self._lut += cost.lut * copies
        self._ff += cost.ff * copies

    def _body_latency(self, items, prefix: str, path: Path, replication: int, executions: int) -> int:
        total = 0
        for position, (item, segment) in enumerate(zip(items, segment_names(items))):
            here = path + (position,)
            if isinstance(item, Stmt):
                self._charge(item, replication)
                total += self._lat(item)
                continue
            key = join_key(prefix, segment)
            directive = self.directive(key, item)
            innermost = not any(isinstance(c, Loop) for c in item.children)
            if innermost or (directive is not None and directive.pipeline):
                latency = self._region_latency(item, key, here, replication, executions)
            else:
                unroll = min(directive.unroll if directive else 1, max(1, item.trip_count))
                body = self._body_latency(item.children, key, here, replication * unroll, executions * item.trip_count)
                self._iteration_latency[here] = body
                self._unroll[here] = unroll
                latency = math.ceil(item.trip_count / unroll) * body
            self._loop_latency[here] = latency
            total += latency
        return total

    def _region_latency(self, loop: Loop, key: str, path: Path, replication: int, executions: int) -> int:
        chain: List[Tuple[str, Loop, Path]] = [(key, loop, path)]
        while len(chain[-1][1].children) == 1 and isinstance(chain[-1][1].children[0], Loop):
            inner = chain[-1][1].children[0]
            chain.append((join_key(chain[-1][0], inner.var), inner, chain[-1][2] + (0,)))
        iterations = 1
        unroll = 1
        requested = 1
        for k, l, _ in chain:
            iterations *= l.trip_count
            d = self.directive(k, l)
            if d is not None:
                unroll *= min(d.unroll, max(1, l.trip_count))
                requested = max(requested, d.ii or 1)
        unroll = max(1, min(unroll, max(1, iterations)))
        inner_path = chain[-1][2]
        sites = [s for p, s in self._sites.items() if p[: len(inner_path)] == inner_path and len(p) > len(inner_path)]
        sites.sort(key=lambda s: s.order)
        chain_depth = len(inner_path)

        offsets: Dict[Path, int] = {}
        ready: Dict[str, int] = {}
        depth = 1
        accesses: Dict[str, int] = {}
        for site in sites:
            stmt = site.stmt
            start = max((ready[v] for v in stmt.value_inputs if v in ready), default=0)
            offsets[site.path] = start
            finish = start + self._lat(stmt)
            if stmt.result:
                ready[stmt.result] = finish
            depth = max(depth, finish)
            copies = self._inner_copies(site, chain_depth)
            self._charge(stmt, replication * unroll * copies)
            if stmt.is_access:
                accesses[stmt.array] = accesses.get(stmt.array, 0) + copies  # type: ignore[index]

        causes: Dict[str, int] = {"requested": requested}
        recurrence = self._recurrence(sites, {l.var for _, l, _ in chain})
        if recurrence:
            causes["recurrence"] = recurrence
        for array, count in sorted(accesses.items()):
            if array in self.streams:
                causes[f"stream:{array}"] = count
                continue
            factor = self._partition(array)
            decl = self.arrays.get(array)
            if decl is not None and (decl.size == 1 or decl.size <= factor):
                continue
            causes[f"ports:{array}"] = memory_access_delay(count * unroll * replication, self.costs.ports_per_bank, factor)
        ii = max(1, *causes.values())
        latency = 0 if iterations == 0 else math.ceil(iterations / unroll) * ii + depth
        timing = RegionTiming(
            key=key,
            chain=tuple(k for k, _, _ in chain),
            iterations=iterations,
            unroll=unroll,
            ii=ii,
            depth=depth,
            latency=latency,
            executions=executions,
            ii_causes=causes,
        )
        self.regions.append(timing)
        self._pipelined[path] = _Region(chain, timing, offsets)
        return latency

    @staticmethod
    def _inner_copies(site: Site, chain_depth: int) -> int:
        copies = 1
        for loop in site.loops[chain_depth:]:
            copies *= loop.trip_count
        return copies

    def _partition(self, array: str) -> int:
        if array in self.sched.partitions:
            return self.sched.partition_factor(array)
        decl = self.arrays.get(array)
        factor = 1
        for f in decl.partition if decl is not None else ():
            factor *= f
        return factor

    def _recurrence(self, sites: List[Site], chain_vars: Set[str]) -> int:
        """Latency of the slowest accumulation carried from one region iteration to the next."""
        in_region = {s.path: s for s in sites}
        worst = 0
        for writer, reader in self._reductions:
            if writer not in in_region or reader not in in_region:
                continue
            stmt = in_region[writer].stmt
            if writer == reader:
                redefined = any(
                    s.order < in_region[writer].order and s.stmt.result == stmt.result for s in sites if s.path != writer
                )
                if not redefined:
                    worst = max(worst, self._lat(stmt))
                continue
            if {v for e in stmt.index for v in e.vars} & chain_vars:
                continue
            update = next((s.stmt for s in sites if s.stmt.result is not None and s.stmt.result == stmt.operands[0]), None)
            if update is not None:
                worst = max(worst, self._lat(update))
        return worst

    @property
    def resources(self) -> ResourceVector:
        return ResourceVector(dsp=self._dsp, lut=self._lut, ff=self._ff)

    def timing(self) -> NodeTiming:
        return NodeTiming(node=self.node.name, latency=self.latency, regions=list(self.regions), resources=self.resources)

    # per-statement replay

    def timeline(self) -> Iterator[TimelineEntry]:
        """
        Executed statements in program order with their nominal issue cycle.

        The env yielded is shared and mutated; evaluate indices before
        advancing the iterator.
        """
        yield from self._walk(self.node.body, "", (), {}, 0)

    def _walk(self, items, prefix: str, path: Path, env: Dict[str, int], t0: int) -> Iterator[TimelineEntry]:
        t = t0
        for position, (item, segment) in enumerate(zip(items, segment_names(items))):
            here = path + (position,)
            if isinstance(item, Stmt):
                if item.kind == "guard":
                    if not item.holds(env):
                        return
                elif item.holds(env):
                    yield t, here, item, env
                t += self._lat(item)
                continue
            key = join_key(prefix, segment)
            if here in self._pipelined:
                yield from self._walk_region(self._pipelined[here], env, t)
            else:
                body = self._iteration_latency[here]
                unroll = self._unroll[here]
                for k, value in enumerate(item.values()):
                    env[item.var] = value
                    yield from self._walk(item.children, key, here, env, t + (k // unroll) * body)
                env.pop(item.var, None)
            t += self._loop_latency[here]

    def _walk_region(self, region: _Region, env: Dict[str, int], t0: int) -> Iterator[TimelineEntry]:
        loops = [l for _, l, _ in region.chain]
        inner_key, inner_loop, inner_path = region.chain[-1]
        timing = region.timing
        for q, values in enumerate(itertools.product(*(l.values() for l in loops))):
            for l, v in zip(loops, values):
                env[l.var] = v
            issue = t0 + (q // timing.unroll) * timing.ii
            for stmt_path, stmt, _, _ in walk_executed(inner_loop.children, env, (inner_key,), inner_path):
                yield issue + region.offsets.get(stmt_path, 0), stmt_path, stmt, env
        for l in loops:
            env.pop(l.var, None)


def node_model(graph: DataflowGraph, node: TaskNode, scheds: Optional[ScheduleMap], costs: CostTable) -> NodeModel:
    schedule = (scheds or {}).get(node.name)
    streams = {e.array for e in graph.edges_of(node.name) if e.spec is not None and e.spec.kind == "fifo"}
    return NodeModel(
        node,
        schedule.annotation if schedule is not None else None,
        costs,
        {decl.name: decl for decl in graph.arrays},
        streams,
    )


def estimate_node_latency(
    node: TaskNode,
    sched: Optional[ScheduleAnnotation] = None,
    costs: Optional[CostTable] = None,
    arrays: Optional[Mapping[str, ArrayDecl]] = None,
    streams: Iterable[str] = (),
) -> int:
    """
    Estimated cycles for one execution of the node.

    Args:
        node: Task node
        sched: Loop directives and array partitions
        costs: Operation cost table (defaults shipped with the package)
        arrays: Array declarations for sizes and default partitions
        streams: Arrays accessed as FIFO streams

    Returns:
        Latency in cycles
    """
    return NodeModel(node, sched, costs, arrays, streams).latency


def analyze_node_timing(
    node: TaskNode,
    sched: Optional[ScheduleAnnotation] = None,
    costs: Optional[CostTable] = None,
    arrays: Optional[Mapping[str, ArrayDecl]] = None,
    streams: Iterable[str] = (),
) -> NodeTiming:
    """Per-region latency breakdown, II causes and compute resources."""
    return NodeModel(node, sched, costs, arrays, streams).timing()


def _memory_blocks(bits: int, banks: int, block_bits: int) -> int:
    if bits <= 0:
        return 0
    banks = max(1, banks)
    return banks * math.ceil(bits / banks / block_bits)


def edge_storage_bits(edge: BufferEdge, decl: ArrayDecl, lanes: int = 1) -> int:
    """On-chip bits an edge buffer occupies."""
    spec = edge.spec
    if spec is None or spec.kind == "sequential":
        return decl.size * decl.elem_bits
    if spec.kind == "fifo":
        return spec.depth * spec.width_bits * max(1, lanes)
    return 2 * spec.block_elems * spec.width_bits


def estimate_resources(graph: DataflowGraph, scheds: Optional[ScheduleMap] = None, costs: Optional[CostTable] = None) -> ResourceVector:
    """
    Compute plus on-chip memory resources of the scheduled graph.

    Compute scales with the hardware copies unrolling creates. Each edge
    buffer and private array takes ``ceil(bits / block)`` BRAM blocks per
    bank; arrays no larger than their partition factor live in registers.
    External arrays are off-chip.
    """
    table = costs or CostTable()
    schedules = scheds or {}
    total = ResourceVector()
    for node in graph.nodes:
        total = total + node_model(graph, node, schedules, table).resources

    on_edges: Dict[str, BufferEdge] = {e.array: e for e in graph.edges}
    bram = 0
    ff = 0
    for decl in graph.arrays:
        if decl.is_external:
            continue
        factor = max([_array_partition(s.annotation, decl) for s in schedules.values()] + [_array_partition(None, decl)])
        edge = on_edges.get(decl.name)
        if edge is not None:
            lanes = stream_lanes(graph.node(edge.producer), decl.name, schedules.get(edge.producer))
            banks = 1 if edge.spec is not None and edge.spec.kind == "fifo" else factor
            bram += _memory_blocks(edge_storage_bits(edge, decl, lanes), banks, table.bram_block_bits)
            continue
        bits = decl.size * decl.elem_bits
        if decl.size == 1 or decl.size <= factor:
            ff += bits
        else:
            bram += _memory_blocks(bits, factor, table.bram_block_bits)
    return total + ResourceVector(bram18k=bram, ff=ff)


def _array_partition(annotation: Optional[ScheduleAnnotation], decl: ArrayDecl) -> int:
    if annotation is not None and decl.name in annotation.partitions:
        return annotation.partition_factor(decl.name)
    factor = 1
    for f in decl.partition:
        factor *= f
    return factor


def stream_lanes(node: TaskNode, array: str, schedule: Optional[NodeSchedule]) -> int:
    """Elements per access slot: product of unroll factors of loops driving the array's index."""
    lanes = 1
    annotation = schedule.annotation if schedule is not None else ScheduleAnnotation()
    seen: Set[str] = set()
    for site in iter_sites(node.body):
        stmt = site.stmt
        if not stmt.is_access or stmt.array != array:
            continue
        for key, loop in zip(site.keys, site.loops):
            if key in seen or not any(e.coeff(loop.var) != 0 for e in stmt.index):
                continue
            seen.add(key)
            directive = annotation.directive(key) or loop.annotation
            if directive is not None:
                lanes *= directive.unroll
    return lanes


StreamProfile = Dict[Tuple[str, str, str], Tuple[float, float, float]]


def stream_profile(graph: DataflowGraph, scheds: Optional[ScheduleMap] = None, costs: Optional[CostTable] = None) -> StreamProfile:
    """
    Per edge: (first write, first block complete, time after last read) as
    fractions of the producer's or consumer's latency.

    Nodes over the enumeration cap get the optimistic profile (0, 0, 0).
    """
    table = costs or CostTable()
    profile: StreamProfile = {}
    for edge in graph.edges:
        producer = node_model(graph, graph.node(edge.producer), scheds, table)
        consumer = node_model(graph, graph.node(edge.consumer), scheds, table)
        if max(producer.latency, consumer.latency) > settings.ENUMERATION_CAP:
            profile[edge.key] = (0.0, 0.0, 0.0)
            continue
        first_write = None
        block_done = 0
        first_tag = None
        store_lat = table.cost("store").lat
        for cycle, path, stmt, env in producer.timeline():
            if stmt.kind != "store" or stmt.array != edge.array:
                continue
            tag = block_tag(producer.node, path, env)
            if first_write is None:
                first_write = cycle + store_lat
                first_tag = tag
            elif tag != first_tag:
                break
            block_done = max(block_done, cycle + store_lat)
        last_read = 0
        for cycle, _, stmt, _ in consumer.timeline():
            if stmt.kind == "load" and stmt.array == edge.array:
                last_read = max(last_read, cycle + table.cost("load").lat)
        p_lat = max(1, producer.latency)
        c_lat = max(1, consumer.latency)
        profile[edge.key] = (
            min(1.0, (first_write or p_lat) / p_lat),
            min(1.0, block_done / p_lat) if first_write is not None else 1.0,
            max(0.0, (c_lat - last_read) / c_lat),
        )
    return profile


def estimate_graph_latency(
    graph: DataflowGraph,
    scheds: Optional[ScheduleMap] = None,
    costs: Optional[CostTable] = None,
    profile: Optional[StreamProfile] = None,
) -> int:
    """
    Estimated cycles for the whole dataflow.

    A consumer starts once every producer has delivered its first element
    (FIFO), its first block (ping-pong) or finished (sequential). It ends
    no earlier than its own latency after the start, nor than the latest
    producer finish plus the consumer's work after its last read.

    Args:
        graph: Graph with buffer specs
        scheds: Node schedules (unscheduled nodes use loop annotations)
        costs: Operation cost table
        profile: Precomputed ``stream_profile``; computed when omitted
    """
    if not graph.nodes:
        return 0
    table = costs or CostTable()
    latency = {node.name: node_model(graph, node, scheds, table).latency for node in graph.nodes}
    fractions = profile if profile is not None else stream_profile(graph, scheds, table)
    start: Dict[str, int] = {}
    finish: Dict[str, int] = {}
    for name in topological_order(graph):
        begin = 0
        end_floor = 0
        for edge in graph.edges:
            if edge.consumer != name:
                continue
            producer = edge.producer
            first, block, tail = fractions.get(edge.key, (0.0, 0.0, 0.0))
            kind = edge.spec.kind if edge.spec is not None else "sequential"
            if kind == "fifo":
                ready = start[producer] + math.ceil(first * latency[producer])
            elif kind == "pingpong":
                ready = start[producer] + math.ceil(block * latency[producer])
            else:
                ready = finish[producer]
            begin = max(begin, ready)
            end_floor = max(end_floor, finish[producer] + math.ceil(tail * latency[name]))
        start[name] = begin
        finish[name] = max(begin + latency[name], end_floor)
    return max(finish.values())

"""
Discrete-event simulation of a scheduled dataflow graph.

Every node is a simpy process that replays its statement timeline from the
performance model; channel operations may park it. FIFO edges are bounded
``simpy.Store``s carrying (address, value) pairs, ping-pong edges hand over
whole producer blocks, and a sequential array lets a node touch it once
every earlier node touching it has finished. A run ends completed,
deadlocked (no pending event while some process is parked) or past
``max_cycles``.
"""
import csv
import json
import math
from typing import Dict, Iterator, List, Mapping, Optional, Set, Tuple

import networkx as nx
import numpy as np
import simpy

from app.config import settings
from app.models.graph import BufferEdge, DataflowGraph
from app.models.schedule import CostTable, ScheduleMap
from app.models.simulation import BlockedState, DeadlockInfo, SimResult, TraceEvent
from app.services.buffer_planner import block_tag, producer_blocks
from app.services.graph_builder import topological_order
from app.services.interpreter import Arithmetic, NodeExecutor, allocate_memories, output_arrays
from app.services.perf_model import estimate_graph_latency, node_model, stream_lanes
from app.utils.errors import SimulationError, SimulationTimeoutError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

Address = Tuple[int, ...]


class FifoChannel:
    """Bounded stream; elements keep their address so misordering can be counted."""

    def __init__(self, env: simpy.Environment, edge: BufferEdge, capacity: int):
        self.env = env
        self.edge = edge
        self.store = simpy.Store(env, capacity=max(1, capacity))
        self.trace: List[Tuple[int, int]] = [(0, 0)]
        self.misordered = 0

    def sample(self) -> None:
        self.trace.append((int(self.env.now), len(self.store.items)))


class PingPongChannel:
    """
    Double buffer over whole producer blocks.

    A read waits for the commit of the last block that writes its element;
    the producer opens block ``b`` only while ``b <= consumer_position + 1``
    or the consumer has finished.
    """

    def __init__(self, env: simpy.Environment, edge: BufferEdge, block_of: Mapping[Address, int]):
        self.env = env
        self.edge = edge
        self.block_of = dict(block_of)
        self.committed = 0
        self.consumer_position = -1
        self.released = False
        self.trace: List[Tuple[int, int]] = [(0, 0)]
        self._waiters: List[simpy.Event] = []

    def changed(self) -> None:
        waiters, self._waiters = self._waiters, []
        for event in waiters:
            event.succeed()
        self.trace.append((int(self.env.now), max(0, self.committed - 1 - self.consumer_position)))

    def wait(self) -> simpy.Event:
        event = self.env.event()
        self._waiters.append(event)
        return event

    def release(self) -> None:
        self.released = True
        self.changed()

    def commit(self, block: int) -> None:
        if block + 1 > self.committed:
            self.committed = block + 1
            self.changed()


class GraphSimulation:
    """
    One simulation run.

    Args:
        graph: Graph with a BufferSpec on every edge
        scheds: Node schedules
        inputs: Values of the external input arrays
        costs: Operation cost table
        integer_mode: Exact 32-bit integer arithmetic (defaults to settings)
    """

    def __init__(
        self,
        graph: DataflowGraph,
        scheds: Optional[ScheduleMap] = None,
        inputs: Optional[Mapping[str, np.ndarray]] = None,
        costs: Optional[CostTable] = None,
        integer_mode: Optional[bool] = None,
    ):
        missing = [e.key for e in graph.edges if e.spec is None]
        if missing:
            raise SimulationError("every edge needs a buffer spec before simulation", details={"edges": missing})
        self.graph = graph
        self.scheds = scheds or {}
        self.costs = costs or CostTable()
        self.arithmetic = Arithmetic(settings.integer_mode if integer_mode is None else integer_mode)
        self.program = graph.as_program()
        self.memories = allocate_memories(self.program, inputs or {}, self.arithmetic)
        self.env = simpy.Environment()
        self.order = topological_order(graph) if graph.nodes else []
        self.done: Dict[str, simpy.Event] = {name: self.env.event() for name in self.order}
        self.fifos: Dict[Tuple[str, str, str], FifoChannel] = {}
        self.pingpongs: Dict[Tuple[str, str, str], PingPongChannel] = {}
        self.sequential: Dict[Tuple[str, str], List[str]] = {}
        self.blocked: Dict[str, BlockedState] = {}
        self.activity: Dict[str, Tuple[int, int]] = {}
        self.events: List[TraceEvent] = []
        self._build_channels()

    def _build_channels(self) -> None:
        """Sequential arrays make each node wait for every earlier node touching them."""
        shared: Set[str] = set()
        for edge in self.graph.edges:
            kind = edge.spec.kind  # type: ignore[union-attr]
            if kind == "fifo":
                lanes = stream_lanes(self.graph.node(edge.producer), edge.array, self.scheds.get(edge.producer))
                capacity = edge.spec.depth * max(1, lanes)  # type: ignore[union-attr]
                channel = FifoChannel(self.env, edge, capacity)
                self.fifos[(edge.array, edge.producer, "write")] = channel
                self.fifos[(edge.array, edge.consumer, "read")] = channel
            elif kind == "pingpong":
                _, block_of = producer_blocks(self.graph.node(edge.producer), edge.array)
                channel = PingPongChannel(self.env, edge, block_of)
                self.pingpongs[(edge.array, edge.producer, "write")] = channel
                self.pingpongs[(edge.array, edge.consumer, "read")] = channel
            else:
                shared.add(edge.array)
        for array in sorted(shared):
            touching = sorted(
                set(self.graph.writers.get(array, ())) | set(self.graph.readers.get(array, ())),
                key=self.graph.node_index,
            )
            for position, name in enumerate(touching):
                self.sequential[(array, name)] = touching[:position]

    def _log(self, node: str, event: str) -> None:
        self.events.append(TraceEvent(cycle=int(self.env.now), node=node, event=event))

    def _park(self, node: str, array: str, operation: str, partner: str) -> None:
        self.blocked[node] = BlockedState(node=node, array=array, operation=operation, partner=partner)
        self._log(node, f"blocked_{operation}:{array}")

    def _unpark(self, node: str) -> None:
        state = self.blocked.pop(node)
        self._log(node, f"resumed:{state.array}")

    def process(self, name: str) -> Iterator[simpy.Event]:
        node = self.graph.node(name)
        model = node_model(self.graph, node, self.scheds, self.costs)
        executor = NodeExecutor(node, self.memories, self.arithmetic)
        env = self.env
        shift = 0
        first: Optional[int] = None
        open_blocks: Dict[str, Tuple[Tuple, int]] = {}
        next_block: Dict[str, int] = {}
        self._log(name, "start")

        for cycle, path, stmt, point in model.timeline():
            target = cycle + shift
            if target > env.now:
                yield env.timeout(target - env.now)
            if first is None:
                first = int(env.now)
            tag = block_tag(node, path, point)
            for array, (open_tag, block) in list(open_blocks.items()):
                if tag != open_tag:
                    self.pingpongs[(array, name, "write")].commit(block)
                    del open_blocks[array]

            before = env.now
            if stmt.kind == "load" and (stmt.array, name, "read") in self.fifos:
                channel = self.fifos[(stmt.array, name, "read")]  # type: ignore[index]
                addr = tuple(e.evaluate(point) for e in stmt.index)
                request = channel.store.get()
                if not request.triggered:
                    self._park(name, stmt.array, "read", channel.edge.producer)  # type: ignore[arg-type]
                    item = yield request
                    self._unpark(name)
                else:
                    item = yield request
                channel.sample()
                if item[0] != addr:
                    channel.misordered += 1
                executor.values[stmt.result] = item[1]  # type: ignore[index]
            elif stmt.kind == "store" and (stmt.array, name, "write") in self.fifos:
                channel = self.fifos[(stmt.array, name, "write")]  # type: ignore[index]
                addr = tuple(e.evaluate(point) for e in stmt.index)
                request = channel.store.put((addr, executor.operand(stmt.operands[0])))
                if not request.triggered:
                    self._park(name, stmt.array, "write", channel.edge.consumer)  # type: ignore[arg-type]
                    yield request
                    self._unpark(name)
                else:
                    yield request
                channel.sample()
            elif stmt.kind == "load" and (stmt.array, name, "read") in self.pingpongs:
                channel = self.pingpongs[(stmt.array, name, "read")]  # type: ignore[index]
                addr = tuple(e.evaluate(point) for e in stmt.index)
                block = channel.block_of.get(addr, -1)
                while channel.committed <= block:
                    self._park(name, stmt.array, "read", channel.edge.producer)  # type: ignore[arg-type]
                    yield channel.wait()
                    self._unpark(name)
                if block > channel.consumer_position:
                    channel.consumer_position = block
                    channel.changed()
                executor.execute(stmt, point)
            elif stmt.kind == "store" and (stmt.array, name, "write") in self.pingpongs:
                channel = self.pingpongs[(stmt.array, name, "write")]  # type: ignore[index]
                if stmt.array not in open_blocks:
                    block = next_block.get(stmt.array, 0)  # type: ignore[arg-type]
                    while not channel.released and block > channel.consumer_position + 1:
                        self._park(name, stmt.array, "write", channel.edge.consumer)  # type: ignore[arg-type]
                        yield channel.wait()
                        self._unpark(name)
                    open_blocks[stmt.array] = (tag, block)  # type: ignore[index]
                    next_block[stmt.array] = block + 1  # type: ignore[index]
                executor.execute(stmt, point)
            elif stmt.kind in ("load", "store") and (stmt.array, name) in self.sequential:
                operation = "read" if stmt.kind == "load" else "write"
                for earlier in self.sequential[(stmt.array, name)]:  # type: ignore[index]
                    if not self.done[earlier].triggered:
                        self._park(name, stmt.array, operation, earlier)  # type: ignore[arg-type]
                        yield self.done[earlier]
                        self._unpark(name)
                executor.execute(stmt, point)
            else:
                executor.execute(stmt, point)
            shift += int(env.now - before)

        for array, (_, block) in open_blocks.items():
            self.pingpongs[(array, name, "write")].commit(block)
        for (array, owner, operation), channel in self.pingpongs.items():
            if owner == name and operation == "read":
                channel.release()
        end = model.latency + shift
        if end > env.now:
            yield env.timeout(end - env.now)
        self.activity[name] = (first if first is not None else int(env.now), int(env.now))
        self._log(name, "finish")
        self.done[name].succeed()

    def run(self, max_cycles: int) -> SimResult:
        processes = {name: self.env.process(self.process(name)) for name in self.order}
        while self.env.peek() != math.inf:
            if self.env.peek() > max_cycles:
                raise SimulationTimeoutError(max_cycles, details={"max_cycles": max_cycles, "graph": self.graph.name})
            self.env.step()

        finished = [name for name in self.order if processes[name].processed]
        outcome = "completed" if len(finished) == len(self.order) else "deadlock"
        channels = {f"{c.edge.array}:{c.edge.producer}->{c.edge.consumer}": c for c in self.fifos.values()}
        buffers = {f"{c.edge.array}:{c.edge.producer}->{c.edge.consumer}": c for c in self.pingpongs.values()}
        outputs = {}
        if outcome == "completed":
            outputs = {name: self.memories[name].data.copy() for name in output_arrays(self.program)}
        result = SimResult(
            total_cycles=int(self.env.now),
            outcome=outcome,
            outputs=outputs,
            channel_trace={k: list(c.trace) for k, c in {**channels, **buffers}.items()},
            activity=dict(self.activity),
            blocked=list(self.blocked.values()) if outcome == "deadlock" else [],
            finished=finished,
            misordered_reads={k: c.misordered for k, c in channels.items() if c.misordered},
            events=self.events,
        )
        if outcome == "deadlock":
            logger.warning(f"Simulation of '{self.graph.name}' deadlocked at cycle {result.total_cycles}: {[b.node for b in result.blocked]}")
        else:
            logger.info(f"Simulation of '{self.graph.name}' completed in {result.total_cycles} cycles")
        return result


def simulate(
    graph: DataflowGraph,
    scheds: Optional[ScheduleMap] = None,
    inputs: Optional[Mapping[str, np.ndarray]] = None,
    costs: Optional[CostTable] = None,
    max_cycles: Optional[int] = None,
    integer_mode: Optional[bool] = None,
) -> SimResult:
    """
    Run the scheduled graph with blocking channels.

    Args:
        graph: Graph with a BufferSpec on every edge
        scheds: Node schedules (unscheduled nodes use loop annotations)
        inputs: Values for every external array that is read
        costs: Operation cost table
        max_cycles: Cycle limit; ``SIM_MAX_CYCLES_FACTOR`` times the
            estimated graph latency by default
        integer_mode: Exact 32-bit integer arithmetic (defaults to settings)

    Returns:
        SimResult with outcome ``completed`` or ``deadlock``

    Raises:
        SimulationTimeoutError: Neither completion nor deadlock within max_cycles
        SimulationError: An edge has no buffer spec
        ExecutionError: Missing input, out-of-bounds or uninitialized access
    """
    table = costs or CostTable()
    if max_cycles is None:
        estimate = estimate_graph_latency(graph, scheds, table) if graph.nodes else 0
        max_cycles = settings.SIM_MAX_CYCLES_FACTOR * max(1, estimate)
    return GraphSimulation(graph, scheds, inputs, table, integer_mode).run(max_cycles)


def detect_deadlock(result: SimResult) -> DeadlockInfo:
    """
    Explain a deadlocked run from its blocked snapshot.

    A cycle in the wait-for graph is a ``cyclic_wait``. Otherwise the chain
    of waits ends at a node that already finished: a reader there is
    ``starved_reader``, a writer ``stuck_writer``.

    Raises:
        SimulationError: The run completed
    """
    if result.outcome != "deadlock":
        raise SimulationError("detect_deadlock needs a deadlocked run", details={"outcome": result.outcome})
    wait_for = nx.DiGraph()
    for state in result.blocked:
        wait_for.add_edge(state.node, state.partner, array=state.array)
    edges = [(s.node, s.partner, s.array) for s in result.blocked]
    try:
        cycle = nx.find_cycle(wait_for)
        nodes = [u for u, _ in cycle]
        return DeadlockInfo(cycle=result.total_cycles, wait_for=edges, classification="cyclic_wait", cycle_nodes=nodes)
    except nx.NetworkXNoCycle:
        pass
    if not result.blocked:
        raise SimulationError("deadlocked run has no blocked node")
    by_node = {state.node: state for state in result.blocked}
    current = result.blocked[0]
    while current.partner in by_node:
        current = by_node[current.partner]
    kind = "starved_reader" if current.operation == "read" else "stuck_writer"
    return DeadlockInfo(cycle=result.total_cycles, wait_for=edges, classification=kind, starved=current.node)


def compare_with_reference(result: SimResult, reference: Mapping[str, np.ndarray], mode: Optional[str] = None) -> bool:
    """
    Compare simulated external outputs with the reference run.

    Args:
        result: Completed simulation
        reference: Tensors from ``reference_execute``
        mode: ``exact`` (bitwise) or ``approx`` (relative tolerance
            ``FLOAT_RTOL``); follows the numeric mode by default

    Raises:
        SimulationError: Incomplete run, missing output or shape mismatch
    """
    if result.outcome != "completed":
        raise SimulationError("only completed runs have outputs", details={"outcome": result.outcome})
    mode = mode or ("exact" if settings.integer_mode else "approx")
    for name, produced in result.outputs.items():
        if name not in reference:
            raise SimulationError(f"reference has no tensor '{name}'")
        expected = np.asarray(reference[name])
        if produced.shape != expected.shape:
            raise SimulationError(
                f"shape mismatch on '{name}'",
                details={"simulated": list(produced.shape), "reference": list(expected.shape)},
            )
        if mode == "exact":
            equal = np.array_equal(produced, expected)
        else:
            equal = np.allclose(produced, expected, rtol=settings.FLOAT_RTOL, atol=settings.FLOAT_RTOL)
        if not equal:
            logger.info(f"Output '{name}' differs from the reference ({mode})")
            return False
    return True


def write_trace_jsonl(result: SimResult, path: str) -> None:
    """One JSON object per event: cycle, node, event."""
    with open(path, "w", encoding="utf-8") as handle:
        for event in result.events:
            handle.write(json.dumps(event.model_dump()) + "\n")


def write_occupancy_csv(result: SimResult, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["channel", "cycle", "occupancy"])
        for channel, samples in sorted(result.channel_trace.items()):
            for cycle, occupancy in samples:
                writer.writerow([channel, cycle, occupancy])

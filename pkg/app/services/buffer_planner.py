"""
Buffer determination and off-chip transfer planning.

FIFO-first: every edge left clean by the elimination passes becomes a FIFO.
Edges marked ping-pong-only get a double buffer sized to one producer block,
or a sequential buffer when the consumer does not walk the blocks in order.
"""
from typing import Dict, List, Mapping, Optional, Set, Tuple

from app.config import settings
from app.models.graph import BufferEdge, BufferSpec, DataflowGraph, TransformRecord
from app.models.memory import BurstDescriptor, TransferPlan
from app.models.program import Loop, TaskNode
from app.services.access_analysis import access_summary, estimated_executions
from app.services.fine_elimination import eliminate_fine
from app.services.graph_builder import replace_node, topological_order
from app.services.loop_tree import walk_executed
from app.services.reuse_buffer import generate_reuse_buffers, is_stencil_consumer, reuse_buffer_decls
from app.services.violation_detector import attach_summaries, compare_edge
from app.utils.errors import TransformError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

PASS = "buffers"

Address = Tuple[int, ...]
Event = Tuple[str, str]  # (array, "read" | "write")


def block_tag(node: TaskNode, path: Tuple[int, ...], env: Mapping[str, int]) -> Tuple:
    """Identity of the top-level iteration a statement instance belongs to."""
    item = node.body[path[0]]
    return (path[0], env.get(item.var)) if isinstance(item, Loop) else (path[0],)


def producer_blocks(node: TaskNode, array: str) -> Tuple[int, Dict[Address, int]]:
    """
    Block size and final block of every element written by ``node``.

    A block is everything the node writes to ``array`` during one
    iteration of a top-level loop (or one top-level statement). Blocks are
    numbered in write order; top-level iterations without writes get none.

    Returns:
        (largest number of distinct elements in a block, address -> index
        of the last block that writes it)
    """
    block_of: Dict[Address, int] = {}
    members: Dict[int, Set[Address]] = {}
    current: Optional[Tuple] = None
    block = -1
    for path, stmt, env, _ in walk_executed(node.body):
        if stmt.kind != "store" or stmt.array != array:
            continue
        tag = block_tag(node, path, env)
        if tag != current:
            current = tag
            block += 1
        addr = tuple(e.evaluate(env) for e in stmt.index)
        block_of[addr] = block
        members.setdefault(block, set()).add(addr)
    largest = max((len(m) for m in members.values()), default=1)
    return largest, block_of


def blocks_monotone(consumer: TaskNode, array: str, block_of: Mapping[Address, int]) -> bool:
    """True iff the consumer's reads visit producer blocks in non-decreasing order."""
    last = -1
    for _, stmt, env, _ in walk_executed(consumer.body):
        if stmt.kind != "load" or stmt.array != array:
            continue
        block = block_of.get(tuple(e.evaluate(env) for e in stmt.index))
        if block is None:
            continue
        if block < last:
            return False
        last = block
    return True


def _stream_events(node: TaskNode, reads: Set[str], writes: Set[str]) -> List[Event]:
    events: List[Event] = []
    for _, stmt, _, _ in walk_executed(node.body):
        if stmt.kind == "load" and stmt.array in reads:
            events.append((stmt.array, "read"))  # type: ignore[arg-type]
        elif stmt.kind == "store" and stmt.array in writes:
            events.append((stmt.array, "write"))  # type: ignore[arg-type]
    return events


def _replay(order: List[str], events: Dict[str, List[Event]], depths: Dict[str, int]) -> Tuple[bool, Set[str]]:
    """Untimed bounded replay; returns (completed, FIFOs a blocked writer waits on)."""
    position = {name: 0 for name in order}
    occupancy = {array: 0 for array in depths}
    progress = True
    while progress:
        progress = False
        for name in order:
            seq = events[name]
            while position[name] < len(seq):
                array, op = seq[position[name]]
                if op == "read":
                    if occupancy[array] == 0:
                        break
                    occupancy[array] -= 1
                else:
                    if occupancy[array] >= depths[array]:
                        break
                    occupancy[array] += 1
                position[name] += 1
                progress = True
    if all(position[name] == len(events[name]) for name in order):
        return True, set()
    full = {
        events[name][position[name]][0]
        for name in order
        if position[name] < len(events[name]) and events[name][position[name]][1] == "write"
    }
    return False, full


def size_fifo_depths(graph: DataflowGraph, depths: Dict[str, int], fixed: Optional[Set[str]] = None) -> Dict[str, int]:
    """
    Raise FIFO depths until a replay of all FIFO accesses completes.

    Each round replays every node's FIFO reads and writes in program order;
    when the replay stalls, the FIFOs that blocked writers wait on are
    doubled (up to the number of elements they carry). Depths in ``fixed``
    are never changed. Graphs over the enumeration cap are left as is.
    """
    fifo = set(depths)
    if not fifo:
        return dict(depths)
    if any(estimated_executions(n) > settings.ENUMERATION_CAP for n in graph.nodes):
        logger.warning(f"FIFO depth sizing of '{graph.name}' skipped (over enumeration cap)")
        return dict(depths)
    pinned = fixed or set()
    order = topological_order(graph)
    channels = [e for e in graph.edges if e.array in fifo]
    events = {
        name: _stream_events(
            graph.node(name),
            reads={e.array for e in channels if e.consumer == name},
            writes={e.array for e in channels if e.producer == name},
        )
        for name in order
    }
    totals = {a: sum(1 for seq in events.values() for arr, op in seq if arr == a and op == "write") for a in fifo}
    sized = dict(depths)
    while True:
        completed, full = _replay(order, events, sized)
        if completed:
            return sized
        growable = [a for a in sorted(full) if a not in pinned and sized[a] < max(totals[a], 1)]
        if not growable:
            logger.warning(f"FIFO replay of '{graph.name}' stalls independently of depth")
            return sized
        for array in growable:
            sized[array] = min(2 * sized[array], max(totals[array], 1))
        logger.debug(f"FIFO depths raised: {[(a, sized[a]) for a in growable]}")


def plan_double_buffer(graph: DataflowGraph, edge: BufferEdge) -> Tuple[BufferEdge, Optional[TransformRecord]]:
    """
    Ping-pong spec for a ping-pong-only edge, sequential when that cannot work.

    Edges already marked sequential keep a whole-array buffer, and so do
    arrays still shared by several writers or readers.
    """
    decl = graph.array(edge.array)
    record = None
    shared = len(graph.writers.get(edge.array, ())) > 1 or len(graph.readers.get(edge.array, ())) > 1
    if edge.status == "pingpong_only" and shared:
        record = TransformRecord(
            pass_name=PASS,
            action="sequential",
            edge=edge.key,
            array=edge.array,
            reason="shared_array",
            details={"previous": edge.reason},
        )
        logger.warning(f"Edge {edge.key} shares '{edge.array}' with other nodes; sequential buffer")
        edge = edge.model_copy(update={"status": "sequential", "reason": "shared_array"})
    elif edge.status == "pingpong_only":
        block, block_of = producer_blocks(graph.node(edge.producer), edge.array)
        if blocks_monotone(graph.node(edge.consumer), edge.array, block_of):
            logger.info(f"Ping-pong {edge.key}: block of {block} element(s) ({edge.reason})")
            spec = BufferSpec(kind="pingpong", block_elems=block, width_bits=decl.elem_bits)
            return edge.model_copy(update={"spec": spec}), None
        record = TransformRecord(
            pass_name=PASS,
            action="sequential",
            edge=edge.key,
            array=edge.array,
            reason="non_monotone_blocks",
            details={"previous": edge.reason},
        )
        logger.warning(f"Edge {edge.key} reads producer blocks out of order; sequential buffer")
        edge = edge.model_copy(update={"status": "sequential", "reason": "non_monotone_blocks"})
    spec = BufferSpec(kind="sequential", block_elems=decl.size, width_bits=decl.elem_bits)
    return edge.model_copy(update={"spec": spec}), record


def determine_buffers(
    graph: DataflowGraph,
    fifo_depths: Optional[Mapping[str, int]] = None,
    default_depth: Optional[int] = None,
) -> DataflowGraph:
    """
    Assign a BufferSpec to every edge.

    Args:
        graph: Graph after fine-grained elimination
        fifo_depths: Hand-set FIFO depths by array; these always win
        default_depth: FIFO depth when no sizing applies
            (default ``settings.FIFO_DEFAULT_DEPTH``)

    Returns:
        Graph with specs and producer/consumer summaries on every edge
    """
    if not graph.edges:
        return graph
    overrides = dict(fifo_depths or {})
    base = max(2, settings.FIFO_DEFAULT_DEPTH if default_depth is None else default_depth)
    graph = attach_summaries(graph)
    records: List[TransformRecord] = []
    edges: Dict[Tuple[str, str, str], BufferEdge] = {}

    depths = {e.array: overrides.get(e.array, base) for e in graph.edges if e.status == "clean"}
    sized = size_fifo_depths(graph, depths, fixed=set(overrides))
    for edge in graph.edges:
        decl = graph.array(edge.array)
        if edge.status == "clean":
            depth = sized[edge.array]
            if depth != depths[edge.array]:
                records.append(
                    TransformRecord(pass_name=PASS, action="fifo_depth", edge=edge.key, array=edge.array, details={"depth": depth})
                )
                logger.info(f"FIFO {edge.key} depth raised to {depth}")
            spec = BufferSpec(kind="fifo", depth=max(2, depth), width_bits=decl.elem_bits)
            edges[edge.key] = edge.model_copy(update={"spec": spec})
            continue

        planned, record = plan_double_buffer(graph, edge)
        edges[edge.key] = planned
        if record is not None:
            records.append(record)

    graph = graph.model_copy(update={"edges": tuple(edges[e.key] for e in graph.edges)})
    logger.info(f"Buffers of '{graph.name}': FIFO share {graph.fifo_percentage:.0%}")
    return graph.with_log(*records)


def apply_reuse_pass(graph: DataflowGraph, fifo_depths: Optional[Mapping[str, int]] = None) -> DataflowGraph:
    """
    Give remaining stencil consumers line and window buffers, then re-check.

    Edges whose consumer still reads the array more often than the producer
    writes it are rewritten when the consumer has stencil form; a rewritten
    edge that the detector now finds clean is restored to FIFO eligibility.
    Fine elimination and buffer determination run again afterwards.
    """
    changed = False
    for key in [e.key for e in graph.edges]:
        edge = graph.edge(*key)
        consumer = graph.node(edge.consumer)
        if len(graph.writers.get(edge.array, ())) > 1 or len(graph.readers.get(edge.array, ())) > 1:
            continue
        decl = graph.array(edge.array)
        writes = access_summary(graph.node(edge.producer), edge.array, "write").count
        reads = access_summary(consumer, edge.array, "read").count
        if reads <= writes or not is_stencil_consumer(consumer, edge.array, decl.shape):
            continue
        try:
            rewritten, plan = generate_reuse_buffers(consumer, edge.array, decl.shape)
        except TransformError as exc:
            logger.info(f"Reuse re-check skipped {edge.key}: {exc.message}")
            continue
        if plan.degenerate:
            continue
        graph = replace_node(graph, rewritten, reuse_buffer_decls(plan, decl.elem_bits))
        after = (writes, access_summary(rewritten, edge.array, "read").count)
        record = TransformRecord(
            pass_name="reuse",
            action="reuse_buffer",
            edge=key,
            array=edge.array,
            counts_before=(writes, reads),
            counts_after=after,
            details={"line_buffer": plan.line_buffer, "window_buffer": plan.window_buffer},
        )
        graph = graph.with_log(record)
        edge = graph.edge(*key)
        if edge.status != "clean" and not compare_edge(graph, edge):
            graph = graph.replace_edge(edge.model_copy(update={"status": "clean", "reason": None, "spec": None}))
            graph = graph.with_log(TransformRecord(pass_name="reuse", action="restore_fifo", edge=key, array=edge.array))
            logger.info(f"Edge {key} is FIFO-eligible again after reuse buffering")
        changed = True
    if not changed:
        return graph
    graph = eliminate_fine(graph)
    return determine_buffers(graph, fifo_depths)


def assign_hbm_channels(graph: DataflowGraph, k: Optional[int] = None) -> TransferPlan:
    """
    Spread external arrays over ``k`` off-chip channels.

    Largest array first onto the currently lightest channel (lowest id on
    ties); each array is one contiguous burst on its channel.

    Raises:
        TransformError: ``k`` is not positive
    """
    channels = settings.HBM_CHANNELS if k is None else k
    if channels <= 0:
        raise TransformError("precondition", f"HBM channel count must be positive, got {channels}", details={"channels": channels})
    externals = [(position, decl) for position, decl in enumerate(graph.arrays) if decl.is_external]
    externals.sort(key=lambda item: (-item[1].size_bytes, item[0]))
    loads = [0] * channels
    plan = TransferPlan(channels=channels)
    for _, decl in externals:
        channel = min(range(channels), key=lambda c: (loads[c], c))
        plan.assignment[decl.name] = channel
        plan.bursts.append(BurstDescriptor(array=decl.name, channel=channel, offset=loads[channel], length=decl.size_bytes))
        loads[channel] += decl.size_bytes
    plan.channel_bytes = loads
    logger.info(f"HBM plan over {channels} channel(s): {plan.assignment} (imbalance {plan.imbalance} bytes)")
    return plan

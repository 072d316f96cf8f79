"""
Coarse- and fine-grained dataflow violation detection.
"""
from typing import List, Optional, Tuple

from app.config import settings
from app.models.analysis import AccessSummary, CoarseViolation, FineViolation, ViolationReport
from app.models.graph import BufferEdge, DataflowGraph
from app.models.program import TaskNode
from app.services.access_analysis import access_summary, enumerate_accesses, first_occurrences
from app.services.loop_tree import access_sites
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

# (dimension, coefficient, lower, trip, step) of every non-trivial driving loop
OrderKey = Tuple[Tuple[int, int, int, int, int], ...]


def coarse_pattern(writers: int, readers: int) -> Optional[str]:
    if writers < 1 or readers < 1 or (writers == 1 and readers == 1):
        return None
    if writers == 1:
        return "SPMC"
    if readers == 1:
        return "MPSC"
    return "MPMC"


def detect_coarse_violations(graph: DataflowGraph) -> List[CoarseViolation]:
    """One finding per internal array whose (writers, readers) is not (1, 1), in declaration order."""
    found: List[CoarseViolation] = []
    for array, (writers, readers) in graph.array_index.items():
        pattern = coarse_pattern(len(writers), len(readers))
        if pattern is None:
            continue
        found.append(CoarseViolation(array=array, pattern=pattern, writers=writers, readers=readers))  # type: ignore[arg-type]
    if found:
        logger.info(f"Coarse violations in '{graph.name}': {[(v.array, v.pattern) for v in found]}")
    return found


def symbolic_order_key(node: TaskNode, array: str, mode: str) -> Optional[OrderKey]:
    """
    Closed-form description of an unguarded single-statement access order.

    Two accesses with equal keys visit the same address sequence. Returns
    None when no verdict can be derived symbolically (guards, several
    access statements, or an index driven by more than one loop).
    """
    sites = access_sites(node, array, "read" if mode == "read" else "write")
    if len(sites) != 1 or sites[0].gates:
        return None
    site = sites[0]
    entries = []
    for loop in site.loops:
        if loop.trip_count <= 1:
            continue
        dims = [d for d, expr in enumerate(site.stmt.index) if expr.coeff(loop.var) != 0]
        if not dims:
            # loop repeats the same address sequence
            entries.append((-1, 0, 0, loop.trip_count, 1))
            continue
        if len(dims) > 1:
            return None
        d = dims[0]
        entries.append((d, site.stmt.index[d].coeff(loop.var), loop.lower, loop.trip_count, loop.step))
    for d, expr in enumerate(site.stmt.index):
        driving = [loop for loop in site.loops if expr.coeff(loop.var) != 0 and loop.trip_count > 1]
        if len(driving) > 1:
            return None
    constants = tuple(
        (-2, d, expr.constant + sum(expr.coeff(l.var) * l.lower for l in site.loops if l.trip_count <= 1), 0, 0)
        for d, expr in enumerate(site.stmt.index)
    )
    return tuple(entries) + constants


def compare_edge(graph: DataflowGraph, edge: BufferEdge, cap: Optional[int] = None) -> List[FineViolation]:
    """Fine-grained findings for one edge."""
    producer = graph.node(edge.producer)
    consumer = graph.node(edge.consumer)
    writes = access_summary(producer, edge.array, "write")
    reads = access_summary(consumer, edge.array, "read")
    found: List[FineViolation] = []
    if writes.count != reads.count:
        found.append(FineViolation(edge=edge.key, kind="count_mismatch", detail=(writes.count, reads.count)))

    limit = settings.ENUMERATION_CAP if cap is None else cap
    w_seq = enumerate_accesses(producer, edge.array, "write", limit)
    r_seq = enumerate_accesses(consumer, edge.array, "read", limit)
    order_detail = (writes.order_signature, reads.order_signature)
    if w_seq is not None and r_seq is not None:
        if writes.count == reads.count:
            mismatch = w_seq != r_seq
        else:
            mismatch = first_occurrences(w_seq) != first_occurrences(r_seq)
        if mismatch:
            found.append(FineViolation(edge=edge.key, kind="order_mismatch", detail=order_detail))
        symbolic = _symbolic_mismatch(producer, consumer, edge.array, writes, reads)
        if symbolic is not None and writes.count == reads.count and symbolic != mismatch:
            logger.warning(f"Symbolic and enumerated order verdicts disagree on {edge.key}; using enumeration")
        return found

    symbolic = _symbolic_mismatch(producer, consumer, edge.array, writes, reads)
    if symbolic is None or symbolic:
        found.append(FineViolation(edge=edge.key, kind="order_mismatch", detail=order_detail, confirmed=False))
    found = [v.model_copy(update={"confirmed": False}) for v in found]
    logger.warning(f"Edge {edge.key} over enumeration cap; verdict is symbolic only")
    return found


def _symbolic_mismatch(producer: TaskNode, consumer: TaskNode, array: str, writes: AccessSummary, reads: AccessSummary) -> Optional[bool]:
    w_key = symbolic_order_key(producer, array, "write")
    r_key = symbolic_order_key(consumer, array, "read")
    if w_key is None or r_key is None:
        return None
    return w_key != r_key


def detect_fine_violations(graph: DataflowGraph, cap: Optional[int] = None) -> List[FineViolation]:
    """
    Compare producer and consumer access count and order on every edge.

    Counts are compared symbolically. Orders are compared on the enumerated
    address sequences (tuples, not offsets); when enumeration exceeds the
    cap the symbolic verdict is used and flagged unconfirmed.
    """
    found: List[FineViolation] = []
    for edge in graph.edges:
        found.extend(compare_edge(graph, edge, cap))
    if found:
        logger.info(f"Fine violations in '{graph.name}': {[(v.edge, v.kind) for v in found]}")
    return found


def attach_summaries(graph: DataflowGraph) -> DataflowGraph:
    """Fill producer/consumer access summaries on every edge."""
    edges = tuple(
        e.model_copy(
            update={
                "producer_summary": access_summary(graph.node(e.producer), e.array, "write"),
                "consumer_summary": access_summary(graph.node(e.consumer), e.array, "read"),
            }
        )
        for e in graph.edges
    )
    return graph.model_copy(update={"edges": edges})


def analyze_graph(graph: DataflowGraph) -> ViolationReport:
    """Coarse findings, plus fine findings when the graph is coarse-clean."""
    coarse = detect_coarse_violations(graph)
    fine = detect_fine_violations(graph) if not coarse else []
    summaries: List[AccessSummary] = []
    for array, (writers, readers) in graph.array_index.items():
        summaries.extend(access_summary(graph.node(n), array, "write") for n in writers)
        summaries.extend(access_summary(graph.node(n), array, "read") for n in readers)
    return ViolationReport(coarse=coarse, fine=fine, summaries=summaries)

"""
Access analysis over a single node: summaries, address enumeration,
loop-carried dependences and loop classification.

Dependence questions are answered by enumerating the iteration domain;
all bounds are constant, so this is exact for the programs we accept.
"""
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple, Union

from app.config import settings
from app.models.analysis import AccessSummary, LoopClasses
from app.models.program import ASSOCIATIVE_OPS, Stmt, TaskNode
from app.services.loop_tree import (
    Site,
    access_sites,
    iter_loops,
    iter_sites,
    locate_loop,
    main_chain,
    site_executions,
    walk_executed,
)
from app.utils.errors import AnalysisError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

Address = Tuple[int, ...]
Path = Tuple[int, ...]


def access_summary(node: TaskNode, array: str, mode: str) -> AccessSummary:
    """
    Summarize how ``node`` reads or writes ``array``.

    Args:
        node: Task node
        array: Array name
        mode: ``read`` or ``write``

    Returns:
        AccessSummary. The count is symbolic (trip-count products) unless an
        access is guarded, in which case the gated domain is enumerated.

    Raises:
        AnalysisError: The node does not access the array in that mode
    """
    sites = access_sites(node, array, mode)
    if not sites:
        raise AnalysisError(
            f"node '{node.name}' does not {mode} array '{array}'",
            details={"node": node.name, "array": array, "mode": mode},
        )
    first = sites[0]
    count = 0
    for site in sites:
        count += site_executions(site)
    return AccessSummary(
        array=array,
        node=node.name,
        mode=mode,  # type: ignore[arg-type]
        count=count,
        dim_to_depth=dim_to_depth(first),
        order_signature=tuple((loop.var, loop.trip_count) for loop in first.loops),
        accesses_per_point=len(sites),
        guarded=any(site.gates for site in sites),
    )


def dim_to_depth(site: Site) -> Tuple[Optional[int], ...]:
    """Per index dimension, the depth of the outermost enclosing loop driving it."""
    depths: List[Optional[int]] = []
    for expr in site.stmt.index:
        driving = [depth for depth, loop in enumerate(site.loops) if expr.coeff(loop.var) != 0]
        depths.append(driving[0] if driving else None)
    return tuple(depths)


def estimated_executions(node: TaskNode) -> int:
    """Upper bound on executed statements (ignores guards)."""
    return sum(site.trip_product for site in iter_sites(node.body))


def enumerate_accesses(node: TaskNode, array: str, mode: str, cap: Optional[int] = None) -> Optional[List[Address]]:
    """
    Addresses touched by the node on ``array`` in execution order.

    Returns None when the walk would exceed ``cap`` statement executions
    (default ``settings.ENUMERATION_CAP``).
    """
    limit = settings.ENUMERATION_CAP if cap is None else cap
    if estimated_executions(node) > limit:
        logger.debug(f"Enumeration of {node.name}:{array} skipped (over cap {limit})")
        return None
    kind = "load" if mode == "read" else "store"
    addresses: List[Address] = []
    for _, stmt, env, _ in walk_executed(node.body):
        if stmt.kind == kind and stmt.array == array:
            addresses.append(tuple(e.evaluate(env) for e in stmt.index))
    return addresses


def first_occurrences(addresses: Iterable[Address]) -> List[Address]:
    seen: Set[Address] = set()
    ordered: List[Address] = []
    for addr in addresses:
        if addr not in seen:
            seen.add(addr)
            ordered.append(addr)
    return ordered


def reduction_pairs(node: TaskNode) -> FrozenSet[Tuple[Path, Path]]:
    """
    (writer path, reader path) pairs that form an associative accumulation.

    Two syntactic shapes are recognized: a scalar updated in place
    (``acc = add(acc, x)``) and a read-modify-write of one array element
    in a single body (``v = load A[i]; r = max(v, x); store A[i] = r``).
    """
    pairs: Set[Tuple[Path, Path]] = set()
    sites = list(iter_sites(node.body))
    for site in sites:
        stmt = site.stmt
        if stmt.kind == "compute" and _accumulates(stmt, stmt.result):
            pairs.add((site.path, site.path))

    by_body: Dict[Path, List[Site]] = {}
    for site in sites:
        by_body.setdefault(site.path[:-1], []).append(site)
    for body in by_body.values():
        for i, ld in enumerate(body):
            if ld.stmt.kind != "load":
                continue
            for j in range(i + 1, len(body)):
                upd = body[j].stmt
                if upd.kind != "compute" or not _accumulates(upd, ld.stmt.result):
                    continue
                for st in body[j + 1 :]:
                    if (
                        st.stmt.kind == "store"
                        and st.stmt.array == ld.stmt.array
                        and st.stmt.index == ld.stmt.index
                        and st.stmt.operands == (upd.result,)
                    ):
                        pairs.add((st.path, ld.path))
    return frozenset(pairs)


def _accumulates(stmt: Stmt, value: Optional[str]) -> bool:
    if value is None or stmt.op not in ASSOCIATIVE_OPS:
        return False
    if stmt.op == "mac":
        return stmt.operands[0] == value
    return value in stmt.operands


@dataclass
class _DependenceScan:
    carried: bool = False
    carried_reduction_only: bool = True
    cross_region: bool = False
    locations: Set[Tuple] = field(default_factory=set)


def _scan_loop(node: TaskNode, key: str) -> _DependenceScan:
    located = locate_loop(node.body, key)
    if located is None:
        raise AnalysisError(f"node '{node.name}' has no loop '{key}'", details={"node": node.name, "loop": key})
    loop_path, loop, ancestors = located
    outer_vars = [a.var for a in ancestors]
    depth = len(loop_path)
    region_loops = {i for i, child in enumerate(loop.children) if not isinstance(child, Stmt)}
    reductions = reduction_pairs(node)
    scan = _DependenceScan()
    last_write: Dict[Tuple, Tuple[Path, Optional[Tuple[int, ...]], Optional[int]]] = {}

    if estimated_executions(node) > settings.ENUMERATION_CAP:
        logger.warning(f"Dependence scan of {node.name}:{key} over enumeration cap; assuming dependent")
        scan.carried = True
        scan.carried_reduction_only = False
        return scan

    for path, stmt, env, keys in walk_executed(node.body):
        inside = key in keys
        ctx = tuple(env[v] for v in outer_vars) if inside else None
        iteration = env[loop.var] if inside else None
        reads: List[Tuple] = [("value", v) for v in stmt.value_inputs]
        writes: List[Tuple] = []
        if stmt.kind == "load":
            reads.append(("array", stmt.array, tuple(e.evaluate(env) for e in stmt.index)))
            writes.append(("value", stmt.result))
        elif stmt.kind == "store":
            writes.append(("array", stmt.array, tuple(e.evaluate(env) for e in stmt.index)))
        elif stmt.kind == "compute":
            writes.append(("value", stmt.result))

        for location in reads:
            previous = last_write.get(location)
            if previous is None or not inside:
                continue
            w_path, w_ctx, w_iter = previous
            if w_ctx != ctx or w_iter is None:
                continue
            if w_iter != iteration:
                scan.carried = True
                scan.locations.add(location)
                if (w_path, path) not in reductions:
                    scan.carried_reduction_only = False
            elif len(region_loops) >= 2 and len(path) > depth and len(w_path) > depth:
                here, there = path[depth], w_path[depth]
                if here != there and here in region_loops and there in region_loops:
                    scan.cross_region = True
        for location in writes:
            last_write[location] = (path, ctx, iteration)

    if not scan.carried:
        scan.carried_reduction_only = False
    return scan


def _resolve_key(node: TaskNode, depth: Union[int, str]) -> str:
    if isinstance(depth, str):
        return depth
    chain = main_chain(node.body)
    if not 0 <= depth < len(chain):
        raise AnalysisError(
            f"depth {depth} out of range for node '{node.name}' ({len(chain)} loop level(s))",
            details={"node": node.name, "depth": depth},
        )
    return chain[depth][0]


def has_loop_carried_dependence(node: TaskNode, depth: Union[int, str], ignore_reductions: bool = False) -> bool:
    """
    True iff a value written in one iteration of the loop is read in another
    iteration, with all enclosing loops held fixed.

    Args:
        node: Task node
        depth: Depth along the node's main loop chain, or a loop key
        ignore_reductions: Do not count associative accumulations

    Raises:
        AnalysisError: Depth or key does not name a loop
    """
    scan = _scan_loop(node, _resolve_key(node, depth))
    if ignore_reductions:
        return scan.carried and not scan.carried_reduction_only
    return scan.carried


def classify_loops(node: TaskNode, fifo_arrays: Iterable[str]) -> LoopClasses:
    """
    Label every loop of the node.

    ``outer_unsafe`` loops carry a non-reduction dependence or hold several
    loop regions that depend on each other; ``fifo_index`` loops drive an
    index of a FIFO array access; everything else is ``free``, including
    loops whose only carried dependence is an associative reduction.
    """
    fifo = set(fifo_arrays)
    labels: LoopClasses = {}
    for key, loop, _ in iter_loops(node.body):
        scan = _scan_loop(node, key)
        if (scan.carried and not scan.carried_reduction_only) or scan.cross_region:
            labels[key] = "outer_unsafe"
        elif _drives_fifo_index(loop, fifo):
            labels[key] = "fifo_index"
        else:
            labels[key] = "free"
    logger.debug(f"Loop classes of {node.name}: {labels}")
    return labels


def _drives_fifo_index(loop, fifo: Set[str]) -> bool:
    if not fifo:
        return False
    for site in iter_sites(loop.children):
        stmt = site.stmt
        if stmt.is_access and stmt.array in fifo and any(e.coeff(loop.var) != 0 for e in stmt.index):
            return True
    return False

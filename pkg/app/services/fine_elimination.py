"""
Fine-grained violation elimination.

Count mismatches on the producer side are removed by rewriting the
reduction so every output element is stored once; consumer-side
multi-reads of stencil form get reuse buffers; order mismatches are
removed by permuting the non-reference endpoint's loop nest. Whatever
is left is downgraded to a ping-pong buffer.
"""
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

from app.config import settings
from app.models.analysis import FineViolation
from app.models.graph import BufferEdge, DataflowGraph, TransformRecord
from app.models.memory import DepthMap
from app.models.program import AffineExpr, ArrayDecl, BodyItem, Loop, Stmt, TaskNode, is_value_id
from app.services.access_analysis import access_summary, has_loop_carried_dependence, reduction_pairs
from app.services.graph_builder import replace_node
from app.services.loop_tree import (
    Site,
    access_sites,
    compute_executions,
    iteration_points,
    main_chain,
    map_stmts,
    max_trip_product,
    perfect_chain,
    rebuild_chain,
)
from app.services.reuse_buffer import generate_reuse_buffers, is_stencil_consumer, reuse_buffer_decls
from app.services.violation_detector import detect_fine_violations
from app.utils.errors import TransformError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

PASS = "fine"

ScoreFn = Callable[[TaskNode, int], Tuple]

_IDENTITY = {"add": 0, "mac": 0, "mul": 1, "max": "-inf"}
_FOLD = {"add": "add", "mac": "add", "mul": "mul", "max": "max"}


def reduction_buffer_name(node: TaskNode, array: str) -> str:
    return f"{node.name}_{array}_acc"


def _rewrite_infeasible(node: TaskNode, array: str, message: str) -> TransformError:
    return TransformError(
        "rewrite_infeasible",
        f"cannot rewrite reduction of '{array}' in '{node.name}': {message}",
        details={"node": node.name, "array": array},
    )


def _update_chain(node: TaskNode, array: str, items: Sequence[BodyItem]):
    """Perfect update nest with a read-modify-write of ``array``; returns (loops, stmts, op)."""
    chain = perfect_chain(items)
    if chain is None:
        raise _rewrite_infeasible(node, array, "update is not a perfect loop nest")
    stmts = [c for c in chain[-1].children if isinstance(c, Stmt)]
    if any(s.kind == "guard" for s in stmts):
        raise _rewrite_infeasible(node, array, "guard statements in the update body")
    accesses = [s for s in stmts if s.is_access and s.array == array]
    stores = [s for s in accesses if s.kind == "store"]
    if not stores:
        raise _rewrite_infeasible(node, array, "no store in the update body")
    index = stores[-1].index
    if any(s.index != index for s in accesses):
        raise _rewrite_infeasible(node, array, "accesses use different indices")
    loads = [s for s in accesses if s.kind == "load"]
    if not loads:
        raise _rewrite_infeasible(node, array, "no accumulation through the array")
    ops = [
        s.op
        for s in stmts
        if s.kind == "compute" and any(l.result in s.operands for l in loads) and s.result in stores[-1].operands
    ]
    if not ops:
        raise _rewrite_infeasible(node, array, "stored value is not an associative update of the loaded value")
    op = ops[-1]
    if op not in _IDENTITY:
        raise _rewrite_infeasible(node, array, f"op '{op}' is not associative")
    return chain, stmts, index, op


def _init_constant(node: TaskNode, array: str, init_items: Sequence[BodyItem], index_points: Set[Tuple[int, ...]]):
    """Constant stored by a separate initialization nest over exactly the update's elements."""
    chain = perfect_chain(init_items)
    if chain is None:
        raise _rewrite_infeasible(node, array, "initialization is not a perfect loop nest")
    stmts = [c for c in chain[-1].children if isinstance(c, Stmt)]
    consts: Dict[str, object] = {}
    store: Optional[Stmt] = None
    for s in stmts:
        if s.kind == "compute" and s.op == "copy" and not is_value_id(s.operands[0]) and not s.guard:
            consts[s.result] = s.operands[0]  # type: ignore[index]
        elif s.kind == "store" and s.array == array and store is None and not s.guard:
            store = s
        else:
            raise _rewrite_infeasible(node, array, "initialization does more than store a constant")
    if store is None:
        raise _rewrite_infeasible(node, array, "initialization does not write the array")
    value = store.operands[0]
    value = consts.get(value, value) if isinstance(value, str) else value
    if is_value_id(value):  # type: ignore[arg-type]
        raise _rewrite_infeasible(node, array, "initial value is not a constant")
    written = [tuple(e.evaluate(env) for e in store.index) for env in iteration_points(chain)]
    if len(written) != len(set(written)) or set(written) != index_points:
        raise _rewrite_infeasible(node, array, "initialization and update cover different elements")
    return value


def rewrite_reduction(node: TaskNode, array: str) -> TaskNode:
    """
    Sink reduction loops innermost and store each output element once.

    Accepted shapes: a perfect nest holding the whole accumulation
    (initial value selected by a guard on the first reduction point), or an
    initialization nest followed by such an update nest. The accumulation
    moves to a one-element temporary seeded with the op's identity; the
    result is folded with the initial value and stored after the reduction
    loops, as soon as each output element is complete.

    Raises:
        TransformError: ``rewrite_infeasible`` when the node does not have
            one of the accepted shapes or its loops cannot be reordered
    """
    items = list(node.body)
    if len(items) == 2:
        init_items, update_items = [items[0]], [items[1]]
    elif len(items) == 1:
        init_items, update_items = [], items
    else:
        raise _rewrite_infeasible(node, array, "expected an update nest, optionally preceded by an initialization nest")

    chain, stmts, index, op = _update_chain(node, array, update_items)
    index_vars = {v for e in index for v in e.vars}
    index_loops = [l for l in chain if l.var in index_vars]
    reduction_loops = [l for l in chain if l.var not in index_vars]
    if not any(l.trip_count > 1 for l in reduction_loops):
        logger.debug(f"rewrite_reduction({node.name}, {array}): no reduction loop, unchanged")
        return node

    update_node = TaskNode(name=node.name, body=tuple(update_items))
    pairs = reduction_pairs(update_node)
    for key, _ in main_chain(update_items):
        if has_loop_carried_dependence(update_node, key, ignore_reductions=True):
            raise _rewrite_infeasible(node, array, f"loop '{key}' carries a non-reduction dependence")
    if not pairs:
        raise _rewrite_infeasible(node, array, "no accumulation recognized")

    init_value = None
    if init_items:
        points = {tuple(e.evaluate(env) for e in index) for env in iteration_points(chain)}
        init_value = _init_constant(node, array, init_items, points)

    acc = reduction_buffer_name(node, array)
    cell = (AffineExpr.const(0),)

    def redirect(stmt: Stmt) -> Stmt:
        if stmt.is_access and stmt.array == array:
            return stmt.model_copy(update={"array": acc, "index": cell})
        return stmt

    values = {s.result for s in stmts if s.result}
    result = f"{array}_sum"
    while result in values:
        result += "_"
    inner_body = map_stmts(stmts, redirect)
    tail: List[BodyItem] = [Stmt(kind="load", array=acc, index=cell, result=result)]
    final = result
    if init_value is not None and init_value != _IDENTITY[op]:
        final = f"{result}_init"
        tail.append(Stmt(kind="compute", op=_FOLD[op], operands=(result, init_value), result=final))  # type: ignore[arg-type]
    tail.append(Stmt(kind="store", array=array, index=index, operands=(final,)))
    body: List[BodyItem] = [Stmt(kind="store", array=acc, index=cell, operands=(_IDENTITY[op],))]
    body.append(rebuild_chain([l.model_copy(update={"annotation": None}) for l in reduction_loops], inner_body))
    body.extend(tail)
    if index_loops:
        new_body: Tuple[BodyItem, ...] = (rebuild_chain(index_loops, body),)
    else:
        new_body = tuple(body)
    logger.info(
        f"Reduction rewrite of {node.name}:{array}: index loops {[l.var for l in index_loops]}, "
        f"reduction loops {[l.var for l in reduction_loops]}"
    )
    return node.model_copy(update={"body": new_body})


def _map_error(reason: str, message: str, array: str) -> TransformError:
    return TransformError(reason, message, details={"array": array})


def _mode(node: TaskNode, array: str) -> str:
    return "write" if access_sites(node, array, "write") else "read"


def _driving(site: Site) -> Tuple[List[Tuple[int, int]], Dict[int, List[int]]]:
    """Non-trivial (depth, dim) pairs and dim -> depths, outermost first."""
    pairs: List[Tuple[int, int]] = []
    by_dim: Dict[int, List[int]] = {}
    for depth, loop in enumerate(site.loops):
        if loop.trip_count <= 1:
            continue
        dims = [d for d, e in enumerate(site.stmt.index) if e.coeff(loop.var) != 0]
        if len(dims) > 1:
            raise _map_error("map_infeasible", f"loop '{loop.var}' drives several dimensions", site.stmt.array or "")
        if dims:
            pairs.append((depth, dims[0]))
            by_dim.setdefault(dims[0], []).append(depth)
    return pairs, by_dim


def generate_permutation_map(reference: TaskNode, target: TaskNode, array: str) -> DepthMap:
    """
    Depth permutation making the target's access order follow the reference.

    Target loops driving array dimensions are regrouped by dimension in the
    order the reference visits the dimensions; loops driving no dimension
    stay where they are. Dimensions driven by a different number of loops
    on the two sides are recorded as unit tiling of the shallower side.

    Raises:
        TransformError: ``map_infeasible`` for unmatched dimensions or a
            non-perfect target prefix, ``map_illegal`` when a moved loop
            carries a dependence
    """
    ref_sites = access_sites(reference, array, _mode(reference, array))
    tgt_sites = access_sites(target, array, _mode(target, array))
    if not ref_sites or not tgt_sites:
        raise _map_error("map_infeasible", f"'{array}' is not accessed by both nodes", array)
    _, ref_dims = _driving(ref_sites[0])
    tgt_pairs, tgt_dims = _driving(tgt_sites[0])
    if set(ref_dims) != set(tgt_dims):
        raise _map_error(
            "map_infeasible",
            f"dimensions driven differ: reference {sorted(ref_dims)}, target {sorted(tgt_dims)}",
            array,
        )

    dim_order = sorted(ref_dims, key=lambda d: (ref_dims[d][0], d))
    slots = [depth for depth, _ in tgt_pairs]
    incoming = [depth for d in dim_order for depth in tgt_dims[d]]
    pairs = {depth: depth for depth in range(len(tgt_sites[0].loops))}
    for slot, depth in zip(slots, incoming):
        pairs[depth] = slot

    tiling: List[Tuple[str, int, int]] = []
    for d in dim_order:
        gap = len(ref_dims[d]) - len(tgt_dims[d])
        if gap > 0:
            tiling.extend(("target", pairs[tgt_dims[d][-1]], 1) for _ in range(gap))
        elif gap < 0:
            tiling.extend(("reference", ref_dims[d][-1], 1) for _ in range(-gap))

    moved = [d for d, v in pairs.items() if d != v]
    if moved:
        chain = main_chain(target.body)
        site_keys = tgt_sites[0].keys
        if [k for k, _ in chain[: len(site_keys)]] != list(site_keys):
            raise _map_error("map_infeasible", f"access to '{array}' is not on the main loop chain of '{target.name}'", array)
        top = max(moved)
        for depth in range(top):
            if len(chain[depth][1].children) != 1:
                raise _map_error("map_infeasible", f"loops of '{target.name}' above depth {top} are not perfectly nested", array)
        for depth in moved:
            if has_loop_carried_dependence(target, chain[depth][0], ignore_reductions=True):
                raise _map_error("map_illegal", f"loop '{chain[depth][0]}' of '{target.name}' carries a dependence", array)
    return DepthMap(pairs=pairs, tiling_applied=tuple(tiling))


def apply_permutation(node: TaskNode, depth_map: DepthMap) -> TaskNode:
    """
    Reorder the node's main loop chain (source depth -> new depth).

    Raises:
        TransformError: ``map_infeasible`` when the map names missing depths
            or the permuted loops are not perfectly nested
    """
    moved = {s: d for s, d in depth_map.pairs.items() if s != d}
    if not moved:
        return node
    chain = main_chain(node.body)
    top = max(list(moved) + list(moved.values()))
    if top >= len(chain) or sorted(moved) != sorted(moved.values()):
        raise TransformError("map_infeasible", f"depth map {depth_map.pairs} does not fit '{node.name}'")
    loops = [loop for _, loop in chain[: top + 1]]
    for loop in loops[:-1]:
        if len(loop.children) != 1:
            raise TransformError("map_infeasible", f"loop '{loop.var}' of '{node.name}' is not perfectly nested")
    reordered = list(loops)
    for src, dst in moved.items():
        reordered[dst] = loops[src]
    nest = rebuild_chain(reordered, loops[-1].children)
    body = list(node.body)
    first = next(i for i, item in enumerate(body) if isinstance(item, Loop))
    body[first] = nest
    return node.model_copy(update={"body": tuple(body)})


def default_score(node: TaskNode, position: int) -> Tuple:
    """Compute executions, then trip product, then earlier declaration."""
    return (compute_executions(node), max_trip_product(node), -position)


def _downgrade(graph: DataflowGraph, edge: BufferEdge, reason: str, message: str) -> DataflowGraph:
    logger.warning(f"Edge {edge.key} downgraded to ping-pong: {message}")
    record = TransformRecord(pass_name=PASS, action="downgrade", edge=edge.key, array=edge.array, reason=reason, details={"message": message})
    return graph.replace_edge(edge.model_copy(update={"status": "pingpong_only", "reason": reason})).with_log(record)


def _counts(graph: DataflowGraph, edge: BufferEdge) -> Tuple[int, int]:
    return (
        access_summary(graph.node(edge.producer), edge.array, "write").count,
        access_summary(graph.node(edge.consumer), edge.array, "read").count,
    )


def _fix_edge(graph: DataflowGraph, edge: BufferEdge, kinds: Dict[str, FineViolation], score_fn: ScoreFn, enable_reuse: bool) -> Tuple[DataflowGraph, Set[str]]:
    before = _counts(graph, edge)
    producer, consumer = graph.node(edge.producer), graph.node(edge.consumer)
    decl = graph.array(edge.array)
    try:
        if "count_mismatch" in kinds and before[0] > before[1]:
            rewritten = rewrite_reduction(producer, edge.array)
            if rewritten is producer:
                raise _rewrite_infeasible(producer, edge.array, "no reduction loops to sink")
            acc = ArrayDecl(name=reduction_buffer_name(producer, edge.array), shape=(1,), elem_bits=decl.elem_bits)
            graph = replace_node(graph, rewritten, [acc])
            action, changed, depth_map = "reduction_rewrite", {producer.name}, None
        elif "count_mismatch" in kinds:
            if not enable_reuse or not is_stencil_consumer(consumer, edge.array, decl.shape):
                raise TransformError("reuse_infeasible", f"consumer '{consumer.name}' re-reads '{edge.array}' outside a stencil form")
            rewritten, plan = generate_reuse_buffers(consumer, edge.array, decl.shape)
            if plan.degenerate:
                raise TransformError("reuse_infeasible", "window is 1x1; extra reads are not a stencil")
            graph = replace_node(graph, rewritten, reuse_buffer_decls(plan, decl.elem_bits))
            action, changed, depth_map = "reuse_buffer", {consumer.name}, None
        else:
            nodes = [producer, consumer]
            scores = [score_fn(n, graph.node_index(n.name)) for n in nodes]
            reference, target = (producer, consumer) if scores[0] >= scores[1] else (consumer, producer)
            depth_map = generate_permutation_map(reference, target, edge.array)
            permuted = apply_permutation(target, depth_map)
            if permuted is target:
                raise TransformError("map_infeasible", "identity map does not resolve the order mismatch")
            graph = replace_node(graph, permuted)
            action, changed = "permutation", {target.name}
    except TransformError as exc:
        return _downgrade(graph, graph.edge(*edge.key), exc.reason, exc.message), {edge.producer, edge.consumer}

    after = _counts(graph, graph.edge(*edge.key))
    record = TransformRecord(
        pass_name=PASS,
        action=action,
        edge=edge.key,
        array=edge.array,
        counts_before=before,
        counts_after=after,
        depth_map=depth_map.pairs if depth_map is not None else None,
        details={"tiling_applied": [list(t) for t in depth_map.tiling_applied]} if depth_map is not None else {},
    )
    logger.info(f"Fine {action} on {edge.key}: counts {before} -> {after}")
    return graph.with_log(record), changed


def eliminate_fine(
    graph: DataflowGraph,
    max_rounds: Optional[int] = None,
    score_fn: Optional[ScoreFn] = None,
    enable_reuse: bool = True,
) -> DataflowGraph:
    """
    Remove count and order mismatches edge by edge.

    Each round re-detects; an edge whose endpoints were already rewritten in
    the round waits for the next one. Edges still violating after
    ``max_rounds`` are downgraded to ping-pong.

    Args:
        graph: Coarse-clean graph
        max_rounds: Round limit (default ``settings.MAX_FINE_ROUNDS``)
        score_fn: ``(node, position) -> comparable`` picking the reference
            endpoint of an order mismatch (higher wins)
        enable_reuse: Allow reuse-buffer generation for stencil consumers
    """
    rounds = settings.MAX_FINE_ROUNDS if max_rounds is None else max_rounds
    score = score_fn or default_score
    for round_no in range(1, rounds + 1):
        pending = _pending(graph)
        if not pending:
            return graph
        touched: Set[str] = set()
        for key, kinds in pending.items():
            edge = graph.edge(*key)
            if edge.producer in touched or edge.consumer in touched:
                continue
            graph, changed = _fix_edge(graph, edge, kinds, score, enable_reuse)
            touched |= changed
        logger.debug(f"Fine round {round_no} done")

    for key in _pending(graph):
        graph = _downgrade(graph, graph.edge(*key), "residual", f"violation left after {rounds} round(s)")
    return graph


def _pending(graph: DataflowGraph) -> Dict[Tuple[str, str, str], Dict[str, FineViolation]]:
    pending: Dict[Tuple[str, str, str], Dict[str, FineViolation]] = {}
    clean_edges = {e.key for e in graph.edges if e.status == "clean"}
    for violation in detect_fine_violations(graph):
        if violation.edge in clean_edges:
            pending.setdefault(violation.edge, {})[violation.kind] = violation
    return pending

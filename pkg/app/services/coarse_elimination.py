"""
Coarse-grained violation elimination.

Restores one writer and one reader per internal array:

* SPMC: a duplicator node copies the array once, in the writer's order,
  into one fresh array per reader.
* MPSC: writers sharing an iteration box are fused into one node; earlier
  writers' values go through a private temporary and are merged into the
  last write.
* MPMC: the array is cloned along the connected components of the
  element-wise writer -> reader relation; leftovers are re-dispatched.
"""
from typing import Dict, List, Optional, Sequence, Set, Tuple

import networkx as nx

from app.config import settings
from app.models.graph import DataflowGraph, TransformRecord
from app.models.program import AffineExpr, ArrayDecl, BodyItem, Constraint, Loop, Program, Stmt, TaskNode, is_value_id
from app.services.access_analysis import dim_to_depth
from app.services.graph_builder import fresh_name, rebuild
from app.services.loop_tree import (
    access_sites,
    arrays_accessed,
    perfect_chain,
    rebuild_chain,
    rename_array,
    walk_executed,
)
from app.services.violation_detector import coarse_pattern, detect_coarse_violations
from app.utils.errors import TransformError, UnresolvableViolationError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

PASS = "coarse"


def _with_program(graph: DataflowGraph, arrays: Sequence[ArrayDecl], nodes: Sequence[TaskNode], *records: TransformRecord) -> DataflowGraph:
    program = Program(name=graph.name, arrays=tuple(arrays), nodes=tuple(nodes))
    return rebuild(graph, program).with_log(*records)


def _insert_after(decls: Sequence[ArrayDecl], anchor: str, extra: Sequence[ArrayDecl]) -> List[ArrayDecl]:
    out: List[ArrayDecl] = []
    for decl in decls:
        out.append(decl)
        if decl.name == anchor:
            out.extend(extra)
    return out


def split_spmc(graph: DataflowGraph, array: str) -> DataflowGraph:
    """
    Insert a duplicator between the single writer and its k readers.

    The duplicator reads ``array`` once, in the writer's order, and writes
    ``array__<reader>`` for every reader (readers in declaration order).

    Raises:
        TransformError: ``external_array`` for off-chip arrays
    """
    decl = graph.array(array)
    if decl.is_external:
        raise TransformError("external_array", f"array '{array}' is external; readers fetch it directly")
    writers = graph.writers.get(array, ())
    readers = graph.readers.get(array, ())
    if len(writers) != 1 or len(readers) < 2:
        logger.debug(f"split_spmc({array}): not SPMC ({len(writers)} writer(s), {len(readers)} reader(s))")
        return graph

    writer = graph.node(writers[0])
    taken_arrays = set(graph.as_program().array_names)
    clones: List[ArrayDecl] = []
    for reader in readers:
        name = fresh_name(taken_arrays, f"{array}__{reader}")
        taken_arrays.add(name)
        clones.append(decl.model_copy(update={"name": name, "partition": ()}))

    dup_name = fresh_name(set(graph.as_program().node_names), f"{writer.name}_dup_{array}")
    duplicator = _duplicator(dup_name, writer, decl, [c.name for c in clones])

    nodes: List[TaskNode] = []
    for task in graph.nodes:
        if task.name in readers:
            clone = clones[readers.index(task.name)].name
            task = task.model_copy(update={"body": rename_array(task.body, array, clone, kinds=("load",))})
        nodes.append(task)
        if task.name == writer.name:
            nodes.append(duplicator)

    record = TransformRecord(
        pass_name=PASS,
        action="split",
        array=array,
        pattern="SPMC",
        details={"duplicator": dup_name, "clones": {r: c.name for r, c in zip(readers, clones)}},
    )
    logger.info(f"SPMC on '{array}': inserted {dup_name} feeding {[c.name for c in clones]}")
    return _with_program(graph, _insert_after(graph.arrays, array, clones), nodes, record)


def _duplicator(name: str, writer: TaskNode, decl: ArrayDecl, targets: Sequence[str]) -> TaskNode:
    sites = access_sites(writer, decl.name, "write")
    depths = dim_to_depth(sites[0]) if sites else tuple(None for _ in decl.shape)
    order = sorted(range(decl.rank), key=lambda d: (depths[d] is None, depths[d] if depths[d] is not None else 0, d))
    names = [f"i{d}" for d in range(decl.rank)]
    inner: List[BodyItem] = [
        Stmt(kind="load", array=decl.name, index=tuple(AffineExpr.var(v) for v in names), result="v")
    ]
    inner += [Stmt(kind="store", array=t, index=tuple(AffineExpr.var(v) for v in names), operands=("v",)) for t in targets]
    loops = [Loop(var=names[d], upper=decl.shape[d]) for d in order]
    return TaskNode(name=name, body=(rebuild_chain(loops, inner),))


class _Box:
    """Pointwise write of one array by a perfect nest."""

    def __init__(self, node: TaskNode, array: str, stmts: List[Stmt], loops: List[Loop], dim_vars: List[Tuple[str, int]]):
        self.node = node
        self.array = array
        self.stmts = stmts
        self.loops = loops
        self.dim_vars = dim_vars  # per dimension: (loop var, constant offset)

    def loop(self, var: str) -> Loop:
        return next(l for l in self.loops if l.var == var)

    def element_range(self, dim: int) -> Tuple[int, int]:
        var, offset = self.dim_vars[dim]
        loop = self.loop(var)
        return loop.lower + offset, loop.upper - 1 + offset


def _infeasible(array: str, message: str) -> TransformError:
    return TransformError("fusion_infeasible", f"cannot fuse writers of '{array}': {message}", details={"array": array})


def _inline_gates(stmts: Sequence[Stmt]) -> List[Stmt]:
    """Fold guard statements into the guards of the statements they gate."""
    gates: Tuple[Constraint, ...] = ()
    out: List[Stmt] = []
    for stmt in stmts:
        if stmt.kind == "guard":
            gates = gates + stmt.guard
        else:
            out.append(stmt.model_copy(update={"guard": gates + stmt.guard}) if gates else stmt)
    return out


def _pointwise_box(node: TaskNode, array: str, require_full: bool) -> _Box:
    chain = perfect_chain(node.body)
    if chain is None:
        raise _infeasible(array, f"'{node.name}' is not a perfect loop nest")
    if any(l.step != 1 for l in chain):
        raise _infeasible(array, f"'{node.name}' has a non-unit step")
    stmts = _inline_gates([c for c in chain[-1].children if isinstance(c, Stmt)])
    stores = [s for s in stmts if s.kind == "store"]
    if len(stores) != 1 or stores[0].array != array:
        raise _infeasible(array, f"'{node.name}' must write only '{array}', exactly once per point")
    if any(s.kind == "load" and s.array == array for s in stmts):
        raise _infeasible(array, f"'{node.name}' reads '{array}'")
    store = stores[0]
    if require_full and store.guard:
        raise _infeasible(array, f"first writer '{node.name}' must write its whole box")
    dim_vars: List[Tuple[str, int]] = []
    used: Set[str] = set()
    for expr in store.index:
        if len(expr.terms) != 1 or expr.terms[0][1] != 1 or expr.terms[0][0] in used:
            raise _infeasible(array, f"'{node.name}' index {expr} is not a distinct unit-stride loop var")
        used.add(expr.terms[0][0])
        dim_vars.append((expr.terms[0][0], expr.constant))
    for loop in chain:
        if loop.var not in used and loop.trip_count > 1:
            raise _infeasible(array, f"'{node.name}' rewrites elements across loop '{loop.var}'")
    return _Box(node, array, stmts, chain, dim_vars)


def _prefixed(stmts: Sequence[Stmt], prefix: str) -> List[Stmt]:
    out = []
    for stmt in stmts:
        operands = tuple(f"{prefix}{o}" if is_value_id(o) else o for o in stmt.operands)
        result = f"{prefix}{stmt.result}" if stmt.result else None
        out.append(stmt.model_copy(update={"operands": operands, "result": result}))
    return out


def _guarded(stmt: Stmt, bounds: Sequence[Constraint]) -> Stmt:
    return stmt.model_copy(update={"guard": stmt.guard + tuple(bounds)})


def _fuse_writers(graph: DataflowGraph, array: str) -> DataflowGraph:
    writers = list(graph.writers.get(array, ()))
    readers = graph.readers.get(array, ())
    positions = [graph.node_index(w) for w in writers]
    last_pos = max(positions)
    for reader in readers:
        if graph.node_index(reader) < last_pos:
            raise _infeasible(array, f"reader '{reader}' runs before the last writer")

    boxes = [_pointwise_box(graph.node(w), array, require_full=(i == 0)) for i, w in enumerate(writers)]
    base = boxes[0]
    decl = graph.array(array)

    # earlier writers move down to the last writer's slot
    between = {graph.nodes[p].name for p in range(min(positions) + 1, last_pos)} - set(writers)
    for box in boxes[:-1]:
        for name in arrays_accessed(box.node, "read"):
            clash = [n for n in between if name in arrays_accessed(graph.node(n), "write")]
            if clash:
                raise _infeasible(array, f"'{box.node.name}' reads '{name}', which {clash} write in between")

    for box in boxes[1:]:
        for d in range(decl.rank):
            lo, hi = box.element_range(d)
            base_lo, base_hi = base.element_range(d)
            if lo < base_lo or hi > base_hi:
                raise _infeasible(array, f"'{box.node.name}' writes outside the first writer's box on dim {d}")

    element = [AffineExpr.var(var, constant=offset) for var, offset in base.dim_vars]
    tmp_shape = tuple(base.loop(var).trip_count for var, _ in base.dim_vars)
    tmp_index = tuple(AffineExpr.var(var, constant=-base.loop(var).lower) for var, _ in base.dim_vars)
    taken_arrays = set(graph.as_program().array_names)
    tmp = ArrayDecl(name=fresh_name(taken_arrays, f"{array}__merge"), shape=tmp_shape, elem_bits=decl.elem_bits)
    merged = f"{array}_merged"

    body: List[Stmt] = []
    for i, box in enumerate(boxes):
        stmts = _prefixed(box.stmts, f"w{i}_")
        if i > 0:
            mapping: Dict[str, AffineExpr] = {}
            bounds: List[Constraint] = []
            for d, (var, offset) in enumerate(box.dim_vars):
                mapping[var] = element[d] - offset
                loop = box.loop(var)
                bounds.append(Constraint(expr=mapping[var] - loop.lower, op="ge"))
                bounds.append(Constraint(expr=AffineExpr.const(loop.upper - 1) - mapping[var], op="ge"))
            for loop in box.loops:
                mapping.setdefault(loop.var, AffineExpr.const(loop.lower))
            stmts = [_guarded(s.substitute(mapping), bounds) for s in stmts]
        if i < len(boxes) - 1:
            stmts = [
                s.model_copy(update={"array": tmp.name, "index": tmp_index}) if s.kind == "store" else s for s in stmts
            ]
        else:
            body.append(Stmt(kind="load", array=tmp.name, index=tmp_index, result=merged))
            stmts = [
                Stmt(kind="compute", op="copy", operands=s.operands, result=merged, guard=s.guard) if s.kind == "store" else s
                for s in stmts
            ]
        body.extend(stmts)
    body.append(Stmt(kind="store", array=array, index=tuple(element), operands=(merged,)))

    fused_name = fresh_name(set(graph.as_program().node_names) - set(writers), "_".join(writers))
    fused = TaskNode(name=fused_name, body=(rebuild_chain(base.loops, body),))
    nodes: List[TaskNode] = []
    for position, task in enumerate(graph.nodes):
        if position == last_pos:
            nodes.append(fused)
        elif task.name not in writers:
            nodes.append(task)

    record = TransformRecord(
        pass_name=PASS,
        action="fuse",
        array=array,
        pattern="MPSC" if len(readers) <= 1 else "MPMC",
        details={"writers": writers, "fused": fused_name, "temporary": tmp.name},
    )
    logger.info(f"Fused writers {writers} of '{array}' into {fused_name}")
    return _with_program(graph, _insert_after(graph.arrays, array, [tmp]), nodes, record)


def fuse_mpsc(graph: DataflowGraph, array: str) -> DataflowGraph:
    """
    Fuse the writers of an MPSC array into one node.

    Raises:
        TransformError: ``fusion_infeasible`` when the writers do not share
            a pointwise iteration box or cannot be moved together
    """
    writers = graph.writers.get(array, ())
    readers = graph.readers.get(array, ())
    if len(writers) < 2 or len(readers) != 1:
        logger.debug(f"fuse_mpsc({array}): not MPSC")
        return graph
    return _fuse_writers(graph, array)


def source_relation(graph: DataflowGraph, array: str) -> Dict[str, Set[str]]:
    """reader -> writers whose values it observes, element by element in program order."""
    writers = set(graph.writers.get(array, ()))
    readers = set(graph.readers.get(array, ()))
    last: Dict[Tuple[int, ...], str] = {}
    sources: Dict[str, Set[str]] = {r: set() for r in readers}
    for task in graph.nodes:
        if task.name not in writers and task.name not in readers:
            continue
        local = dict(last)
        for _, stmt, env, _ in walk_executed(task.body):
            if stmt.array != array:
                continue
            addr = tuple(e.evaluate(env) for e in stmt.index)
            if stmt.kind == "load" and task.name in readers and addr in local:
                origin = local[addr]
                if origin != task.name:
                    sources[task.name].add(origin)
            elif stmt.kind == "store":
                local[addr] = task.name
        if task.name in writers:
            last = local
    return sources


def duplicate_mpmc(graph: DataflowGraph, array: str) -> DataflowGraph:
    """
    Clone an MPMC array along independent writer/reader groups.

    Groups are the connected components of the element-wise
    writer -> reader relation. When that yields a single group the writers
    are fused and the result split instead.

    Raises:
        TransformError: ``unresolvable`` when neither strategy applies
    """
    writers = graph.writers.get(array, ())
    readers = graph.readers.get(array, ())
    if len(writers) < 2 or len(readers) < 2:
        logger.debug(f"duplicate_mpmc({array}): not MPMC")
        return graph

    relation = nx.Graph()
    relation.add_nodes_from(("w", w) for w in writers)
    relation.add_nodes_from(("r", r) for r in readers)
    for reader, origins in source_relation(graph, array).items():
        for origin in origins:
            relation.add_edge(("w", origin), ("r", reader))
    position = {name: graph.node_index(name) for name in list(writers) + list(readers)}
    groups = sorted(
        (sorted(component, key=lambda item: position[item[1]]) for component in nx.connected_components(relation)),
        key=lambda group: position[group[0][1]],
    )

    if len(groups) > 1:
        decl = graph.array(array)
        taken = set(graph.as_program().array_names)
        rename: Dict[str, str] = {}
        clones: List[ArrayDecl] = []
        for k, group in enumerate(groups):
            target = array if k == 0 else fresh_name(taken, f"{array}_{k}")
            if k > 0:
                taken.add(target)
                clones.append(decl.model_copy(update={"name": target}))
            for _, name in group:
                rename[name] = target
        nodes = [
            task.model_copy(update={"body": rename_array(task.body, array, rename[task.name])})
            if rename.get(task.name, array) != array
            else task
            for task in graph.nodes
        ]
        record = TransformRecord(
            pass_name=PASS,
            action="duplicate",
            array=array,
            pattern="MPMC",
            details={"groups": [[name for _, name in g] for g in groups], "clones": [c.name for c in clones]},
        )
        logger.info(f"MPMC on '{array}': {len(groups)} group(s), clones {[c.name for c in clones]}")
        return _with_program(graph, _insert_after(graph.arrays, array, clones), nodes, record)

    try:
        fused = _fuse_writers(graph, array)
    except TransformError as exc:
        raise TransformError(
            "unresolvable",
            f"MPMC on '{array}' has one writer/reader group and fusion failed: {exc.message}",
            details={"array": array},
        ) from exc
    return split_spmc(fused, array)


_DISPATCH = {"SPMC": split_spmc, "MPSC": fuse_mpsc, "MPMC": duplicate_mpmc}


def _mark_infeasible(graph: DataflowGraph, array: str, pattern: str, reason: Optional[str]) -> DataflowGraph:
    """MPMC edges become sequential, the others ping-pong only."""
    status = "sequential" if pattern == "MPMC" else "pingpong_only"
    for edge in graph.edges:
        if edge.array == array and edge.status == "clean":
            graph = graph.replace_edge(edge.model_copy(update={"status": status, "reason": reason}))
    logger.warning(f"Edges of '{array}' left {status} ({reason})")
    return graph


def eliminate_coarse(graph: DataflowGraph, max_rounds: Optional[int] = None) -> DataflowGraph:
    """
    Detect -> dispatch -> update until no coarse violation is left.

    An array whose transformation fails is recorded in the log and keeps
    its writers and readers; its edges are marked ``sequential`` (MPMC) or
    ``pingpong_only`` (SPMC, MPSC) so buffer determination never streams it.

    Raises:
        UnresolvableViolationError: Violations on arrays that did not fail
            remain after ``max_rounds``
    """
    rounds = settings.MAX_COARSE_ROUNDS if max_rounds is None else max_rounds
    if not detect_coarse_violations(graph):
        return graph

    infeasible: Dict[str, Tuple[str, Optional[str]]] = {}
    used = 0
    for used in range(1, rounds + 1):
        pending = [v for v in detect_coarse_violations(graph) if v.array not in infeasible]
        if not pending:
            break
        for violation in pending:
            writers, readers = graph.array_index.get(violation.array, ((), ()))
            pattern = coarse_pattern(len(writers), len(readers))
            if pattern is None:
                continue
            try:
                graph = _DISPATCH[pattern](graph, violation.array)
            except TransformError as exc:
                infeasible[violation.array] = (pattern, exc.reason)
                graph = graph.with_log(
                    TransformRecord(pass_name=PASS, action="infeasible", array=violation.array, pattern=pattern, reason=exc.reason, details={"message": exc.message})
                )
                logger.warning(f"Coarse {pattern} on '{violation.array}' not resolved: {exc.message}")
        logger.debug(f"Coarse round {used}: {len(detect_coarse_violations(graph))} violation(s) left")

    residual = detect_coarse_violations(graph)
    unresolved = [v for v in residual if v.array not in infeasible]
    if unresolved:
        raise UnresolvableViolationError([v.model_dump() for v in unresolved], used)
    for violation in residual:
        pattern, reason = infeasible[violation.array]
        graph = _mark_infeasible(graph, violation.array, pattern, reason)
    logger.info(f"Coarse elimination of '{graph.name}' converged in {used} round(s), {len(residual)} array(s) left shared")
    return graph

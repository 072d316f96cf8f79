"""
Structural helpers over loop-nest bodies.

Loop keys identify a loop inside its node: the ``/``-joined loop variables
from the node root, where a loop whose variable repeats an earlier sibling's
gets a ``#k`` suffix (``h``, ``h#1/w``).
"""
import itertools
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from app.models.program import AffineExpr, BodyItem, Constraint, Loop, Stmt, TaskNode, is_value_id


@dataclass(frozen=True)
class Site:
    """A statement together with its static context."""

    stmt: Stmt
    loops: Tuple[Loop, ...]
    keys: Tuple[str, ...]
    gates: Tuple[Constraint, ...]
    order: int
    path: Tuple[int, ...] = ()

    @property
    def trip_product(self) -> int:
        total = 1
        for loop in self.loops:
            total *= loop.trip_count
        return total

    @property
    def loop_vars(self) -> Tuple[str, ...]:
        return tuple(loop.var for loop in self.loops)


def segment_names(items: Sequence[BodyItem]) -> List[Optional[str]]:
    """Key segment for every loop child of a body (None for statements)."""
    seen: Dict[str, int] = {}
    names: List[Optional[str]] = []
    for item in items:
        if isinstance(item, Loop):
            count = seen.get(item.var, 0)
            seen[item.var] = count + 1
            names.append(item.var if count == 0 else f"{item.var}#{count}")
        else:
            names.append(None)
    return names


def join_key(prefix: str, segment: str) -> str:
    return f"{prefix}/{segment}" if prefix else segment


def iter_loops(items: Sequence[BodyItem], prefix: str = "", ancestors: Tuple[Loop, ...] = ()) -> Iterator[Tuple[str, Loop, Tuple[Loop, ...]]]:
    """Pre-order (key, loop, ancestors) triples."""
    for item, segment in zip(items, segment_names(items)):
        if isinstance(item, Loop):
            key = join_key(prefix, segment)
            yield key, item, ancestors
            yield from iter_loops(item.children, key, ancestors + (item,))


def loop_map(node: TaskNode) -> Dict[str, Loop]:
    return {key: loop for key, loop, _ in iter_loops(node.body)}


def iter_sites(items: Sequence[BodyItem]) -> Iterator[Site]:
    """All statements in program order with their enclosing loops and gates."""
    counter = itertools.count()

    def visit(body, prefix, loops, keys, gates, path):
        local_gates: Tuple[Constraint, ...] = ()
        for position, (item, segment) in enumerate(zip(body, segment_names(body))):
            here = path + (position,)
            if isinstance(item, Loop):
                key = join_key(prefix, segment)
                yield from visit(item.children, key, loops + (item,), keys + (key,), gates + local_gates, here)
            elif item.kind == "guard":
                yield Site(item, loops, keys, gates + local_gates, next(counter), here)
                local_gates = local_gates + item.guard
            else:
                yield Site(item, loops, keys, gates + local_gates + item.guard, next(counter), here)

    yield from visit(items, "", (), (), (), ())


def walk_executed(
    items: Sequence[BodyItem],
    env: Optional[Dict[str, int]] = None,
    keys: Tuple[str, ...] = (),
    path: Tuple[int, ...] = (),
) -> Iterator[Tuple[Tuple[int, ...], Stmt, Dict[str, int], Tuple[str, ...]]]:
    """
    Yield ``(path, stmt, env, loop keys)`` for every executed statement, in order.

    ``path`` is the statement's static position (child indices from the node
    root). The yielded ``env`` is shared and mutated as iteration proceeds;
    copy it to keep a snapshot. A false guard statement ends the current
    body for this iteration; a statement whose own guard is false is skipped.
    """
    if env is None:
        env = {}
    prefix = keys[-1] if keys else ""
    for position, (item, segment) in enumerate(zip(items, segment_names(items))):
        here = path + (position,)
        if isinstance(item, Loop):
            inner = keys + (join_key(prefix, segment),)
            for value in item.values():
                env[item.var] = value
                yield from walk_executed(item.children, env, inner, here)
            env.pop(item.var, None)
        elif item.kind == "guard":
            if not item.holds(env):
                return
        elif item.holds(env):
            yield here, item, env, keys


def locate_loop(items: Sequence[BodyItem], key: str) -> Optional[Tuple[Tuple[int, ...], Loop, Tuple[Loop, ...]]]:
    """Static path, loop and ancestors of the loop with the given key."""

    def visit(body, prefix, path, ancestors):
        for position, (item, segment) in enumerate(zip(body, segment_names(body))):
            if not isinstance(item, Loop):
                continue
            here = join_key(prefix, segment)
            if here == key:
                return path + (position,), item, ancestors
            if key.startswith(here + "/"):
                return visit(item.children, here, path + (position,), ancestors + (item,))
        return None

    return visit(items, "", (), ())


def access_sites(node: TaskNode, array: str, mode: str) -> List[Site]:
    """Statements reading (``read``) or writing (``write``) an array."""
    kind = "load" if mode == "read" else "store"
    return [s for s in iter_sites(node.body) if s.stmt.kind == kind and s.stmt.array == array]


def site_executions(site: Site) -> int:
    """Number of times a statement executes over the full iteration domain."""
    if not site.gates:
        return site.trip_product
    count = 0
    for env in iteration_points(site.loops):
        if all(g.holds(env) for g in site.gates):
            count += 1
    return count


def iteration_points(loops: Sequence[Loop]) -> Iterator[Dict[str, int]]:
    """Lexicographic points of a chain of loops (bounds are constant)."""
    names = [loop.var for loop in loops]
    for values in itertools.product(*(loop.values() for loop in loops)):
        yield dict(zip(names, values))


def perfect_chain(items: Sequence[BodyItem]) -> Optional[List[Loop]]:
    """Loops of a perfect nest, or None when the body is not one.

    A perfect nest is a single loop at every level with all statements in
    the innermost loop.
    """
    if len(items) != 1 or not isinstance(items[0], Loop):
        return None
    chain = [items[0]]
    while True:
        children = chain[-1].children
        loops = [c for c in children if isinstance(c, Loop)]
        if not loops:
            return chain
        if len(children) != 1:
            return None
        chain.append(loops[0])


def main_chain(items: Sequence[BodyItem], prefix: str = "") -> List[Tuple[str, Loop]]:
    """Follow the first loop child at every level."""
    chain: List[Tuple[str, Loop]] = []
    body = items
    while True:
        picked = None
        for item, segment in zip(body, segment_names(body)):
            if isinstance(item, Loop):
                picked = (join_key(prefix, segment), item)
                break
        if picked is None:
            return chain
        chain.append(picked)
        prefix = picked[0]
        body = picked[1].children


def rebuild_chain(loops: Sequence[Loop], innermost: Sequence[BodyItem]) -> Loop:
    """Nest ``loops`` (outermost first) around ``innermost``."""
    children: Tuple[BodyItem, ...] = tuple(innermost)
    for loop in reversed(loops):
        rebuilt = loop.model_copy(update={"children": children})
        children = (rebuilt,)
    return children[0]  # type: ignore[return-value]


def map_stmts(items: Sequence[BodyItem], fn: Callable[[Stmt], Union[Stmt, Sequence[Stmt], None]]) -> Tuple[BodyItem, ...]:
    """Rewrite every statement; ``fn`` may return one, many or no statements."""
    out: List[BodyItem] = []
    for item in items:
        if isinstance(item, Loop):
            out.append(item.model_copy(update={"children": map_stmts(item.children, fn)}))
            continue
        replaced = fn(item)
        if replaced is None:
            continue
        if isinstance(replaced, Stmt):
            out.append(replaced)
        else:
            out.extend(replaced)
    return tuple(out)


def map_loops(items: Sequence[BodyItem], fn: Callable[[str, Loop], Loop], prefix: str = "") -> Tuple[BodyItem, ...]:
    """Rewrite every loop header (children are rewritten first)."""
    out: List[BodyItem] = []
    for item, segment in zip(items, segment_names(items)):
        if isinstance(item, Loop):
            key = join_key(prefix, segment)
            inner = map_loops(item.children, fn, key)
            out.append(fn(key, item.model_copy(update={"children": inner})))
        else:
            out.append(item)
    return tuple(out)


def substitute_body(items: Sequence[BodyItem], mapping: Mapping[str, AffineExpr]) -> Tuple[BodyItem, ...]:
    """Substitute loop variables in indices and guards."""
    return map_stmts(items, lambda s: s.substitute(mapping))


def rename_array(items: Sequence[BodyItem], old: str, new: str, kinds: Tuple[str, ...] = ("load", "store")) -> Tuple[BodyItem, ...]:
    def rename(stmt: Stmt) -> Stmt:
        if stmt.array == old and stmt.kind in kinds:
            return stmt.model_copy(update={"array": new})
        return stmt

    return map_stmts(items, rename)


def rename_values(items: Sequence[BodyItem], rename: Callable[[str], str]) -> Tuple[BodyItem, ...]:
    """Rename scalar value ids (results and operands)."""
    def apply(stmt: Stmt) -> Stmt:
        operands = tuple(rename(o) if is_value_id(o) else o for o in stmt.operands)
        result = rename(stmt.result) if stmt.result else None
        return stmt.model_copy(update={"operands": operands, "result": result})

    return map_stmts(items, apply)


def arrays_accessed(node: TaskNode, mode: Optional[str] = None) -> List[str]:
    """Arrays touched by a node in first-touch order."""
    names: List[str] = []
    for site in iter_sites(node.body):
        stmt = site.stmt
        if not stmt.is_access:
            continue
        if mode == "read" and stmt.kind != "load":
            continue
        if mode == "write" and stmt.kind != "store":
            continue
        if stmt.array not in names:
            names.append(stmt.array)  # type: ignore[arg-type]
    return names


def strip_annotations(items: Sequence[BodyItem]) -> Tuple[BodyItem, ...]:
    return map_loops(items, lambda _key, loop: loop.model_copy(update={"annotation": None}))


def compute_executions(node: TaskNode) -> int:
    """Total compute-op executions of a node."""
    return sum(site_executions(s) for s in iter_sites(node.body) if s.stmt.kind == "compute")


def max_trip_product(node: TaskNode) -> int:
    best = 0
    for site in iter_sites(node.body):
        best = max(best, site.trip_product)
    return best

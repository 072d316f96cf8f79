"""
Dataflow graph construction.
"""
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx

from app.models.graph import BufferEdge, DataflowGraph
from app.models.program import ArrayDecl, Program, TaskNode
from app.services.loop_tree import iter_sites
from app.utils.errors import CyclicDataflowError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)


def build_dataflow_graph(program: Program, previous: Optional[DataflowGraph] = None) -> DataflowGraph:
    """
    Translate a program into its task dataflow graph.

    One edge per (writer, reader) pair of every internal array shared by
    two or more nodes. Arrays private to a single node produce no edges.
    When ``previous`` is given, edge annotations (status, buffer spec) and
    the transformation log carry over for edges that still exist.

    Raises:
        CyclicDataflowError: Internal arrays form a feedback loop
    """
    loads: Dict[str, List[str]] = {}
    stores: Dict[str, List[str]] = {}
    for node in program.nodes:
        for site in iter_sites(node.body):
            stmt = site.stmt
            if stmt.kind == "load":
                _append_unique(loads.setdefault(stmt.array, []), node.name)  # type: ignore[arg-type]
            elif stmt.kind == "store":
                _append_unique(stores.setdefault(stmt.array, []), node.name)  # type: ignore[arg-type]

    writers: Dict[str, Tuple[str, ...]] = {}
    readers: Dict[str, Tuple[str, ...]] = {}
    edges: List[BufferEdge] = []
    carried = {e.key: e for e in previous.edges} if previous is not None else {}
    for decl in program.arrays:
        if decl.is_external:
            continue
        w = stores.get(decl.name, [])
        r = [n for n in loads.get(decl.name, []) if not (w and n == w[0])]
        if len(set(w) | set(r)) < 2:
            continue
        writers[decl.name] = tuple(w)
        readers[decl.name] = tuple(r)
        for producer in w:
            for consumer in r:
                if producer == consumer:
                    continue
                key = (decl.name, producer, consumer)
                if key in carried:
                    old = carried[key]
                    edges.append(BufferEdge(array=decl.name, producer=producer, consumer=consumer, spec=old.spec, status=old.status, reason=old.reason))
                else:
                    edges.append(BufferEdge(array=decl.name, producer=producer, consumer=consumer))

    _check_acyclic(program, edges)
    graph = DataflowGraph(
        name=program.name,
        arrays=program.arrays,
        nodes=program.nodes,
        edges=tuple(edges),
        writers=writers,
        readers=readers,
        log=previous.log if previous is not None else (),
    )
    logger.debug(f"Graph '{program.name}': {len(program.nodes)} node(s), {len(edges)} edge(s)")
    return graph


def node_digraph(graph: DataflowGraph) -> nx.DiGraph:
    """Node-level digraph (one arc per connected producer/consumer pair)."""
    digraph = nx.DiGraph()
    for position, node in enumerate(graph.nodes):
        digraph.add_node(node.name, position=position)
    for edge in graph.edges:
        digraph.add_edge(edge.producer, edge.consumer)
    return digraph


def topological_order(graph: DataflowGraph) -> List[str]:
    """Topological node order, ties broken by program order."""
    digraph = node_digraph(graph)
    position = {n.name: i for i, n in enumerate(graph.nodes)}
    return list(nx.lexicographical_topological_sort(digraph, key=lambda name: position[name]))


def topological_edges(graph: DataflowGraph) -> List[BufferEdge]:
    """Edges ordered by producer, then consumer topological rank, then array declaration."""
    rank = {name: i for i, name in enumerate(topological_order(graph))}
    declared = {decl.name: i for i, decl in enumerate(graph.arrays)}
    return sorted(graph.edges, key=lambda e: (rank[e.producer], rank[e.consumer], declared[e.array]))


def rebuild(graph: DataflowGraph, program: Program) -> DataflowGraph:
    """Re-derive edges after a node-level rewrite, keeping annotations."""
    return build_dataflow_graph(program, previous=graph)


def replace_node(graph: DataflowGraph, node: TaskNode, extra: Sequence[ArrayDecl] = ()) -> DataflowGraph:
    """Swap in a rewritten node (same name) and declare any new private arrays."""
    nodes = tuple(node if n.name == node.name else n for n in graph.nodes)
    names = {a.name for a in graph.arrays}
    arrays = tuple(graph.arrays) + tuple(a for a in extra if a.name not in names)
    return rebuild(graph, Program(name=graph.name, arrays=arrays, nodes=nodes))


def _append_unique(items: List[str], name: str) -> None:
    if name not in items:
        items.append(name)


def _check_acyclic(program: Program, edges: List[BufferEdge]) -> None:
    digraph = nx.DiGraph()
    digraph.add_nodes_from(program.node_names)
    digraph.add_edges_from((e.producer, e.consumer) for e in edges)
    if nx.is_directed_acyclic_graph(digraph):
        return
    cycle = [u for u, _ in nx.find_cycle(digraph)]
    logger.warning(f"Cyclic dataflow detected: {cycle}")
    raise CyclicDataflowError(cycle + cycle[:1])


def fresh_name(taken, base: str) -> str:
    """``base`` or ``base_<k>`` for the smallest k not in ``taken``."""
    if base not in taken:
        return base
    k = 1
    while f"{base}_{k}" in taken:
        k += 1
    return f"{base}_{k}"

"""
Dataflow graph model: task nodes connected through buffer edges.
"""
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from app.models.analysis import AccessSummary
from app.models.program import ArrayDecl, Program, TaskNode


BufferKind = Literal["fifo", "pingpong", "sequential"]
EdgeStatus = Literal["clean", "pingpong_only", "sequential"]


class BufferSpec(BaseModel):
    """Implementation chosen for an inter-task buffer."""

    model_config = ConfigDict(frozen=True)

    kind: BufferKind
    depth: int = Field(default=2, ge=1, description="FIFO element slots")
    block_elems: int = Field(default=1, ge=1, description="Ping-pong elements per block")
    width_bits: int = Field(default=32, ge=1)

    @property
    def capacity_elems(self) -> int:
        if self.kind == "fifo":
            return self.depth
        if self.kind == "pingpong":
            return 2 * self.block_elems
        return self.block_elems


class TransformRecord(BaseModel):
    """One entry of the transformation log."""

    model_config = ConfigDict(frozen=True)

    pass_name: str
    action: str
    array: Optional[str] = None
    edge: Optional[Tuple[str, str, str]] = Field(default=None, description="(array, producer, consumer)")
    pattern: Optional[str] = None
    counts_before: Optional[Tuple[int, int]] = None
    counts_after: Optional[Tuple[int, int]] = None
    depth_map: Optional[Dict[int, int]] = None
    reason: Optional[str] = None
    details: Dict[str, Any] = Field(default_factory=dict)


class BufferEdge(BaseModel):
    """Single producer / single consumer connection through an internal array."""

    model_config = ConfigDict(frozen=True)

    array: str
    producer: str
    consumer: str
    spec: Optional[BufferSpec] = None
    status: EdgeStatus = "clean"
    reason: Optional[str] = None
    producer_summary: Optional[AccessSummary] = None
    consumer_summary: Optional[AccessSummary] = None

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.array, self.producer, self.consumer)


class DataflowGraph(BaseModel):
    """Task nodes, buffer edges and the transformation log so far."""

    model_config = ConfigDict(frozen=True)

    name: str
    arrays: Tuple[ArrayDecl, ...] = ()
    nodes: Tuple[TaskNode, ...] = ()
    edges: Tuple[BufferEdge, ...] = ()
    writers: Dict[str, Tuple[str, ...]] = Field(default_factory=dict)
    readers: Dict[str, Tuple[str, ...]] = Field(default_factory=dict)
    log: Tuple[TransformRecord, ...] = ()

    @property
    def array_index(self) -> Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]]:
        """array -> (writer nodes, reader nodes) for internal arrays."""
        return {
            decl.name: (self.writers.get(decl.name, ()), self.readers.get(decl.name, ()))
            for decl in self.arrays
            if decl.name in self.writers or decl.name in self.readers
        }

    def as_program(self) -> Program:
        return Program(name=self.name, arrays=self.arrays, nodes=self.nodes)

    def node(self, name: str) -> TaskNode:
        for task in self.nodes:
            if task.name == name:
                return task
        raise KeyError(name)

    def array(self, name: str) -> ArrayDecl:
        for decl in self.arrays:
            if decl.name == name:
                return decl
        raise KeyError(name)

    def edge(self, array: str, producer: str, consumer: str) -> BufferEdge:
        for e in self.edges:
            if e.key == (array, producer, consumer):
                return e
        raise KeyError((array, producer, consumer))

    def edges_of(self, node: str) -> List[BufferEdge]:
        return [e for e in self.edges if node in (e.producer, e.consumer)]

    def node_index(self, name: str) -> int:
        for position, task in enumerate(self.nodes):
            if task.name == name:
                return position
        raise KeyError(name)

    def with_log(self, *records: TransformRecord) -> "DataflowGraph":
        return self.model_copy(update={"log": self.log + tuple(records)})

    def replace_edge(self, edge: BufferEdge) -> "DataflowGraph":
        edges = tuple(edge if e.key == edge.key else e for e in self.edges)
        return self.model_copy(update={"edges": edges})

    @property
    def fifo_percentage(self) -> float:
        if not self.edges:
            return 1.0
        fifo = sum(1 for e in self.edges if e.spec is not None and e.spec.kind == "fifo")
        return fifo / len(self.edges)

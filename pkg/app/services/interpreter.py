"""
Sequential reference interpreter (the functional oracle).

Nodes run in program order, loops in lexicographic order. Scalar values
live for the whole node execution, so a value written in one iteration is
visible in the next.
"""
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.config import settings
from app.models.program import Operand, Program, Stmt, TaskNode
from app.services.loop_tree import iter_sites, walk_executed
from app.utils.errors import ExecutionError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

TensorMap = Dict[str, np.ndarray]

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


def wrap_int32(value: int) -> int:
    return ((int(value) - INT32_MIN) % 2**32) + INT32_MIN


class Arithmetic:
    """Scalar semantics for float or exact 32-bit integer mode."""

    def __init__(self, integer_mode: bool):
        self.integer_mode = integer_mode

    @property
    def dtype(self):
        return np.int64 if self.integer_mode else np.float64

    def constant(self, operand: Operand):
        if operand == "inf":
            return INT32_MAX if self.integer_mode else math.inf
        if operand == "-inf":
            return INT32_MIN if self.integer_mode else -math.inf
        if self.integer_mode:
            if isinstance(operand, float) and not operand.is_integer():
                raise ExecutionError(f"non-integral constant {operand} in integer mode")
            return wrap_int32(int(operand))
        return float(operand)

    def identity(self, op: str):
        """Neutral element of an accumulating op."""
        if op in ("add", "mac"):
            return 0 if self.integer_mode else 0.0
        if op == "mul":
            return 1 if self.integer_mode else 1.0
        if op == "max":
            return self.constant("-inf")
        raise ExecutionError(f"op '{op}' has no accumulator identity")

    def apply(self, op: str, args: Sequence):
        if self.integer_mode:
            return self._apply_int(op, [int(a) for a in args])
        return self._apply_float(op, [float(a) for a in args])

    def _apply_int(self, op: str, a: List[int]) -> int:
        if op == "add":
            return wrap_int32(a[0] + a[1])
        if op == "mul":
            return wrap_int32(a[0] * a[1])
        if op == "mac":
            return wrap_int32(a[0] + a[1] * a[2])
        if op == "max":
            return max(a[0], a[1])
        if op == "div":
            if a[1] == 0:
                raise ExecutionError("integer division by zero")
            quotient = abs(a[0]) // abs(a[1])
            return wrap_int32(quotient if (a[0] >= 0) == (a[1] >= 0) else -quotient)
        if op == "cmp":
            return 1 if a[0] > a[1] else 0
        if op == "copy":
            return a[0]
        raise ExecutionError(f"op '{op}' is not defined in integer mode")

    def _apply_float(self, op: str, a: List[float]) -> float:
        if op == "add":
            return a[0] + a[1]
        if op == "mul":
            return a[0] * a[1]
        if op == "mac":
            return a[0] + a[1] * a[2]
        if op == "max":
            return max(a[0], a[1])
        if op == "div":
            if a[1] == 0:
                raise ExecutionError("division by zero")
            return a[0] / a[1]
        if op == "exp":
            try:
                return math.exp(a[0])
            except OverflowError:
                return math.inf
        if op == "cmp":
            return 1.0 if a[0] > a[1] else 0.0
        if op == "copy":
            return a[0]
        raise ExecutionError(f"unknown op '{op}'")


class ArrayMemory:
    """Dense storage with a written mask."""

    def __init__(self, name: str, shape: Tuple[int, ...], dtype, initial: Optional[np.ndarray] = None):
        self.name = name
        self.shape = shape
        if initial is not None:
            self.data = np.array(initial, dtype=dtype).reshape(shape)
            self.written = np.ones(shape, dtype=bool)
        else:
            self.data = np.zeros(shape, dtype=dtype)
            self.written = np.zeros(shape, dtype=bool)

    def check(self, addr: Tuple[int, ...]) -> None:
        if len(addr) != len(self.shape) or any(not 0 <= i < n for i, n in zip(addr, self.shape)):
            raise ExecutionError(
                f"out-of-bounds access {self.name}{list(addr)} (shape {list(self.shape)})",
                details={"array": self.name, "index": list(addr)},
            )

    def load(self, addr: Tuple[int, ...]):
        self.check(addr)
        if not self.written[addr]:
            raise ExecutionError(
                f"read of never-written element {self.name}{list(addr)}",
                details={"array": self.name, "index": list(addr)},
            )
        return self.data[addr].item()

    def store(self, addr: Tuple[int, ...], value) -> None:
        self.check(addr)
        self.data[addr] = value
        self.written[addr] = True


class NodeExecutor:
    """Executes one node's statements against a set of memories."""

    def __init__(self, node: TaskNode, memories: Mapping[str, ArrayMemory], arithmetic: Arithmetic):
        self.node = node
        self.memories = memories
        self.arithmetic = arithmetic
        self.values: Dict[str, object] = {}

    def operand(self, operand: Operand):
        if isinstance(operand, str) and operand not in ("inf", "-inf"):
            if operand not in self.values:
                raise ExecutionError(f"value '{operand}' used before definition in node '{self.node.name}'")
            return self.values[operand]
        return self.arithmetic.constant(operand)

    def execute(self, stmt: Stmt, env: Mapping[str, int]) -> None:
        if stmt.kind == "load":
            addr = tuple(e.evaluate(env) for e in stmt.index)
            self.values[stmt.result] = self.memories[stmt.array].load(addr)  # type: ignore[index]
        elif stmt.kind == "store":
            addr = tuple(e.evaluate(env) for e in stmt.index)
            self.memories[stmt.array].store(addr, self.operand(stmt.operands[0]))  # type: ignore[index]
        elif stmt.kind == "compute":
            args = [self.operand(o) for o in stmt.operands]
            self.values[stmt.result] = self.arithmetic.apply(stmt.op, args)  # type: ignore[index,arg-type]

    def run(self) -> None:
        for _, stmt, env, _ in walk_executed(self.node.body):
            self.execute(stmt, env)


def input_arrays(program: Program) -> List[str]:
    """External arrays read and never written."""
    read, written = _touched(program)
    return [a.name for a in program.arrays if a.is_external and a.name in read and a.name not in written]


def output_arrays(program: Program) -> List[str]:
    """External arrays written by some node."""
    _, written = _touched(program)
    return [a.name for a in program.arrays if a.is_external and a.name in written]


def _touched(program: Program) -> Tuple[set, set]:
    read, written = set(), set()
    for node in program.nodes:
        for site in iter_sites(node.body):
            if site.stmt.kind == "load":
                read.add(site.stmt.array)
            elif site.stmt.kind == "store":
                written.add(site.stmt.array)
    return read, written


def reference_execute(program: Program, inputs: Mapping[str, np.ndarray], integer_mode: Optional[bool] = None) -> TensorMap:
    """
    Run the program sequentially.

    Args:
        program: Validated program
        inputs: Values for every external array that is read
        integer_mode: Exact 32-bit integer arithmetic (defaults to settings)

    Returns:
        Final contents of every array

    Raises:
        ExecutionError: Missing input, out-of-bounds or uninitialized access
    """
    arithmetic = Arithmetic(settings.integer_mode if integer_mode is None else integer_mode)
    memories = allocate_memories(program, inputs, arithmetic)
    for node in program.nodes:
        NodeExecutor(node, memories, arithmetic).run()
    logger.debug(f"Reference execution of '{program.name}' finished")
    return {name: memory.data.copy() for name, memory in memories.items()}


def allocate_memories(program: Program, inputs: Mapping[str, np.ndarray], arithmetic: Arithmetic) -> Dict[str, ArrayMemory]:
    missing = [name for name in input_arrays(program) if name not in inputs]
    if missing:
        raise ExecutionError(f"missing input tensor(s): {missing}", details={"missing": missing})
    memories: Dict[str, ArrayMemory] = {}
    for decl in program.arrays:
        initial = inputs.get(decl.name) if decl.is_external else None
        if initial is not None and np.asarray(initial).size != decl.size:
            raise ExecutionError(f"input '{decl.name}' has {np.asarray(initial).size} elements, expected {decl.size}")
        memories[decl.name] = ArrayMemory(decl.name, decl.shape, arithmetic.dtype, initial)
    return memories


def random_inputs(program: Program, seed: int = 0, integer_mode: Optional[bool] = None) -> TensorMap:
    """Reproducible random values for every input array."""
    integer = settings.integer_mode if integer_mode is None else integer_mode
    rng = np.random.default_rng(seed)
    tensors: TensorMap = {}
    for name in input_arrays(program):
        shape = program.array(name).shape
        if integer:
            tensors[name] = rng.integers(-8, 9, size=shape, dtype=np.int64)
        else:
            tensors[name] = rng.uniform(-1.0, 1.0, size=shape)
    return tensors

"""
Concise constructors for programs.

Index expressions and guards are written as text::

    loop("h", 6,
         loop("w", 6,
              load("x", "pad", "h + 1", "w + 1"),
              store("out", ["h", "w"], "x")))
"""
from typing import Iterable, Optional, Sequence, Tuple, Union

from app.models.program import AffineExpr, ArrayDecl, BodyItem, Constraint, Loop, Operand, Program, Stmt, TaskNode
from app.services.parser import validate_program

IndexLike = Union[str, int, AffineExpr]
GuardLike = Union[None, str, Constraint, Sequence[Union[str, Constraint]]]


def affine(value: IndexLike) -> AffineExpr:
    if isinstance(value, AffineExpr):
        return value
    if isinstance(value, int):
        return AffineExpr.const(value)
    return AffineExpr.parse(value)


def constraints(guard: GuardLike) -> Tuple[Constraint, ...]:
    if guard is None:
        return ()
    if isinstance(guard, (str, Constraint)):
        guard = [guard]
    return tuple(g if isinstance(g, Constraint) else Constraint.parse(g) for g in guard)


def loop(var: str, upper: int, *children: BodyItem, lower: int = 0, step: int = 1) -> Loop:
    return Loop(var=var, lower=lower, upper=upper, step=step, children=tuple(children))


def load(result: str, array: str, *index: IndexLike, guard: GuardLike = None) -> Stmt:
    return Stmt(kind="load", array=array, index=tuple(affine(i) for i in index), result=result, guard=constraints(guard))


def store(array: str, index: Iterable[IndexLike], value: Operand, guard: GuardLike = None) -> Stmt:
    return Stmt(kind="store", array=array, index=tuple(affine(i) for i in index), operands=(value,), guard=constraints(guard))


def compute(result: str, op: str, *operands: Operand, guard: GuardLike = None) -> Stmt:
    return Stmt(kind="compute", op=op, operands=tuple(operands), result=result, guard=constraints(guard))  # type: ignore[arg-type]


def when(*conditions: Union[str, Constraint]) -> Stmt:
    """Guard statement: the rest of the enclosing body runs only where all conditions hold."""
    return Stmt(kind="guard", guard=constraints(list(conditions)))


def array(name: str, *shape: int, bits: int = 32, external: bool = False) -> ArrayDecl:
    return ArrayDecl(name=name, shape=tuple(shape), elem_bits=bits, placement="external" if external else "internal")


def node(name: str, *body: BodyItem) -> TaskNode:
    return TaskNode(name=name, body=tuple(body))


def program(name: str, arrays: Sequence[ArrayDecl], nodes: Sequence[TaskNode], validate: bool = True) -> Program:
    built = Program(name=name, arrays=tuple(arrays), nodes=tuple(nodes))
    if validate:
        validate_program(built)
    return built


def copy_nest(name: str, src: str, dst: str, shape: Sequence[int], vars: Optional[Sequence[str]] = None) -> TaskNode:
    """Row-major elementwise copy ``dst[...] = src[...]``."""
    names = list(vars) if vars else [f"i{d}" for d in range(len(shape))]
    body: BodyItem = store(dst, names, "v")
    inner: Tuple[BodyItem, ...] = (load("v", src, *names), body)
    for var, extent in reversed(list(zip(names, shape))):
        inner = (loop(var, extent, *inner),)
    return node(name, *inner)

"""
Affine program representation: arrays, task nodes, loop nests and statements.

All models are frozen; passes build new values instead of mutating.
"""
import re
from typing import Dict, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator


OpKind = Literal["add", "mul", "mac", "max", "div", "exp", "cmp", "copy"]
StmtKind = Literal["load", "store", "compute", "guard"]
CmpOp = Literal["eq", "ne", "ge", "gt", "le", "lt"]
Placement = Literal["external", "internal"]
Operand = Union[int, float, str]

OP_ARITY: Dict[str, int] = {
    "add": 2,
    "mul": 2,
    "mac": 3,
    "max": 2,
    "div": 2,
    "exp": 1,
    "cmp": 2,
    "copy": 1,
}

# Ops whose repeated application may be regrouped.
ASSOCIATIVE_OPS = frozenset({"add", "mul", "max", "mac"})

INF_CONSTANTS = frozenset({"inf", "-inf"})

_TERM = re.compile(r"^(?:(\d+)\*)?([A-Za-z_][A-Za-z0-9_]*)(?:\*(\d+))?$|^(\d+)$")

_CMP_TOKENS = (
    (">=", "ge"),
    ("<=", "le"),
    ("==", "eq"),
    ("!=", "ne"),
    (">", "gt"),
    ("<", "lt"),
)
_CMP_SYMBOL = {op: sym for sym, op in _CMP_TOKENS}


def is_value_id(operand: Operand) -> bool:
    """True if the operand names a scalar value rather than a constant."""
    return isinstance(operand, str) and operand not in INF_CONSTANTS


class AffineExpr(BaseModel):
    """Integer affine combination of loop variables plus a constant."""

    model_config = ConfigDict(frozen=True)

    terms: Tuple[Tuple[str, int], ...] = Field(default=(), description="(loop var, coefficient), sorted")
    constant: int = 0

    @field_validator("terms", mode="before")
    @classmethod
    def _normalize_terms(cls, value):
        if isinstance(value, Mapping):
            value = value.items()
        merged: Dict[str, int] = {}
        for var, coeff in value:
            merged[var] = merged.get(var, 0) + int(coeff)
        return tuple(sorted((v, c) for v, c in merged.items() if c != 0))

    @classmethod
    def of(cls, terms: Optional[Mapping[str, int]] = None, constant: int = 0) -> "AffineExpr":
        return cls(terms=dict(terms or {}), constant=constant)

    @classmethod
    def var(cls, name: str, coeff: int = 1, constant: int = 0) -> "AffineExpr":
        return cls(terms={name: coeff}, constant=constant)

    @classmethod
    def const(cls, value: int) -> "AffineExpr":
        return cls(constant=value)

    @classmethod
    def parse(cls, text: str) -> "AffineExpr":
        """Parse ``"h + 2*kh - 1"`` style text."""
        compact = text.replace(" ", "")
        if not compact:
            raise ValueError("empty affine expression")
        if compact[0] not in "+-":
            compact = "+" + compact
        terms: Dict[str, int] = {}
        constant = 0
        for sign, body in re.findall(r"([+-])([^+-]+)", compact):
            match = _TERM.match(body)
            if match is None:
                raise ValueError(f"invalid affine term '{body}' in '{text}'")
            factor = -1 if sign == "-" else 1
            if match.group(4) is not None:
                constant += factor * int(match.group(4))
                continue
            coeff = int(match.group(1) or match.group(3) or 1)
            name = match.group(2)
            terms[name] = terms.get(name, 0) + factor * coeff
        if "".join(sign + body for sign, body in re.findall(r"([+-])([^+-]+)", compact)) != compact:
            raise ValueError(f"invalid affine expression '{text}'")
        return cls(terms=terms, constant=constant)

    @property
    def vars(self) -> Tuple[str, ...]:
        return tuple(var for var, _ in self.terms)

    def coeff(self, var: str) -> int:
        for name, value in self.terms:
            if name == var:
                return value
        return 0

    def evaluate(self, env: Mapping[str, int]) -> int:
        total = self.constant
        for var, coeff in self.terms:
            total += coeff * env[var]
        return total

    def substitute(self, mapping: Mapping[str, "AffineExpr"]) -> "AffineExpr":
        terms: Dict[str, int] = {}
        constant = self.constant
        for var, coeff in self.terms:
            if var in mapping:
                replacement = mapping[var]
                constant += coeff * replacement.constant
                for inner, inner_coeff in replacement.terms:
                    terms[inner] = terms.get(inner, 0) + coeff * inner_coeff
            else:
                terms[var] = terms.get(var, 0) + coeff
        return AffineExpr(terms=terms, constant=constant)

    def rename(self, mapping: Mapping[str, str]) -> "AffineExpr":
        return AffineExpr(
            terms=[(mapping.get(var, var), coeff) for var, coeff in self.terms],
            constant=self.constant,
        )

    def shift(self, delta: int) -> "AffineExpr":
        return AffineExpr(terms=self.terms, constant=self.constant + delta)

    def __add__(self, other: Union["AffineExpr", int]) -> "AffineExpr":
        if isinstance(other, int):
            return self.shift(other)
        return AffineExpr(terms=self.terms + other.terms, constant=self.constant + other.constant)

    def __sub__(self, other: Union["AffineExpr", int]) -> "AffineExpr":
        if isinstance(other, int):
            return self.shift(-other)
        negated = tuple((var, -coeff) for var, coeff in other.terms)
        return AffineExpr(terms=self.terms + negated, constant=self.constant - other.constant)

    def __str__(self) -> str:
        parts = []
        for var, coeff in self.terms:
            magnitude = abs(coeff)
            text = var if magnitude == 1 else f"{magnitude}*{var}"
            parts.append(("- " if coeff < 0 else "+ ") + text)
        if self.constant or not parts:
            parts.append(("- " if self.constant < 0 else "+ ") + str(abs(self.constant)))
        rendered = " ".join(parts)
        return rendered[2:] if rendered.startswith("+ ") else "-" + rendered[2:]


class Constraint(BaseModel):
    """Affine predicate ``expr <op> 0`` over loop variables."""

    model_config = ConfigDict(frozen=True)

    expr: AffineExpr
    op: CmpOp = "ge"

    @classmethod
    def parse(cls, text: str) -> "Constraint":
        """Parse ``"h + kh >= 2"`` style text."""
        for symbol, op in _CMP_TOKENS:
            if symbol in text:
                lhs, rhs = text.split(symbol, 1)
                return cls(expr=AffineExpr.parse(lhs) - AffineExpr.parse(rhs), op=op)
        raise ValueError(f"no comparison operator in '{text}'")

    def holds(self, env: Mapping[str, int]) -> bool:
        value = self.expr.evaluate(env)
        if self.op == "ge":
            return value >= 0
        if self.op == "gt":
            return value > 0
        if self.op == "le":
            return value <= 0
        if self.op == "lt":
            return value < 0
        if self.op == "eq":
            return value == 0
        return value != 0

    def substitute(self, mapping: Mapping[str, AffineExpr]) -> "Constraint":
        return Constraint(expr=self.expr.substitute(mapping), op=self.op)

    def rename(self, mapping: Mapping[str, str]) -> "Constraint":
        return Constraint(expr=self.expr.rename(mapping), op=self.op)

    def __str__(self) -> str:
        return f"{self.expr} {_CMP_SYMBOL[self.op]} 0"


class Stmt(BaseModel):
    """Load, store, compute or guard statement."""

    model_config = ConfigDict(frozen=True)

    kind: StmtKind
    array: Optional[str] = None
    index: Tuple[AffineExpr, ...] = ()
    op: Optional[OpKind] = None
    operands: Tuple[Operand, ...] = ()
    result: Optional[str] = None
    guard: Tuple[Constraint, ...] = ()

    @property
    def is_access(self) -> bool:
        return self.kind in ("load", "store")

    @property
    def value_inputs(self) -> Tuple[str, ...]:
        """Scalar value ids read by this statement."""
        return tuple(o for o in self.operands if is_value_id(o))

    def holds(self, env: Mapping[str, int]) -> bool:
        return all(c.holds(env) for c in self.guard)

    def substitute(self, mapping: Mapping[str, AffineExpr]) -> "Stmt":
        return self.model_copy(
            update={
                "index": tuple(e.substitute(mapping) for e in self.index),
                "guard": tuple(c.substitute(mapping) for c in self.guard),
            }
        )


class LoopDirective(BaseModel):
    """Per-loop scheduling decision."""

    model_config = ConfigDict(frozen=True)

    tile: int = Field(default=1, ge=1, description="Tile factor (divides the trip count)")
    unroll: int = Field(default=1, ge=1, description="Unroll factor")
    pipeline: bool = False
    ii: Optional[int] = Field(default=None, ge=1, description="Requested initiation interval")


class Loop(BaseModel):
    """Counted loop with constant bounds (upper exclusive)."""

    model_config = ConfigDict(frozen=True)

    var: str
    lower: int = 0
    upper: int
    step: int = 1
    children: Tuple[Union["Loop", Stmt], ...] = ()
    annotation: Optional[LoopDirective] = None

    @property
    def trip_count(self) -> int:
        return max(0, -(-(self.upper - self.lower) // self.step))

    def values(self) -> range:
        return range(self.lower, self.upper, self.step)


Loop.model_rebuild()

BodyItem = Union[Loop, Stmt]


class ArrayDecl(BaseModel):
    """Named dense array."""

    model_config = ConfigDict(frozen=True)

    name: str
    shape: Tuple[int, ...]
    elem_bits: int = 32
    placement: Placement = "internal"
    partition: Tuple[int, ...] = Field(default=(), description="Cyclic partition factor per dimension")

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        total = 1
        for extent in self.shape:
            total *= extent
        return total

    @property
    def size_bytes(self) -> int:
        return -(-self.size * self.elem_bits // 8)

    @property
    def is_external(self) -> bool:
        return self.placement == "external"


class TaskNode(BaseModel):
    """A dataflow task: a named loop-nest body."""

    model_config = ConfigDict(frozen=True)

    name: str
    body: Tuple[BodyItem, ...] = ()


class Program(BaseModel):
    """Arrays plus task nodes in sequential (reference) order."""

    model_config = ConfigDict(frozen=True)

    name: str
    arrays: Tuple[ArrayDecl, ...] = ()
    nodes: Tuple[TaskNode, ...] = ()

    def array(self, name: str) -> ArrayDecl:
        for decl in self.arrays:
            if decl.name == name:
                return decl
        raise KeyError(name)

    def node(self, name: str) -> TaskNode:
        for task in self.nodes:
            if task.name == name:
                return task
        raise KeyError(name)

    @property
    def array_names(self) -> Tuple[str, ...]:
        return tuple(a.name for a in self.arrays)

    @property
    def node_names(self) -> Tuple[str, ...]:
        return tuple(n.name for n in self.nodes)

"""
Program and tensor (de)serialization.

JSON layout::

    {"name": ..., "arrays": [{"name", "shape", "elem_bits", "placement"}],
     "nodes": [{"name", "body": [{"loop": {...}} | {"stmt": {...}}]}]}

Index entries are ``{var: coeff, ..., "const": c}`` objects.
"""
import json
from typing import Any, Dict, List, Mapping, Sequence, Set

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from app.models.program import (
    OP_ARITY,
    AffineExpr,
    ArrayDecl,
    BodyItem,
    Constraint,
    Loop,
    LoopDirective,
    Program,
    Stmt,
    TaskNode,
)
from app.utils.errors import ProgramParseError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

TensorMap = Dict[str, np.ndarray]


def parse_program(text: str) -> Program:
    """
    Parse and validate program JSON text.

    Args:
        text: Program description

    Returns:
        Validated Program

    Raises:
        ProgramParseError: On malformed JSON or any invariant violation
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProgramParseError(e.msg, location=f"line {e.lineno} column {e.colno}")
    program = program_from_dict(data)
    logger.debug(f"Parsed program '{program.name}' with {len(program.nodes)} node(s)")
    return program


def program_from_dict(data: Any) -> Program:
    """Build a validated Program from decoded JSON."""
    if not isinstance(data, dict):
        raise ProgramParseError("top level must be an object", location="$")
    name = _require(data, "name", "$", str)
    arrays = [_array_from_dict(a, f"$.arrays[{i}]") for i, a in enumerate(_require(data, "arrays", "$", list))]
    nodes = [_node_from_dict(n, f"$.nodes[{i}]") for i, n in enumerate(_require(data, "nodes", "$", list))]
    program = Program(name=name, arrays=tuple(arrays), nodes=tuple(nodes))
    validate_program(program)
    return program


def serialize_program(program: Program) -> str:
    """Program JSON text (round-trips through parse_program)."""
    return json.dumps(program_to_dict(program), indent=2)


def program_to_dict(program: Program) -> Dict[str, Any]:
    return {
        "name": program.name,
        "arrays": [_array_to_dict(a) for a in program.arrays],
        "nodes": [{"name": n.name, "body": [_item_to_dict(i) for i in n.body]} for n in program.nodes],
    }


def validate_program(program: Program) -> None:
    """
    Check the program invariants.

    Raises:
        ProgramParseError: With a JSON-path location of the first problem
    """
    decls: Dict[str, ArrayDecl] = {}
    for i, decl in enumerate(program.arrays):
        where = f"$.arrays[{i}]"
        if decl.name in decls:
            raise ProgramParseError(f"duplicate array '{decl.name}'", location=where)
        if not decl.shape or any(d < 1 for d in decl.shape):
            raise ProgramParseError(f"array '{decl.name}' needs a non-empty shape of positive extents", location=where)
        if decl.elem_bits < 1:
            raise ProgramParseError("elem_bits must be positive", location=where)
        if decl.partition and len(decl.partition) != decl.rank:
            raise ProgramParseError("partition arity must equal rank", location=where)
        decls[decl.name] = decl

    seen_nodes: Set[str] = set()
    touching: Dict[str, List[str]] = {}
    written: Dict[str, Set[str]] = {}
    for i, node in enumerate(program.nodes):
        where = f"$.nodes[{i}]"
        if node.name in seen_nodes:
            raise ProgramParseError(f"duplicate node '{node.name}'", location=where)
        seen_nodes.add(node.name)
        _validate_body(node.body, f"{where}.body", (), decls, node.name, touching, written)

    for array, nodes in touching.items():
        if decls[array].is_external and len(nodes) > 1 and written.get(array):
            raise ProgramParseError(
                f"external array '{array}' is written by {sorted(written[array])} and touched by {nodes}; "
                "external arrays cannot connect nodes",
                location="$.arrays",
            )


def parse_tensors(text: str, program: Program, integer_mode: bool = False) -> TensorMap:
    """
    Parse a tensor file (array name -> flat row-major values).

    Raises:
        ProgramParseError: Unknown array or wrong element count
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProgramParseError(e.msg, location=f"line {e.lineno} column {e.colno}")
    if not isinstance(data, dict):
        raise ProgramParseError("tensor file must be an object", location="$")
    tensors: TensorMap = {}
    for name, values in data.items():
        try:
            decl = program.array(name)
        except KeyError:
            raise ProgramParseError(f"unknown array '{name}'", location=f"$.{name}")
        flat = np.asarray(values, dtype=np.int64 if integer_mode else np.float64).reshape(-1)
        if flat.size != decl.size:
            raise ProgramParseError(f"expected {decl.size} values, got {flat.size}", location=f"$.{name}")
        tensors[name] = flat.reshape(decl.shape)
    return tensors


def tensors_to_dict(tensors: Mapping[str, np.ndarray]) -> Dict[str, List]:
    return {name: np.asarray(t).reshape(-1).tolist() for name, t in tensors.items()}


# ---------------------------------------------------------------------------
# decoding helpers
# ---------------------------------------------------------------------------


def _require(data: Dict, key: str, where: str, kind: type) -> Any:
    if key not in data:
        raise ProgramParseError(f"missing field '{key}'", location=where)
    value = data[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ProgramParseError(f"field '{key}' must be an integer constant", location=f"{where}.{key}")
    if kind is not int and not isinstance(value, kind):
        raise ProgramParseError(f"field '{key}' must be {kind.__name__}", location=f"{where}.{key}")
    return value


def _array_from_dict(data: Any, where: str) -> ArrayDecl:
    if not isinstance(data, dict):
        raise ProgramParseError("array entry must be an object", location=where)
    try:
        return ArrayDecl(
            name=_require(data, "name", where, str),
            shape=tuple(_require(data, "shape", where, list)),
            elem_bits=data.get("elem_bits", 32),
            placement=data.get("placement", "internal"),
            partition=tuple(data.get("partition", ())),
        )
    except PydanticValidationError as e:
        raise ProgramParseError(_first_error(e), location=where)


def _node_from_dict(data: Any, where: str) -> TaskNode:
    if not isinstance(data, dict):
        raise ProgramParseError("node entry must be an object", location=where)
    name = _require(data, "name", where, str)
    body = _require(data, "body", where, list)
    return TaskNode(name=name, body=tuple(_item_from_dict(item, f"{where}.body[{i}]") for i, item in enumerate(body)))


def _item_from_dict(data: Any, where: str) -> BodyItem:
    if not isinstance(data, dict) or len(data) != 1 or not ({"loop", "stmt"} & data.keys()):
        raise ProgramParseError("body item must be {'loop': ...} or {'stmt': ...}", location=where)
    if "loop" in data:
        return _loop_from_dict(data["loop"], f"{where}.loop")
    return _stmt_from_dict(data["stmt"], f"{where}.stmt")


def _loop_from_dict(data: Any, where: str) -> Loop:
    if not isinstance(data, dict):
        raise ProgramParseError("loop must be an object", location=where)
    children = _require(data, "children", where, list)
    annotation = None
    if data.get("annotations") is not None:
        try:
            annotation = LoopDirective(**data["annotations"])
        except (PydanticValidationError, TypeError) as e:
            message = _first_error(e) if isinstance(e, PydanticValidationError) else str(e)
            raise ProgramParseError(message, location=f"{where}.annotations")
    step = data.get("step", 1)
    if isinstance(step, bool) or not isinstance(step, int):
        raise ProgramParseError("field 'step' must be an integer constant", location=f"{where}.step")
    return Loop(
        var=_require(data, "var", where, str),
        lower=_require(data, "lower", where, int),
        upper=_require(data, "upper", where, int),
        step=step,
        children=tuple(_item_from_dict(c, f"{where}.children[{i}]") for i, c in enumerate(children)),
        annotation=annotation,
    )


def _affine_from_dict(data: Any, where: str) -> AffineExpr:
    if isinstance(data, int) and not isinstance(data, bool):
        return AffineExpr.const(data)
    if isinstance(data, str):
        try:
            return AffineExpr.parse(data)
        except ValueError as e:
            raise ProgramParseError(str(e), location=where)
    if not isinstance(data, dict):
        raise ProgramParseError("affine expression must be an object", location=where)
    terms = {}
    constant = 0
    for key, value in data.items():
        if isinstance(value, bool) or not isinstance(value, int):
            raise ProgramParseError(f"coefficient of '{key}' must be an integer", location=where)
        if key == "const":
            constant = value
        else:
            terms[key] = value
    return AffineExpr.of(terms, constant)


def _constraint_from_dict(data: Any, where: str) -> Constraint:
    if isinstance(data, str):
        try:
            return Constraint.parse(data)
        except ValueError as e:
            raise ProgramParseError(str(e), location=where)
    if not isinstance(data, dict) or "expr" not in data:
        raise ProgramParseError("guard entry must be {'expr': ..., 'op': ...} or text", location=where)
    op = data.get("op", "ge")
    if op not in ("eq", "ne", "ge", "gt", "le", "lt"):
        raise ProgramParseError(f"unknown comparison '{op}'", location=f"{where}.op")
    return Constraint(expr=_affine_from_dict(data["expr"], f"{where}.expr"), op=op)


def _stmt_from_dict(data: Any, where: str) -> Stmt:
    if not isinstance(data, dict):
        raise ProgramParseError("stmt must be an object", location=where)
    kind = _require(data, "kind", where, str)
    index = [_affine_from_dict(e, f"{where}.index[{i}]") for i, e in enumerate(data.get("index", []))]
    guard = [_constraint_from_dict(c, f"{where}.guard[{i}]") for i, c in enumerate(data.get("guard", []))]
    operands = data.get("operands", [])
    if not isinstance(operands, list):
        raise ProgramParseError("operands must be a list", location=f"{where}.operands")
    for i, operand in enumerate(operands):
        if isinstance(operand, bool) or not isinstance(operand, (int, float, str)):
            raise ProgramParseError("operand must be a value id or a number", location=f"{where}.operands[{i}]")
    try:
        return Stmt(
            kind=kind,
            array=data.get("array"),
            index=tuple(index),
            op=data.get("op"),
            operands=tuple(operands),
            result=data.get("result"),
            guard=tuple(guard),
        )
    except PydanticValidationError as e:
        raise ProgramParseError(_first_error(e), location=where)


def _first_error(error: PydanticValidationError) -> str:
    first = error.errors()[0]
    field = ".".join(str(p) for p in first.get("loc", ()))
    return f"{field}: {first.get('msg')}" if field else str(first.get("msg"))


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------


def _validate_body(
    items: Sequence[BodyItem],
    where: str,
    enclosing: Sequence[str],
    decls: Mapping[str, ArrayDecl],
    node: str,
    touching: Dict[str, List[str]],
    written: Dict[str, Set[str]],
) -> None:
    for i, item in enumerate(items):
        if isinstance(item, Loop):
            here = f"{where}[{i}].loop"
            if item.var in enclosing:
                raise ProgramParseError(f"loop variable '{item.var}' shadows an enclosing loop", location=here)
            if item.step < 1:
                raise ProgramParseError("step must be positive", location=f"{here}.step")
            if item.trip_count < 1:
                raise ProgramParseError(f"loop '{item.var}' has no iterations", location=here)
            _validate_body(item.children, f"{here}.children", tuple(enclosing) + (item.var,), decls, node, touching, written)
        else:
            _validate_stmt(item, f"{where}[{i}].stmt", enclosing, decls, node, touching, written)


def _validate_stmt(
    stmt: Stmt,
    where: str,
    enclosing: Sequence[str],
    decls: Mapping[str, ArrayDecl],
    node: str,
    touching: Dict[str, List[str]],
    written: Dict[str, Set[str]],
) -> None:
    for i, c in enumerate(stmt.guard):
        _check_vars(c.expr, f"{where}.guard[{i}]", enclosing)
    if stmt.kind == "guard":
        if not stmt.guard:
            raise ProgramParseError("guard statement needs a predicate", location=where)
        return
    if stmt.kind in ("load", "store"):
        if stmt.array is None:
            raise ProgramParseError(f"{stmt.kind} needs an array", location=where)
        if stmt.array not in decls:
            raise ProgramParseError(f"undeclared array '{stmt.array}'", location=f"{where}.array")
        rank = decls[stmt.array].rank
        if len(stmt.index) != rank:
            raise ProgramParseError(
                f"rank mismatch: '{stmt.array}' has rank {rank}, indexed with {len(stmt.index)}",
                location=f"{where}.index",
            )
        for i, e in enumerate(stmt.index):
            _check_vars(e, f"{where}.index[{i}]", enclosing)
        users = touching.setdefault(stmt.array, [])
        if node not in users:
            users.append(node)
        if stmt.kind == "load" and not stmt.result:
            raise ProgramParseError("load needs a result value id", location=where)
        if stmt.kind == "store":
            written.setdefault(stmt.array, set()).add(node)
            if len(stmt.operands) != 1:
                raise ProgramParseError("store needs exactly one operand", location=f"{where}.operands")
        return
    if stmt.op is None:
        raise ProgramParseError("compute needs an op", location=where)
    if len(stmt.operands) != OP_ARITY[stmt.op]:
        raise ProgramParseError(
            f"op '{stmt.op}' takes {OP_ARITY[stmt.op]} operand(s), got {len(stmt.operands)}",
            location=f"{where}.operands",
        )
    if not stmt.result:
        raise ProgramParseError("compute needs a result value id", location=where)


def _check_vars(expr: AffineExpr, where: str, enclosing: Sequence[str]) -> None:
    for var in expr.vars:
        if var not in enclosing:
            raise ProgramParseError(f"'{var}' is not an enclosing loop variable", location=where)


# ---------------------------------------------------------------------------
# encoding helpers
# ---------------------------------------------------------------------------


def _affine_to_dict(expr: AffineExpr) -> Dict[str, int]:
    out = {var: coeff for var, coeff in expr.terms}
    out["const"] = expr.constant
    return out


def _array_to_dict(decl: ArrayDecl) -> Dict[str, Any]:
    out: Dict[str, Any] = {
        "name": decl.name,
        "shape": list(decl.shape),
        "elem_bits": decl.elem_bits,
        "placement": decl.placement,
    }
    if decl.partition:
        out["partition"] = list(decl.partition)
    return out


def _item_to_dict(item: BodyItem) -> Dict[str, Any]:
    if isinstance(item, Loop):
        loop: Dict[str, Any] = {
            "var": item.var,
            "lower": item.lower,
            "upper": item.upper,
            "step": item.step,
            "children": [_item_to_dict(c) for c in item.children],
        }
        if item.annotation is not None:
            loop["annotations"] = item.annotation.model_dump(exclude_none=True)
        return {"loop": loop}
    stmt: Dict[str, Any] = {"kind": item.kind}
    if item.array is not None:
        stmt["array"] = item.array
    if item.index:
        stmt["index"] = [_affine_to_dict(e) for e in item.index]
    if item.op is not None:
        stmt["op"] = item.op
    if item.operands:
        stmt["operands"] = list(item.operands)
    if item.result is not None:
        stmt["result"] = item.result
    if item.guard:
        stmt["guard"] = [{"expr": _affine_to_dict(c.expr), "op": c.op} for c in item.guard]
    return {"stmt": stmt}

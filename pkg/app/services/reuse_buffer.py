"""
Line/window reuse buffers for stencil consumers.

A consumer reading ``A[..][h + kh][w + kw]`` touches most input elements
KH x KW times. The rewrite walks the input once, row-major, keeping KH
rows in a line buffer and a KH x KW window that shifts one column per
element; the original computation then reads the window.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

from app.models.memory import ReusePlan
from app.models.program import AffineExpr, ArrayDecl, BodyItem, Constraint, Loop, Stmt, TaskNode
from app.services.access_analysis import has_loop_carried_dependence
from app.services.graph_builder import fresh_name
from app.services.loop_tree import Site, access_sites, iter_loops, iter_sites, map_stmts, rebuild_chain, site_executions
from app.utils.errors import TransformError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

REGIONS = ("line_update", "window_shift", "compute")


@dataclass(frozen=True)
class StencilForm:
    """Recognized ``A[lead..][h + kh][w + kw]`` read."""

    site: Site
    h: Loop
    w: Loop
    kh: Loop
    kw: Loop
    above: Tuple[Loop, ...]
    lead: Tuple[Tuple[str, object], ...]  # ("outer", var) | ("reduction", var) | ("const", value)
    h_key: str
    w_key: str

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.kh.trip_count, self.kw.trip_count


def _reject(array: str, message: str) -> TransformError:
    return TransformError("reuse_infeasible", f"no reuse buffer for '{array}': {message}", details={"array": array})


def _split_window(expr: AffineExpr, depth_of: Dict[str, int]) -> Optional[Tuple[str, str]]:
    """(outer var, window var) for ``x + k``, else None."""
    if expr.constant != 0 or len(expr.terms) != 2 or any(c != 1 for _, c in expr.terms):
        return None
    a, b = expr.vars
    if a not in depth_of or b not in depth_of:
        return None
    return (a, b) if depth_of[a] < depth_of[b] else (b, a)


def stencil_form(node: TaskNode, array: str, shape: Sequence[int]) -> StencilForm:
    """
    Recognize a stencil read of ``array`` in ``node``.

    Raises:
        TransformError: ``reuse_infeasible`` when the read is not a unit-stride
            two-dimensional window over the whole array
    """
    sites = access_sites(node, array, "read")
    if len(sites) != 1:
        raise _reject(array, f"expected one read statement, found {len(sites)}")
    site = sites[0]
    if site.gates:
        raise _reject(array, "guarded stencil read")
    if len(shape) < 2:
        raise _reject(array, "needs at least two dimensions")
    loops = list(site.loops)
    depth_of = {loop.var: d for d, loop in enumerate(loops)}
    rows = _split_window(site.stmt.index[-2], depth_of)
    cols = _split_window(site.stmt.index[-1], depth_of)
    if rows is None or cols is None:
        raise _reject(array, "last two indices are not of the form outer + window")
    h, kh = (loops[depth_of[v]] for v in rows)
    w, kw = (loops[depth_of[v]] for v in cols)
    ih = depth_of[h.var]
    if depth_of[w.var] != ih + 1 or h.children != (w,):
        raise _reject(array, "row and column loops must be directly nested")
    if depth_of[kh.var] <= ih + 1 or depth_of[kw.var] <= ih + 1:
        raise _reject(array, "window loops must sit inside the column loop")
    if node.body != (loops[0],) or any(loops[i].children != (loops[i + 1],) for i in range(ih)):
        raise _reject(array, "loops above the row loop must form a perfect nest")
    for loop in (h, w, kh, kw):
        if loop.lower != 0 or loop.step != 1:
            raise _reject(array, f"loop '{loop.var}' is not zero-based unit-stride")
    if shape[-2] != h.trip_count + kh.trip_count - 1 or shape[-1] != w.trip_count + kw.trip_count - 1:
        raise _reject(array, "window does not cover the whole array")

    above = tuple(loops[:ih])
    lead: List[Tuple[str, object]] = []
    for j, expr in enumerate(site.stmt.index[:-2]):
        if not expr.terms:
            if not 0 <= expr.constant < shape[j]:
                raise _reject(array, f"constant index {expr.constant} out of range")
            lead.append(("const", expr.constant))
            continue
        if len(expr.terms) != 1 or expr.terms[0][1] != 1 or expr.constant != 0:
            raise _reject(array, f"leading index {expr} is not a plain loop variable")
        var = expr.vars[0]
        loop = loops[depth_of[var]]
        if loop.lower != 0 or loop.step != 1 or loop.trip_count != shape[j]:
            raise _reject(array, f"loop '{var}' does not span dimension {j}")
        if depth_of[var] < ih:
            lead.append(("outer", var))
        elif depth_of[var] > ih + 1:
            lead.append(("reduction", var))
        else:
            raise _reject(array, f"leading index uses window loop '{var}'")
    return StencilForm(
        site=site,
        h=h,
        w=w,
        kh=kh,
        kw=kw,
        above=above,
        lead=tuple(lead),
        h_key=site.keys[ih],
        w_key=site.keys[ih + 1],
    )


def is_stencil_consumer(node: TaskNode, array: str, shape: Sequence[int]) -> bool:
    try:
        stencil_form(node, array, shape)
    except TransformError:
        return False
    return True


def reuse_buffer_decls(plan: ReusePlan, elem_bits: int = 32) -> List[ArrayDecl]:
    decls = []
    if plan.line_buffer:
        decls.append(ArrayDecl(name=plan.line_buffer, shape=plan.line_buffer_shape, elem_bits=elem_bits))
    if plan.window_buffer:
        decls.append(ArrayDecl(name=plan.window_buffer, shape=plan.window_buffer_shape, elem_bits=elem_bits))
    return decls


def _values(node: TaskNode) -> Set[str]:
    return {s.stmt.result for s in iter_sites(node.body) if s.stmt.result}


def _ge(expr: AffineExpr) -> Constraint:
    return Constraint(expr=expr, op="ge")


def _idx(*parts) -> Tuple[AffineExpr, ...]:
    return tuple(p if isinstance(p, AffineExpr) else (AffineExpr.var(p) if isinstance(p, str) else AffineExpr.const(p)) for p in parts)


def _wrap(loops: Sequence[Loop], items: Sequence[BodyItem]) -> List[BodyItem]:
    if not loops:
        return list(items)
    return [rebuild_chain(loops, items)]


def generate_reuse_buffers(node: TaskNode, array: str, shape: Sequence[int]) -> Tuple[TaskNode, ReusePlan]:
    """
    Rewrite a stencil consumer to read every element of ``array`` once.

    The new nest walks the input row-major (outer loops, ``h_in``, ``w_in``)
    and runs three regions per element: line-buffer update, window shift,
    and the original computation on the window once a full window exists.

    Args:
        node: Consumer node
        array: Array read through a window
        shape: Declared shape of the array

    Returns:
        Rewritten node and its ReusePlan (a 1x1 window returns the node unchanged)

    Raises:
        TransformError: ``reuse_infeasible`` when the read is not a stencil or
            the row/column loops cannot be reordered
    """
    form = stencil_form(node, array, shape)
    reads_before = site_executions(form.site)
    KH, KW = form.kernel
    if KH == 1 and KW == 1:
        return node, ReusePlan(array=array, kernel=(1, 1), reads_before=reads_before, reads_after=reads_before, degenerate=True)

    outer_vars = {v for kind, v in form.lead if kind == "outer"}
    kept = [l for l in form.above if l.var in outer_vars]
    moved = [l for l in form.above if l.var not in outer_vars]
    reordered = [form.site.keys[d] for d, loop in enumerate(form.above) if loop.var not in outer_vars]
    for key in reordered + [form.h_key, form.w_key]:
        if has_loop_carried_dependence(node, key, ignore_reductions=True):
            raise _reject(array, f"loop '{key}' carries a dependence and cannot be reordered")

    taken_vars = {loop.var for _, loop, _ in iter_loops(node.body)}

    def fresh_var(base: str) -> str:
        name = fresh_name(taken_vars, base)
        taken_vars.add(name)
        return name

    taken_values = _values(node)

    def fresh_value(base: str) -> str:
        name = fresh_name(taken_values, base)
        taken_values.add(name)
        return name

    h_in, w_in = fresh_var(f"{form.h.var}_in"), fresh_var(f"{form.w.var}_in")
    red = [(j, v) for j, (kind, v) in enumerate(form.lead) if kind == "reduction"]
    red_extent = [shape[j] for j, _ in red]
    ld_vars = [fresh_var(f"{v}_ld") for _, v in red]
    win_vars = [fresh_var(f"{v}_w") for _, v in red]
    kh_sh, kh_w, kw_sh = fresh_var(f"{form.kh.var}_sh"), fresh_var(f"{form.kh.var}_w"), fresh_var(f"{form.kw.var}_sh")
    Hp, Wp = shape[-2], shape[-1]
    hin, win = AffineExpr.var(h_in), AffineExpr.var(w_in)

    lb = f"{node.name}_{array}_lb"
    wb = f"{node.name}_{array}_wb"
    lb_shape = tuple(red_extent) + (KH, Wp)
    wb_shape = tuple(red_extent) + (KH, KW)

    lead_index: List[AffineExpr] = []
    ld_iter = iter(ld_vars)
    for kind, v in form.lead:
        if kind == "const":
            lead_index.append(AffineExpr.const(v))  # type: ignore[arg-type]
        elif kind == "outer":
            lead_index.append(AffineExpr.var(v))  # type: ignore[arg-type]
        else:
            lead_index.append(AffineExpr.var(next(ld_iter)))

    # line buffer update
    fresh_in, shifted = fresh_value(f"{array}_in"), fresh_value(f"{array}_lb_v")
    row_ok = _ge(hin + AffineExpr.var(kh_sh) - (KH - 1))
    line: List[BodyItem] = [Stmt(kind="load", array=array, index=tuple(lead_index) + (hin, win), result=fresh_in)]
    if KH > 1:
        line.append(
            Loop(
                var=kh_sh,
                upper=KH - 1,
                children=(
                    Stmt(kind="load", array=lb, index=_idx(*ld_vars, AffineExpr.var(kh_sh) + 1, w_in), result=shifted, guard=(row_ok,)),
                    Stmt(kind="store", array=lb, index=_idx(*ld_vars, kh_sh, w_in), operands=(shifted,), guard=(row_ok,)),
                ),
            )
        )
    line.append(Stmt(kind="store", array=lb, index=_idx(*ld_vars, KH - 1, w_in), operands=(fresh_in,)))
    region_line = _wrap([Loop(var=v, upper=n) for v, n in zip(ld_vars, red_extent)], line)

    # window shift
    win_v, col_v = fresh_value(f"{array}_wb_v"), fresh_value(f"{array}_col")
    row_valid = _ge(hin + AffineExpr.var(kh_w) - (KH - 1))
    col_ok = _ge(win + AffineExpr.var(kw_sh) - (KW - 1))
    column: List[BodyItem] = []
    if KW > 1:
        column.append(
            Loop(
                var=kw_sh,
                upper=KW - 1,
                children=(
                    Stmt(kind="load", array=wb, index=_idx(*win_vars, kh_w, AffineExpr.var(kw_sh) + 1), result=win_v, guard=(col_ok, row_valid)),
                    Stmt(kind="store", array=wb, index=_idx(*win_vars, kh_w, kw_sh), operands=(win_v,), guard=(col_ok, row_valid)),
                ),
            )
        )
    column.append(Stmt(kind="load", array=lb, index=_idx(*win_vars, kh_w, w_in), result=col_v, guard=(row_valid,)))
    column.append(Stmt(kind="store", array=wb, index=_idx(*win_vars, kh_w, KW - 1), operands=(col_v,), guard=(row_valid,)))
    region_window = _wrap([Loop(var=v, upper=n) for v, n in zip(win_vars, red_extent)], [Loop(var=kh_w, upper=KH, children=tuple(column))])

    # compute on the window
    mapping = {form.h.var: hin - (KH - 1), form.w.var: win - (KW - 1)}
    red_window = _idx(*(v for _, v in red), form.kh.var, form.kw.var)
    stencil = form.site.stmt

    def to_window(stmt: Stmt) -> Stmt:
        if stmt == stencil:
            return Stmt(kind="load", array=wb, index=red_window, result=stmt.result)
        return stmt.substitute(mapping)

    compute_body = map_stmts(form.w.children, to_window)
    full_window = Stmt(kind="guard", guard=(_ge(hin - (KH - 1)), _ge(win - (KW - 1))))
    region_compute = [full_window] + _wrap(moved, compute_body)

    w_body = region_line + region_window + region_compute
    nest = rebuild_chain(kept + [Loop(var=h_in, upper=Hp), Loop(var=w_in, upper=Wp)], w_body)
    rewritten = node.model_copy(update={"body": (nest,)})

    reads_after = Hp * Wp
    for loop in kept:
        reads_after *= loop.trip_count
    for n in red_extent:
        reads_after *= n
    plan = ReusePlan(
        array=array,
        line_buffer=lb,
        line_buffer_shape=lb_shape,
        window_buffer=wb,
        window_buffer_shape=wb_shape,
        kernel=(KH, KW),
        rewritten_regions=REGIONS,
        reads_before=reads_before,
        reads_after=reads_after,
    )
    logger.info(f"Reuse buffers for {node.name}:{array}: window {KH}x{KW}, reads {reads_before} -> {reads_after}")
    return rewritten, plan

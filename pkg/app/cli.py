"""
Command-line driver: ``analyze``, ``opt`` and ``simulate``.

JSON goes to stdout, logs to stderr. Compiler errors print
``{"error", "message", "details"}`` to stderr and exit with the error's
exit code.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

from app.config import settings
from app.models.program import Program
from app.models.schedule import ResourceVector
from app.services.interpreter import random_inputs, reference_execute
from app.services.parser import parse_program, parse_tensors
from app.services.perf_model import load_cost_table, load_device
from app.services.pipeline import STAGES, PipelineOptions, analyze_program, as_written_graph, run_pipeline
from app.services.report_builder import emit_report, write_artifacts
from app.services.simulator import compare_with_reference, detect_deadlock, simulate, write_occupancy_csv, write_trace_jsonl
from app.utils.errors import CompilerError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

BUDGET_KEYS = {"dsp": "dsp", "bram": "bram18k", "bram18k": "bram18k", "lut": "lut", "ff": "ff"}


def parse_budget(text: Optional[str], device: ResourceVector) -> ResourceVector:
    """``dsp=900,bram=2000`` over the device limits."""
    if not text:
        return device
    values = device.model_dump()
    for part in text.split(","):
        key, _, raw = part.partition("=")
        field = BUDGET_KEYS.get(key.strip().lower())
        if field is None or not raw.strip().isdigit():
            raise CompilerError(f"bad budget entry '{part}'", status_code=400, error_code="INVALID_OPTION")
        values[field] = int(raw)
    return ResourceVector(**values)


def parse_depths(entries: Optional[List[str]]) -> Dict[str, int]:
    depths: Dict[str, int] = {}
    for entry in entries or []:
        array, _, raw = entry.partition("=")
        if not array or not raw.isdigit() or int(raw) < 1:
            raise CompilerError(f"bad FIFO depth '{entry}'", status_code=400, error_code="INVALID_OPTION")
        depths[array] = int(raw)
    return depths


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CompilerError(f"cannot read {path}: {e}", status_code=400, error_code="READ_FAILED", exit_code=2)


def _inputs(args: argparse.Namespace, program: Program, integer: bool):
    if args.inputs:
        return parse_tensors(_read(args.inputs), program, integer)
    return random_inputs(program, args.seed, integer)


def _print(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, default=str) + "\n")


def cmd_analyze(args: argparse.Namespace) -> int:
    program = parse_program(_read(args.program))
    report = analyze_program(program)
    _print(report.model_dump())
    return 0


def cmd_opt(args: argparse.Namespace) -> int:
    program = parse_program(_read(args.program))
    integer = settings.integer_mode if args.numeric_mode is None else args.numeric_mode == "int"
    options = PipelineOptions(
        max_parallel=args.max_parallel,
        threshold=args.threshold,
        budget=parse_budget(args.budget, load_device(args.device)),
        enable_downscale=False if args.no_downscale else None,
        enable_upscale=not args.no_upscale,
        hbm_channels=args.hbm_channels,
        fifo_depths=parse_depths(args.fifo_depth),
        stop_after=args.stop_after,
        simulate=args.simulate,
        seed=args.seed,
        integer_mode=integer,
    )
    inputs = _inputs(args, program, integer) if args.simulate else None
    artifacts = run_pipeline(program, options, load_cost_table(args.cost_table), inputs)
    if args.emit:
        write_artifacts(artifacts, args.emit)
    _print(emit_report(artifacts))
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    """Simulate the program as written with one buffer kind on every edge."""
    program = parse_program(_read(args.program))
    integer = settings.integer_mode if args.numeric_mode is None else args.numeric_mode == "int"
    costs = load_cost_table(args.cost_table)
    graph = as_written_graph(program, args.buffer, args.depth)
    tensors = _inputs(args, graph.as_program(), integer)
    result = simulate(graph, None, tensors, costs, max_cycles=args.max_cycles, integer_mode=integer)
    payload = result.summary()
    if result.outcome == "deadlock":
        payload["deadlock"] = detect_deadlock(result).model_dump()
    else:
        payload["reference_match"] = compare_with_reference(
            result, reference_execute(graph.as_program(), tensors, integer), "exact" if integer else "approx"
        )
    if args.emit:
        Path(args.emit).mkdir(parents=True, exist_ok=True)
        write_trace_jsonl(result, str(Path(args.emit) / "trace.jsonl"))
        write_occupancy_csv(result, str(Path(args.emit) / "occupancy.csv"))
    _print(payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dataflow-opt", description="Dataflow pipeline compiler for affine loop programs")
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="Report coarse and fine violations without transforming")
    analyze.add_argument("program")
    analyze.set_defaults(handler=cmd_analyze)

    for name, handler, text in (
        ("opt", cmd_opt, "Run the full optimization flow"),
        ("simulate", cmd_simulate, "Simulate the program as written"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("program")
        p.add_argument("--inputs", help="Tensor file (array -> flat values); random when omitted")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--numeric-mode", choices=("float", "int"), default=None)
        p.add_argument("--cost-table", default=settings.COST_TABLE_PATH)
        p.add_argument("--emit", help="Directory for artifacts")
        p.set_defaults(handler=handler)
        if name == "opt":
            p.add_argument("--max-parallel", type=int, default=settings.MAX_PARALLEL)
            p.add_argument("--threshold", type=float, default=settings.N_THRESHOLD)
            p.add_argument("--budget", help="e.g. dsp=900,bram=2000,lut=400000,ff=800000")
            p.add_argument("--device", default=settings.DEVICE_PATH)
            p.add_argument("--no-downscale", action="store_true")
            p.add_argument("--no-upscale", action="store_true")
            p.add_argument("--hbm-channels", type=int, default=settings.HBM_CHANNELS)
            p.add_argument("--fifo-depth", action="append", metavar="ARRAY=N")
            p.add_argument("--stop-after", choices=STAGES)
            p.add_argument("--simulate", action="store_true")
        else:
            p.add_argument("--buffer", choices=("fifo", "pingpong", "sequential"), default="fifo")
            p.add_argument("--depth", type=int, default=settings.FIFO_DEFAULT_DEPTH)
            p.add_argument("--max-cycles", type=int, default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except CompilerError as e:
        logger.error(f"{e.error_code}: {e.message}")
        sys.stderr.write(json.dumps({"error": e.error_code, "message": e.message, "details": e.details}, default=str) + "\n")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

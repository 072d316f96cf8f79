"""
Report generation (JSON).
"""
import json
from collections import Counter
from pathlib import Path
from typing import Any, Dict, Optional

from app.models.graph import DataflowGraph
from app.services.parser import program_to_dict
from app.services.pipeline import PipelineArtifacts
from app.services.simulator import write_occupancy_csv, write_trace_jsonl
from app.utils.errors import CompilerError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)


def buffer_section(graph: DataflowGraph) -> list:
    """One entry per edge: kind, sizing and why it is not a FIFO when it is not."""
    entries = []
    for edge in graph.edges:
        spec = edge.spec
        entries.append(
            {
                "array": edge.array,
                "producer": edge.producer,
                "consumer": edge.consumer,
                "kind": spec.kind if spec is not None else None,
                "depth": spec.depth if spec is not None and spec.kind == "fifo" else None,
                "block_elems": spec.block_elems if spec is not None and spec.kind != "fifo" else None,
                "status": edge.status,
                "reason": edge.reason,
            }
        )
    return entries


def build_report(artifacts: PipelineArtifacts) -> Dict[str, Any]:
    """
    Aggregate a pipeline run into one JSON-friendly dict.

    Sections: violations found (per kind) and transformations applied (per
    pass and action), buffers, FIFO share, transfer plan, per-stage DSE
    estimates, simulation outcome and compile time.
    """
    found = artifacts.found
    graph = artifacts.graph
    applied = Counter(f"{r.pass_name}.{r.action}" for r in graph.log)
    report: Dict[str, Any] = {
        "program": artifacts.program.name,
        "stages": list(artifacts.stages),
        "violations": {
            "found": {
                "coarse": dict(Counter(v.pattern for v in found.coarse)),
                "fine": dict(Counter(v.kind for v in found.fine)),
            },
            "applied": dict(sorted(applied.items())),
        },
        "buffers": buffer_section(graph),
        "fifo_percentage": graph.fifo_percentage,
        "transfer_plan": artifacts.transfer_plan.model_dump() if artifacts.transfer_plan is not None else None,
        "dse": None,
        "simulation": None,
        "wall_time_s": artifacts.wall_time_s,
    }
    if artifacts.dse is not None:
        report["dse"] = {
            "stages": [s.model_dump() for s in artifacts.dse.snapshots],
            "degrees": {name: s.degree for name, s in artifacts.schedules.items()},
            "downgrades": [
                {"edge": list(r.edge) if r.edge else None, "reason": r.reason, "details": r.details}
                for r in artifacts.dse.downgrades
            ],
            "budget_bound": artifacts.dse.budget_bound,
            "wall_time_s": artifacts.dse.wall_time_s,
        }
    if artifacts.simulation is not None:
        report["simulation"] = {**artifacts.simulation.summary(), "reference_match": artifacts.reference_match}
    return report


def emit_report(artifacts: PipelineArtifacts, path: Optional[str] = None) -> Dict[str, Any]:
    """
    Build the run report and optionally write it.

    Raises:
        CompilerError: The report file cannot be written
    """
    report = build_report(artifacts)
    if path is not None:
        _write_json(Path(path), report)
        logger.info(f"Report written to {path}")
    return report


def write_artifacts(artifacts: PipelineArtifacts, directory: str) -> Dict[str, str]:
    """
    Write every artifact of a run into ``directory``.

    Files: program.json (transformed program), log.json, buffers.json
    (buffers and transfer plan), dse.json, report.json and, after a
    simulation, simulation.json, trace.jsonl and occupancy.csv.

    Returns:
        Artifact name -> written path
    """
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CompilerError(f"cannot create output directory {directory}: {e}", error_code="WRITE_FAILED")
    report = build_report(artifacts)
    written: Dict[str, str] = {}
    program = artifacts.transformed or artifacts.graph.as_program()
    files: Dict[str, Any] = {
        "program": program_to_dict(program),
        "log": [r.model_dump() for r in artifacts.graph.log],
        "buffers": {"buffers": report["buffers"], "transfer_plan": report["transfer_plan"]},
        "dse": report["dse"],
        "report": report,
    }
    if artifacts.simulation is not None:
        files["simulation"] = report["simulation"]
    for name, payload in files.items():
        target = out / f"{name}.json"
        _write_json(target, payload)
        written[name] = str(target)
    if artifacts.simulation is not None:
        written["trace"] = str(out / "trace.jsonl")
        written["occupancy"] = str(out / "occupancy.csv")
        write_trace_jsonl(artifacts.simulation, written["trace"])
        write_occupancy_csv(artifacts.simulation, written["occupancy"])
    logger.info(f"Wrote {len(written)} artifact(s) to {directory}")
    return written


def _write_json(path: Path, payload: Any) -> None:
    try:
        path.write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")
    except OSError as e:
        raise CompilerError(f"cannot write {path}: {e}", error_code="WRITE_FAILED")

"""
Custom exception classes for the compiler.

Every error carries an HTTP status code (for the service), a stable
error code and a process exit code (for the CLI).
"""
from typing import Optional, Dict, Any, List


class CompilerError(Exception):
    """Base compiler exception."""

    def __init__(
        self,
        message: str,
        status_code: int = 500,
        error_code: str = "INTERNAL_ERROR",
        details: Optional[Dict[str, Any]] = None,
        exit_code: int = 1,
    ):
        self.message = message
        self.status_code = status_code
        self.error_code = error_code
        self.details = details or {}
        self.exit_code = exit_code
        super().__init__(self.message)


class ProgramParseError(CompilerError):
    """Program text does not describe a valid program."""

    def __init__(self, message: str, location: Optional[str] = None, details: Optional[Dict] = None):
        payload = dict(details or {})
        if location:
            payload["location"] = location
        super().__init__(
            message=f"{location}: {message}" if location else message,
            status_code=400,
            error_code="PARSE_ERROR",
            details=payload,
            exit_code=2,
        )
        self.location = location


class CyclicDataflowError(CompilerError):
    """Internal arrays form a feedback loop between nodes."""

    def __init__(self, cycle: List[str]):
        super().__init__(
            message=f"Cyclic dataflow between nodes: {' -> '.join(cycle)}",
            status_code=400,
            error_code="CYCLIC_DATAFLOW",
            details={"cycle": cycle},
            exit_code=2,
        )


class ExecutionError(CompilerError):
    """Reference execution failed (out-of-bounds or uninitialized access)."""

    def __init__(self, message: str, details: Optional[Dict] = None):
        super().__init__(
            message=message,
            status_code=422,
            error_code="EXECUTION_ERROR",
            details=details,
        )


class AnalysisError(CompilerError):
    """Analysis called outside its preconditions."""

    def __init__(self, message: str, details: Optional[Dict] = None):
        super().__init__(
            message=message,
            status_code=422,
            error_code="ANALYSIS_ERROR",
            details=details,
        )


class TransformError(CompilerError):
    """A transformation cannot be applied.

    ``reason`` is one of fusion_infeasible, rewrite_infeasible,
    map_infeasible, map_illegal, reuse_infeasible, external_array,
    unresolvable or precondition.
    """

    def __init__(self, reason: str, message: str, details: Optional[Dict] = None):
        payload = dict(details or {})
        payload["reason"] = reason
        super().__init__(
            message=message,
            status_code=422,
            error_code="TRANSFORM_ERROR",
            details=payload,
            exit_code=3,
        )
        self.reason = reason


class UnresolvableViolationError(CompilerError):
    """Coarse elimination ended with residual violations."""

    def __init__(self, residual: List[Dict[str, Any]], rounds: int):
        super().__init__(
            message=f"{len(residual)} coarse violation(s) left after {rounds} round(s)",
            status_code=422,
            error_code="UNRESOLVABLE_VIOLATION",
            details={"residual": residual, "rounds": rounds},
            exit_code=3,
        )


class BudgetExceededError(CompilerError):
    """Design does not fit the resource budget even without parallelism."""

    def __init__(self, required: Dict[str, int], budget: Dict[str, int]):
        super().__init__(
            message="Resource budget infeasible at parallelism degree 1",
            status_code=422,
            error_code="BUDGET_EXCEEDED",
            details={"required": required, "budget": budget},
            exit_code=4,
        )


class SimulationTimeoutError(CompilerError):
    """Simulation hit max_cycles without completing or deadlocking."""

    def __init__(self, max_cycles: int, details: Optional[Dict] = None):
        super().__init__(
            message=f"Simulation exceeded {max_cycles} cycles",
            status_code=504,
            error_code="SIMULATION_TIMEOUT",
            details=details or {"max_cycles": max_cycles},
            exit_code=5,
        )


class SimulationError(CompilerError):
    """Simulator or result-inspection precondition failure."""

    def __init__(self, message: str, details: Optional[Dict] = None):
        super().__init__(
            message=message,
            status_code=422,
            error_code="SIMULATION_ERROR",
            details=details,
        )

"""
Simulation results.
"""
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


SimOutcome = Literal["completed", "deadlock"]
DeadlockKind = Literal["cyclic_wait", "starved_reader", "stuck_writer"]


class BlockedState(BaseModel):
    """A node parked on a channel operation."""

    model_config = ConfigDict(frozen=True)

    node: str
    array: str
    operation: Literal["read", "write"]
    partner: str = Field(..., description="Node at the other end of the channel")


class TraceEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    cycle: int
    node: str
    event: str


class SimResult(BaseModel):
    """Outcome of one simulation run."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    total_cycles: int = Field(..., ge=0)
    outcome: SimOutcome
    outputs: Dict[str, np.ndarray] = Field(default_factory=dict)
    channel_trace: Dict[str, List[Tuple[int, int]]] = Field(
        default_factory=dict, description="channel -> (cycle, occupancy) samples"
    )
    activity: Dict[str, Tuple[int, int]] = Field(default_factory=dict, description="node -> (first, last) active cycle")
    blocked: List[BlockedState] = Field(default_factory=list)
    finished: List[str] = Field(default_factory=list)
    misordered_reads: Dict[str, int] = Field(default_factory=dict)
    events: List[TraceEvent] = Field(default_factory=list)

    def summary(self) -> Dict:
        """JSON-friendly view without tensors."""
        return {
            "total_cycles": self.total_cycles,
            "outcome": self.outcome,
            "activity": {k: list(v) for k, v in self.activity.items()},
            "blocked": [b.model_dump() for b in self.blocked],
            "misordered_reads": self.misordered_reads,
            "max_occupancy": {k: max((o for _, o in v), default=0) for k, v in self.channel_trace.items()},
        }


class DeadlockInfo(BaseModel):
    """Diagnosis of a deadlocked run."""

    cycle: int
    wait_for: List[Tuple[str, str, str]] = Field(default_factory=list, description="(waiting node, awaited node, array)")
    classification: DeadlockKind
    cycle_nodes: List[str] = Field(default_factory=list)
    starved: Optional[str] = None

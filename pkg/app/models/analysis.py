"""
Analysis results: access summaries, violations and loop classes.
"""
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field


AccessMode = Literal["read", "write"]
CoarsePattern = Literal["SPMC", "MPSC", "MPMC"]
FineKind = Literal["count_mismatch", "order_mismatch"]
# A loop whose only carried dependence is an associative reduction is "free".
LoopLabel = Literal["outer_unsafe", "fifo_index", "free"]


class AccessSummary(BaseModel):
    """How one node accesses one array in one mode."""

    model_config = ConfigDict(frozen=True)

    array: str
    node: str
    mode: AccessMode
    count: int = Field(..., ge=0, description="Element accesses over the full iteration domain")
    dim_to_depth: Tuple[Optional[int], ...] = Field(..., description="Per dimension: outermost driving loop depth, None if invariant")
    order_signature: Tuple[Tuple[str, int], ...] = Field(..., description="(loop var, trip) outermost first")
    accesses_per_point: int = Field(default=1, ge=1)
    guarded: bool = False


class CoarseViolation(BaseModel):
    """Internal array without exactly one writer and one reader."""

    model_config = ConfigDict(frozen=True)

    array: str
    pattern: CoarsePattern
    writers: Tuple[str, ...]
    readers: Tuple[str, ...]


class FineViolation(BaseModel):
    """Count or order mismatch on a 1:1 edge."""

    model_config = ConfigDict(frozen=True)

    edge: Tuple[str, str, str] = Field(..., description="(array, producer, consumer)")
    kind: FineKind
    detail: Tuple = Field(..., description="(writes, reads) or (producer signature, consumer signature)")
    confirmed: bool = Field(default=True, description="False when only the symbolic verdict was available")

    @property
    def array(self) -> str:
        return self.edge[0]


class ViolationReport(BaseModel):
    """Everything the analyzer found for a program."""

    coarse: List[CoarseViolation] = Field(default_factory=list)
    fine: List[FineViolation] = Field(default_factory=list)
    summaries: List[AccessSummary] = Field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.coarse and not self.fine


LoopClasses = Dict[str, LoopLabel]

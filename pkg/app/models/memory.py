"""
Memory-side results: depth maps, reuse buffers and off-chip transfer plans.
"""
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field


class DepthMap(BaseModel):
    """Loop-depth permutation of a target nest (source depth -> new depth)."""

    model_config = ConfigDict(frozen=True)

    pairs: Dict[int, int] = Field(default_factory=dict)
    tiling_applied: Tuple[Tuple[str, int, int], ...] = Field(
        default=(), description="(side, depth, tile size 1) records of virtual unit tiling"
    )

    @property
    def is_identity(self) -> bool:
        return all(src == dst for src, dst in self.pairs.items())


class ReusePlan(BaseModel):
    """Line and window buffers synthesized for a stencil consumer."""

    model_config = ConfigDict(frozen=True)

    array: str
    line_buffer: Optional[str] = None
    line_buffer_shape: Tuple[int, ...] = ()
    window_buffer: Optional[str] = None
    window_buffer_shape: Tuple[int, ...] = ()
    kernel: Tuple[int, int] = (1, 1)
    rewritten_regions: Tuple[str, ...] = ()
    reads_before: int = 0
    reads_after: int = 0
    degenerate: bool = False


class BurstDescriptor(BaseModel):
    """Contiguous transfer of one array on one channel."""

    model_config = ConfigDict(frozen=True)

    array: str
    channel: int
    offset: int
    length: int


class TransferPlan(BaseModel):
    """External array to HBM channel assignment."""

    channels: int
    assignment: Dict[str, int] = Field(default_factory=dict)
    channel_bytes: List[int] = Field(default_factory=list)
    bursts: List[BurstDescriptor] = Field(default_factory=list)

    @property
    def imbalance(self) -> int:
        if not self.channel_bytes:
            return 0
        return max(self.channel_bytes) - min(self.channel_bytes)

"""
Performance-model and scheduling models: cost table, resources, schedules
and design-space exploration reports.
"""
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.models.graph import TransformRecord
from app.models.program import LoopDirective


class OpCost(BaseModel):
    """Cost of one operation instance."""

    model_config = ConfigDict(frozen=True)

    lat: int = Field(default=1, ge=0, description="Latency in cycles")
    ii: int = Field(default=1, ge=0, description="Initiation interval contribution")
    dsp: int = Field(default=0, ge=0)
    lut: int = Field(default=0, ge=0)
    ff: int = Field(default=0, ge=0)


def _default_ops() -> Dict[str, OpCost]:
    return {
        "add": OpCost(lat=1, dsp=0, lut=32, ff=32),
        "cmp": OpCost(lat=1, dsp=0, lut=16, ff=8),
        "copy": OpCost(lat=1, dsp=0, lut=0, ff=32),
        "max": OpCost(lat=1, dsp=0, lut=40, ff=32),
        "mul": OpCost(lat=3, dsp=1, lut=20, ff=64),
        "mac": OpCost(lat=3, dsp=1, lut=40, ff=96),
        "div": OpCost(lat=12, dsp=0, lut=400, ff=380),
        "exp": OpCost(lat=12, dsp=2, lut=300, ff=250),
        "load": OpCost(lat=1, dsp=0, lut=8, ff=8),
        "store": OpCost(lat=1, dsp=0, lut=8, ff=8),
    }


class CostTable(BaseModel):
    """Per-operation costs plus memory parameters."""

    model_config = ConfigDict(frozen=True)

    ops: Dict[str, OpCost] = Field(default_factory=_default_ops)
    ports_per_bank: int = Field(default=2, ge=1)
    bram_block_bits: int = Field(default=18 * 1024, ge=1)

    def cost(self, kind: str) -> OpCost:
        return self.ops.get(kind, OpCost())

    @classmethod
    def from_json(cls, path: str) -> "CostTable":
        """Load a cost table; op entries override the shipped defaults."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        ops = _default_ops()
        entries = data["ops"] if "ops" in data else data
        for name, entry in entries.items():
            if isinstance(entry, dict):
                ops[name] = OpCost(**entry)
        extra = {k: data[k] for k in ("ports_per_bank", "bram_block_bits") if k in data}
        return cls(ops=ops, **extra)


class ResourceVector(BaseModel):
    """Hardware resources (componentwise comparable)."""

    model_config = ConfigDict(frozen=True)

    dsp: int = Field(default=0, ge=0)
    bram18k: int = Field(default=0, ge=0)
    lut: int = Field(default=0, ge=0)
    ff: int = Field(default=0, ge=0)

    @classmethod
    def device(cls) -> "ResourceVector":
        return cls(
            dsp=settings.DEVICE_DSP,
            bram18k=settings.DEVICE_BRAM18K,
            lut=settings.DEVICE_LUT,
            ff=settings.DEVICE_FF,
        )

    @classmethod
    def from_json(cls, path: str) -> "ResourceVector":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        base = cls.device().model_dump()
        base.update({k: int(v) for k, v in data.items() if k in base})
        return cls(**base)

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(
            dsp=self.dsp + other.dsp,
            bram18k=self.bram18k + other.bram18k,
            lut=self.lut + other.lut,
            ff=self.ff + other.ff,
        )

    def fits(self, budget: "ResourceVector") -> bool:
        return (
            self.dsp <= budget.dsp
            and self.bram18k <= budget.bram18k
            and self.lut <= budget.lut
            and self.ff <= budget.ff
        )


class ScheduleAnnotation(BaseModel):
    """Loop directives (by loop key) and array partition factors."""

    model_config = ConfigDict(frozen=True)

    loops: Dict[str, LoopDirective] = Field(default_factory=dict)
    partitions: Dict[str, Tuple[int, ...]] = Field(default_factory=dict)

    def directive(self, key: str) -> Optional[LoopDirective]:
        return self.loops.get(key)

    def partition_factor(self, array: str) -> int:
        total = 1
        for factor in self.partitions.get(array, ()):
            total *= factor
        return total


class NodeSchedule(BaseModel):
    """Parallelism degree of a node and its realization."""

    model_config = ConfigDict(frozen=True)

    degree: int = Field(default=1, ge=1)
    annotation: ScheduleAnnotation = Field(default_factory=ScheduleAnnotation)


ScheduleMap = Dict[str, NodeSchedule]


class SchedulerConfig(BaseModel):
    """Knobs of the three-stage exploration."""

    model_config = ConfigDict(frozen=True)

    n_threshold: float = Field(default=2.0, ge=1.0, description="Bottleneck ratio n")
    max_parallel: int = Field(default=64, ge=1, description="User ceiling on the degree of any node")
    budget: ResourceVector = Field(default_factory=ResourceVector.device)
    max_up_iters: int = Field(default=10, ge=1)
    enable_downscale: bool = True
    enable_upscale: bool = True

    @classmethod
    def from_settings(cls, **overrides) -> "SchedulerConfig":
        values = {
            "n_threshold": settings.N_THRESHOLD,
            "max_parallel": settings.MAX_PARALLEL,
            "max_up_iters": settings.MAX_UP_ITERS,
            "enable_downscale": settings.ENABLE_DOWNSCALE,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class StageSnapshot(BaseModel):
    """Estimated outcome after one exploration stage."""

    stage: str
    latency: int
    resources: ResourceVector
    degrees: Dict[str, int]


class DseReport(BaseModel):
    """Exploration trace and outcome."""

    snapshots: List[StageSnapshot] = Field(default_factory=list)
    fifo_percentage: float = 1.0
    downgrades: List[TransformRecord] = Field(default_factory=list)
    budget_bound: bool = False
    wall_time_s: float = 0.0

    def snapshot(self, stage: str) -> Optional[StageSnapshot]:
        for snap in self.snapshots:
            if snap.stage == stage:
                return snap
        return None


class RegionTiming(BaseModel):
    """Estimate for one pipelined loop region."""

    model_config = ConfigDict(frozen=True)

    key: str = Field(..., description="Key of the outermost pipelined loop")
    chain: Tuple[str, ...] = Field(default=(), description="Flattened loop keys, outermost first")
    iterations: int = Field(..., ge=0)
    unroll: int = Field(default=1, ge=1)
    ii: int = Field(default=1, ge=1)
    depth: int = Field(default=1, ge=1)
    latency: int = Field(..., ge=0, description="Latency of one execution of the region")
    executions: int = Field(default=1, ge=0, description="Times the region runs per node execution")
    ii_causes: Dict[str, int] = Field(default_factory=dict)


class NodeTiming(BaseModel):
    """Latency breakdown of a scheduled node."""

    model_config = ConfigDict(frozen=True)

    node: str
    latency: int = Field(..., ge=0)
    regions: List[RegionTiming] = Field(default_factory=list)
    resources: ResourceVector = Field(default_factory=ResourceVector)

    @property
    def dominant(self) -> Optional[RegionTiming]:
        """Region with the largest total contribution."""
        if not self.regions:
            return None
        return max(self.regions, key=lambda r: (r.latency * r.executions, -self.regions.index(r)))

import math
from enum import Enum
from typing import Dict, List, Literal, NamedTuple, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator


Role = Literal["base", "expert", "delta", "lora-adapter", "merged"]
SourceKind = Literal["full", "explicit-delta", "lora"]
OperatorId = Literal["avg-fixed", "avg-renorm", "ties", "dare"]
ScoringRule = Literal["utility", "utility-per-byte"]

SOURCE_KIND_BY_ROLE: Dict[str, str] = {
    "expert": "full",
    "merged": "full",
    "delta": "explicit-delta",
    "lora-adapter": "lora",
}


# Addressing
class BlockKey(NamedTuple):
    """One (tensor, block) region; orders by tensor name, then block index"""
    tensor: str
    block_index: int


class AccessUnit(NamedTuple):
    """One (expert, tensor, block) read unit"""
    expert: str
    key: BlockKey

    def canonical_order(self):
        return (self.key.tensor, self.key.block_index, self.expert)


class Channel(str, Enum):
    BASE = "base"
    EXPERT = "expert"
    OUTPUT = "output"
    METADATA = "metadata"


# Container schemas
class TensorMeta(BaseModel):
    name: str = Field(..., min_length=1)
    dtype: str = "f32"
    shape: List[int]
    block_rows: Optional[int] = Field(None, ge=1)
    block_elems: Optional[int] = Field(None, ge=1)
    offset: int = Field(0, ge=0)

    @field_validator("shape")
    @classmethod
    def _check_shape(cls, shape: List[int]) -> List[int]:
        if len(shape) not in (1, 2):
            raise ValueError("only rank-1 and rank-2 tensors are supported")
        if any(dim <= 0 for dim in shape):
            raise ValueError("shape dimensions must be positive")
        return shape

    @model_validator(mode="after")
    def _check_blocking(self):
        if self.rank == 2 and self.block_rows is None:
            raise ValueError(f"rank-2 tensor {self.name} needs block_rows")
        if self.rank == 1 and self.block_elems is None:
            raise ValueError(f"rank-1 tensor {self.name} needs block_elems")
        return self

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return 4 * self.numel

    @property
    def row_elems(self) -> int:
        return self.shape[1] if self.rank == 2 else 1

    @property
    def elems_per_block(self) -> int:
        if self.rank == 2:
            return min(self.block_rows, self.shape[0]) * self.shape[1]
        return min(self.block_elems, self.shape[0])

    @property
    def num_blocks(self) -> int:
        return -(-self.numel // self.elems_per_block)

    def block_span(self, block_index: int) -> tuple:
        """(first element, element count) of a block"""
        start = block_index * self.elems_per_block
        return start, min(self.elems_per_block, self.numel - start)

    def block_rows_range(self, block_index: int) -> tuple:
        """(first row, end row) of a rank-2 block"""
        start, count = self.block_span(block_index)
        return start // self.row_elems, (start + count) // self.row_elems

    def same_geometry(self, other: "TensorMeta") -> bool:
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.elems_per_block == other.elems_per_block
        )


class ContainerHeader(BaseModel):
    format_version: Literal[1] = 1
    role: Role
    tensors: List[TensorMeta]
    lora_scales: Dict[str, float] = Field(default_factory=dict)
    payload_sha256: Optional[str] = None


# Cost schemas
class CostBreakdown(BaseModel):
    base_bytes: int = 0
    expert_bytes: int = 0
    output_bytes: int = 0
    metadata_bytes: int = 0

    @property
    def total(self) -> int:
        return self.base_bytes + self.expert_bytes + self.output_bytes + self.metadata_bytes


class Budget(BaseModel):
    """Expert-read byte cap; limit_bytes None is the FULL budget"""
    limit_bytes: Optional[int] = Field(None, ge=0)
    fraction: Optional[float] = Field(None, ge=0)
    basis: str = "absolute"

    @property
    def is_full(self) -> bool:
        return self.limit_bytes is None

    @classmethod
    def full(cls) -> "Budget":
        return cls(limit_bytes=None, basis="full")

    @classmethod
    def of_bytes(cls, limit: int) -> "Budget":
        return cls(limit_bytes=limit, basis="absolute")

    @classmethod
    def of_fraction(cls, fraction: float, endpoint_cost: int, basis: str = "universe") -> "Budget":
        return cls(limit_bytes=math.floor(fraction * endpoint_cost), fraction=fraction, basis=basis)

    def resolve(self, full_cost: int) -> int:
        return full_cost if self.is_full else self.limit_bytes


# Operator schemas
class OperatorParams(BaseModel):
    operator: OperatorId = "avg-fixed"
    alphas: Optional[List[float]] = None
    ties_density: float = 0.2
    dare_drop_p: float = 0.3
    seed: int = 0


# Catalog schemas
class BlockStats(BaseModel):
    byte_cost: int = Field(..., ge=0)
    content_hash: Optional[str] = None
    delta_l2: Optional[float] = Field(None, ge=0)
    has_stats: bool = True


class CatalogEntry(BaseModel):
    expert: str
    key: BlockKey
    stats: BlockStats
    base_id: str

    @property
    def unit(self) -> AccessUnit:
        return AccessUnit(self.expert, self.key)


class SourceRef(BaseModel):
    expert_id: str
    kind: SourceKind
    path: str
    checkpoint_id: str


# Plan schemas
class MergePlan(BaseModel):
    format_version: Literal[1] = 1
    operator: OperatorParams
    experts: List[str]
    selected: List[AccessUnit]
    traversal_order: List[str]
    budget: Budget
    estimated_cost: int = Field(..., ge=0)
    universe_digest: str
    base_id: str
    digest: str = ""


# Manifest schemas
class TouchedBlock(BaseModel):
    tensor: str
    block_index: int
    experts: List[str]


class ExpertLineage(BaseModel):
    expert_id: str
    kind: SourceKind
    checkpoint_id: str


class Lineage(BaseModel):
    base_id: str
    experts: List[ExpertLineage]


class Manifest(BaseModel):
    format_version: Literal[1] = 1
    plan_digest: str
    operator: OperatorParams
    budget: Budget
    estimated_cost: int
    lineage: Lineage
    touched: List[TouchedBlock]
    references: List[BlockKey] = Field(default_factory=list)
    coverage: Dict[str, Dict[str, float]]
    costs: CostBreakdown
    max_reads_per_unit: int = 0
    reference_mode: bool = False
    output_digest: str


class Snapshot(BaseModel):
    snapshot_id: str
    path: str
    manifest_path: str
    wall_seconds: float = 0.0


# Verification schemas
class DeviationReport(BaseModel):
    rel_l2: float
    abs_l2: float
    p95_block: float
    touched_ratio: Optional[float] = None
    per_tensor: Dict[str, float] = Field(default_factory=dict)


class BoundReport(BaseModel):
    l2_form: float
    l1_form: float


class SoundnessReport(BaseModel):
    passed: bool
    expert_bytes: int
    estimated_cost: int
    budget_bytes: int
    trace_subset: bool
    failures: List[str] = Field(default_factory=list)


class TouchedRatios(BaseModel):
    """TIES touched ratio under both normalizations"""
    universe: float
    post_trim: float


class VerifyReport(BaseModel):
    snapshot_id: str
    plan_digest: str
    operator: OperatorId
    deviation: Optional[DeviationReport] = None
    soundness: SoundnessReport
    omission_bound: Optional[BoundReport] = None
    drift_bound: Optional[float] = None
    touched_ratios: Optional[TouchedRatios] = None
    touched_ratio_basis: Optional[str] = None


# Family generator schemas
class TensorSpec(BaseModel):
    name: str = Field(..., min_length=1)
    shape: List[int] = Field(..., min_length=1, max_length=2)


class FamilySpec(BaseModel):
    k: int = Field(4, ge=0)
    tensors: List[TensorSpec] = Field(
        default_factory=lambda: [
            TensorSpec(name="layers.0.mlp.up", shape=[64, 48]),
            TensorSpec(name="layers.0.norm", shape=[48]),
            TensorSpec(name="layers.1.attn.qkv", shape=[96, 48]),
        ]
    )
    delta_scale: Union[float, List[float]] = 0.01
    sparsity: float = Field(0.0, ge=0, lt=1)
    kinds: List[SourceKind] = Field(default_factory=lambda: ["full"], min_length=1)
    lora_rank: int = Field(4, ge=1)
    lora_scale: float = 1.0
    base_scale: float = 0.05
    block_bytes: int = Field(262144, ge=4)
    seed: int = 0

    def expert_ids(self) -> List[str]:
        return [f"e{i:02d}" for i in range(self.k)]

    def kind_of(self, index: int) -> str:
        return self.kinds[index % len(self.kinds)]

    def scale_of(self, index: int) -> float:
        if isinstance(self.delta_scale, list):
            return self.delta_scale[index % len(self.delta_scale)]
        return self.delta_scale


# Experiment schemas
class SweepRow(BaseModel):
    fraction: float
    budget_bytes: int
    estimated_cost: int
    expert_bytes: int
    accessed_ratio: float
    wall_seconds: float
    rel_l2: float
    p95_block: float
    touched_ratio: Optional[float] = None


class ScaleRow(BaseModel):
    k: int
    naive_expert_bytes: int
    budgeted_expert_bytes: int
    budget_bytes: int
    mean_expert_cost: float
    read_fraction: float
    fraction_cap: float


class OverheadReport(BaseModel):
    costs: CostBreakdown
    plan_seconds: float
    execute_seconds: float
    catalog_bytes: int
    manifest_bytes: int

    @property
    def plan_share(self) -> float:
        return self.plan_seconds / self.execute_seconds if self.execute_seconds else 0.0

    @property
    def manifest_share(self) -> float:
        return self.manifest_bytes / self.costs.total if self.costs.total else 0.0

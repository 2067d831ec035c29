"""Delta sources and the per-tensor DeltaIterator.

Three kinds of expert storage yield the same per-block delta:
``full`` checkpoints (expert minus base), ``explicit-delta`` checkpoints
(delta stored directly) and ``lora`` adapters (scale * B @ A on target
tensors, zero elsewhere). Omitted units never reach storage.
"""

import threading
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from app.errors import GeometryMismatchError
from app.schemas import SOURCE_KIND_BY_ROLE, AccessUnit, BlockKey, Channel, SourceRef
from app.services.container import (
    BlockBuffer,
    CheckpointHandle,
    open_checkpoint,
    read_block,
    read_rows,
)
from app.services.costmodel import IoMeter
from app.services.operators import MaskedDeltaTuple, lora_delta, subtract_delta
from app.utils import logger

LORA_B = ".lora_B"
LORA_A = ".lora_A"


class DeltaSource:
    """One expert's storage, addressed in the base checkpoint's block geometry"""

    def __init__(self, expert_id: str, handle: CheckpointHandle, kind: Optional[str] = None):
        self.expert_id = expert_id
        self.handle = handle
        self.kind = kind or SOURCE_KIND_BY_ROLE.get(handle.role)
        if self.kind is None:
            raise GeometryMismatchError(f"{handle.root}: role {handle.role} is not an expert source")
        self.targets: Dict[str, float] = dict(handle.header.lora_scales) if self.kind == "lora" else {}

    def __repr__(self) -> str:
        return f"DeltaSource({self.expert_id}, kind={self.kind})"

    @classmethod
    def from_path(cls, expert_id: str, path: Union[str, Path]) -> "DeltaSource":
        return cls(expert_id, open_checkpoint(path))

    def ref(self) -> SourceRef:
        return SourceRef(
            expert_id=self.expert_id,
            kind=self.kind,
            path=str(self.handle.root),
            checkpoint_id=self.handle.checkpoint_id,
        )

    def check_geometry(self, base: CheckpointHandle) -> None:
        """Fail unless this source resolves to the base block geometry"""
        if self.kind in ("full", "explicit-delta"):
            if self.handle.tensor_order != base.tensor_order:
                raise GeometryMismatchError(
                    f"{self.expert_id}: tensors {self.handle.tensor_order} differ from base {base.tensor_order}"
                )
            for name in base.tensor_order:
                if not self.handle.tensor(name).same_geometry(base.tensor(name)):
                    raise GeometryMismatchError(f"{self.expert_id}: tensor {name} geometry differs from base")
            return
        names = set(self.handle.tensor_order)
        for target in self.targets:
            if target not in base.tensors or base.tensor(target).rank != 2:
                raise GeometryMismatchError(f"{self.expert_id}: lora target {target} is not a rank-2 base tensor")
            if target + LORA_B not in names or target + LORA_A not in names:
                raise GeometryMismatchError(f"{self.expert_id}: lora factors for {target} are missing")
            out_dim, in_dim = base.tensor(target).shape
            b_shape = self.handle.tensor(target + LORA_B).shape
            a_shape = self.handle.tensor(target + LORA_A).shape
            if b_shape[0] != out_dim or a_shape != [b_shape[1], in_dim]:
                raise GeometryMismatchError(
                    f"{self.expert_id}: lora factors {b_shape} x {a_shape} do not produce {out_dim}x{in_dim}"
                )

    def unit_cost(self, base: CheckpointHandle, key: BlockKey) -> int:
        """Bytes a pull of this unit may read (upper bound for lora factor caching)"""
        if self.kind != "lora":
            return self.handle.block_nbytes(key)
        if key.tensor not in self.targets:
            return 0
        row_start, row_end = base.tensor(key.tensor).block_rows_range(key.block_index)
        rank = self.handle.tensor(key.tensor + LORA_A).shape[0]
        return 4 * (row_end - row_start) * rank + self.handle.tensor(key.tensor + LORA_A).nbytes

    def pull(
        self,
        base: CheckpointHandle,
        key: BlockKey,
        base_block: Optional[BlockBuffer],
        meter: IoMeter,
        channel: Channel = Channel.EXPERT,
        factor_cache: Optional[Dict[str, np.ndarray]] = None,
        cache_lock: Optional[threading.Lock] = None,
    ) -> np.ndarray:
        """Materialize this expert's delta for one block as flat f32"""
        unit = AccessUnit(self.expert_id, key)
        if self.kind == "full":
            expert_block = read_block(self.handle, key, meter, channel, unit)
            return subtract_delta(expert_block.values, base_block.values)
        if self.kind == "explicit-delta":
            return read_block(self.handle, key, meter, channel, unit).values
        meta = base.validate_key(key)
        if key.tensor not in self.targets:
            return np.zeros(meta.block_span(key.block_index)[1], dtype=np.float32)
        row_start, row_end = meta.block_rows_range(key.block_index)
        b_rows = read_rows(self.handle, key.tensor + LORA_B, row_start, row_end, meter, channel, unit)
        factor_cache = {} if factor_cache is None else factor_cache
        lock = cache_lock or threading.Lock()
        with lock:
            a = factor_cache.get(key.tensor)
            if a is None:
                rank = self.handle.tensor(key.tensor + LORA_A).shape[0]
                a = read_rows(self.handle, key.tensor + LORA_A, 0, rank, meter, channel, unit)
                factor_cache[key.tensor] = a
        return lora_delta(b_rows, a, self.targets[key.tensor]).reshape(-1)


def open_sources(refs: Sequence[SourceRef]) -> List[DeltaSource]:
    return [DeltaSource(ref.expert_id, open_checkpoint(ref.path), ref.kind) for ref in refs]


def close_inputs(base: CheckpointHandle, sources: Sequence[DeltaSource]) -> None:
    """Release the payload descriptors of a base and its sources"""
    base.close()
    for source in sources:
        source.handle.close()


class DeltaIterator:
    """Pulls masked deltas for the blocks of one tensor.

    LoRA factor A is cached for the duration of the tensor's traversal.
    """

    def __init__(self, sources: Sequence[DeltaSource], base: CheckpointHandle, tensor: str, meter: IoMeter):
        self.sources = list(sources)
        self.base = base
        self.tensor = tensor
        self.meter = meter
        self._factor_caches: Dict[str, Dict[str, np.ndarray]] = {s.expert_id: {} for s in self.sources}
        self._lock = threading.Lock()

    def pull_masked(
        self,
        key: BlockKey,
        mask_row: Sequence[bool],
        base_block: Optional[BlockBuffer] = None,
    ) -> MaskedDeltaTuple:
        if len(mask_row) != len(self.sources):
            raise GeometryMismatchError(f"mask row has {len(mask_row)} bits for {len(self.sources)} sources")
        if key.tensor != self.tensor:
            raise GeometryMismatchError(f"iterator for {self.tensor} asked for {key}")
        meta = self.base.validate_key(key)
        deltas: Dict[int, np.ndarray] = {}
        for i, bit in enumerate(mask_row):
            if not bit:
                continue
            source = self.sources[i]
            if source.kind == "full" and base_block is None:
                base_block = read_block(self.base, key, self.meter, Channel.BASE)
            deltas[i] = source.pull(
                self.base,
                key,
                base_block,
                self.meter,
                factor_cache=self._factor_caches[source.expert_id],
                cache_lock=self._lock,
            )
            self.meter.record_pull(AccessUnit(source.expert_id, key))
        logger.debug(f"Pulled {len(deltas)} of {len(mask_row)} deltas for {key}")
        return MaskedDeltaTuple(mask_row, deltas, meta.block_span(key.block_index)[1])


def pull_masked(
    sources: Sequence[DeltaSource],
    base: CheckpointHandle,
    key: BlockKey,
    mask_row: Sequence[bool],
    meter: IoMeter,
    base_block: Optional[BlockBuffer] = None,
) -> MaskedDeltaTuple:
    """One-off pull outside a tensor traversal"""
    return DeltaIterator(sources, base, key.tensor, meter).pull_masked(key, mask_row, base_block)

"""Budget-enforced streaming execution of a merge plan.

Per tensor in plan order, per block: read the base block, pull the masked
deltas, apply the operator, write or reference the result. Then flush,
validate, seal, build the manifest and publish atomically. Any failure
before the publish leaves no visible state.
"""

import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from itertools import islice
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from app.config import settings
from app.errors import BudgetViolationError, PlanMismatchError, SoundnessError
from app.schemas import (
    BlockKey,
    Channel,
    ExpertLineage,
    Lineage,
    Manifest,
    MergePlan,
    OperatorParams,
    Snapshot,
    TouchedBlock,
)
from app.services.catalog import Catalog
from app.services.container import BlockBuffer, CheckpointHandle, read_block, write_block_or_reference
from app.services.costmodel import IoMeter
from app.services.delta_source import DeltaIterator, DeltaSource
from app.services.operators import MaskedDeltaTuple, add_to_base, psi, validate_params
from app.services.planner import load_plan, plan_mask, validate_plan
from app.services.snapshots import PLAN_FILE, FaultInjector, SnapshotStore, atomic_publish, load_manifest
from app.utils import logger


def apply_budgeted_op(
    base_block: BlockBuffer,
    tuple_: MaskedDeltaTuple,
    params: OperatorParams,
    experts: Sequence[str] = (),
) -> BlockBuffer:
    """Base block plus the operator output, rounded to f32"""
    values = add_to_base(base_block.values, psi(tuple_, params, base_block.key, experts))
    return BlockBuffer(key=base_block.key, values=values, byte_len=4 * values.size)


def build_manifest(
    plan: MergePlan,
    touch: List[TouchedBlock],
    coverage: Dict[str, Dict[str, float]],
    meter: IoMeter,
    output_digest: str,
    lineage: Lineage,
    references: Sequence[BlockKey] = (),
    reference_mode: bool = False,
) -> Manifest:
    for block in touch:
        for expert in block.experts:
            if meter.trace[(expert, BlockKey(block.tensor, block.block_index))] == 0:
                raise SoundnessError(f"touched unit ({expert}, {block.tensor}, {block.block_index}) has no read trace")
    return Manifest(
        plan_digest=plan.digest,
        operator=plan.operator,
        budget=plan.budget,
        estimated_cost=plan.estimated_cost,
        lineage=lineage,
        touched=touch,
        references=sorted(references),
        coverage=coverage,
        costs=meter.breakdown(),
        max_reads_per_unit=max(meter.trace.values(), default=0),
        reference_mode=reference_mode,
        output_digest=output_digest,
    )


def check_run_budget(meter: IoMeter, plan: MergePlan) -> None:
    """Realized expert bytes <= estimated cost <= budget, and trace within the selected set"""
    expert_bytes = meter.bytes(Channel.EXPERT)
    if expert_bytes > plan.estimated_cost:
        raise BudgetViolationError(f"realized {expert_bytes} expert bytes exceed planned {plan.estimated_cost}")
    if not plan.budget.is_full and plan.estimated_cost > plan.budget.limit_bytes:
        raise BudgetViolationError(f"planned {plan.estimated_cost} bytes exceed budget {plan.budget.limit_bytes}")
    selected = set(plan.selected)
    stray = [unit for unit in meter.trace if unit not in selected]
    stray += [unit for unit in meter.unit_bytes if unit not in selected]
    if stray:
        raise SoundnessError(f"read trace contains {len(stray)} unselected units, e.g. {stray[0]}")


def _windowed(pool: Optional[ThreadPoolExecutor], fn, items, window: int):
    """Ordered map with at most ``window`` items in flight"""
    if pool is None:
        yield from map(fn, items)
        return
    iterator = iter(items)
    while True:
        chunk = list(islice(iterator, window))
        if not chunk:
            return
        yield from pool.map(fn, chunk)


def _ordered_sources(plan: MergePlan, sources: Sequence[DeltaSource]) -> List[DeltaSource]:
    by_id = {source.expert_id: source for source in sources}
    missing = [expert for expert in plan.experts if expert not in by_id]
    if missing:
        raise PlanMismatchError(f"no sources for experts {missing}")
    return [by_id[expert] for expert in plan.experts]


def execute(
    plan: MergePlan,
    base: CheckpointHandle,
    sources: Sequence[DeltaSource],
    store: SnapshotStore,
    catalog: Optional[Catalog] = None,
    *,
    reference_mode: Optional[bool] = None,
    jobs: Optional[int] = None,
    faults: Optional[FaultInjector] = None,
) -> Tuple[Snapshot, Manifest]:
    """Run a plan end to end and publish one snapshot with its manifest"""
    reference_mode = settings.REFERENCE_BASE if reference_mode is None else reference_mode
    jobs = max(1, jobs or settings.JOBS)
    faults = faults or FaultInjector()

    validate_plan(plan, catalog)
    if plan.base_id != base.checkpoint_id:
        raise PlanMismatchError(f"plan is for base {plan.base_id[:12]}, got {base.checkpoint_id[:12]}")
    if sorted(plan.traversal_order) != sorted(base.tensor_order):
        raise PlanMismatchError(f"plan traverses {plan.traversal_order}, base holds {base.tensor_order}")
    ordered = _ordered_sources(plan, sources)
    for source in ordered:
        source.check_geometry(base)
    validate_params(plan.operator, len(plan.experts))

    experts = plan.experts
    params = plan.operator
    rows = plan_mask(plan).rows(experts)
    empty_row = (False,) * len(experts)
    meter = IoMeter(in_run=True, expert_limit=plan.estimated_cost)
    if catalog is not None and catalog.file_bytes:
        meter.charge(Channel.METADATA, catalog.file_bytes)

    started = time.perf_counter()
    touched: List[TouchedBlock] = []
    coverage: Dict[str, Dict[str, float]] = {}
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        with store.begin() as txn:
            faults.check("begin")
            writer = txn.open_writer(base.header, meter, reference_mode)
            first_block = True
            for tensor in plan.traversal_order:
                iterator = DeltaIterator(ordered, base, tensor, meter)
                hits: Counter = Counter()

                def compute(key: BlockKey):
                    base_block = read_block(base, key, meter, Channel.BASE)
                    row = rows.get(key, empty_row)
                    tuple_ = iterator.pull_masked(key, row, base_block)
                    return key, row, base_block, apply_budgeted_op(base_block, tuple_, params, experts)

                for key, row, base_block, merged in _windowed(pool, compute, base.keys(tensor), 2 * jobs):
                    write_block_or_reference(writer, key, merged, base, base_block=base_block)
                    contributors = [expert for expert, bit in zip(experts, row) if bit]
                    if contributors:
                        touched.append(TouchedBlock(tensor=key.tensor, block_index=key.block_index, experts=contributors))
                        hits.update(contributors)
                    if first_block:
                        faults.check("first_block")
                        first_block = False
                blocks = base.tensor(tensor).num_blocks
                coverage[tensor] = {expert: hits[expert] / blocks for expert in experts}

            faults.check("blocks_written")
            writer.flush()
            faults.check("flushed")
            writer.validate()
            check_run_budget(meter, plan)
            faults.check("validated")
            header = writer.seal()
            faults.check("sealed")
            lineage = Lineage(
                base_id=base.checkpoint_id,
                experts=[
                    ExpertLineage(expert_id=s.expert_id, kind=s.kind, checkpoint_id=s.handle.checkpoint_id)
                    for s in ordered
                ],
            )
            manifest = build_manifest(
                plan,
                touched,
                coverage,
                meter,
                header.payload_sha256,
                lineage,
                references=writer.references,
                reference_mode=reference_mode,
            )
            faults.check("manifest_built")
            snapshot = atomic_publish(txn, manifest, plan, faults)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    snapshot.wall_seconds = time.perf_counter() - started
    costs = manifest.costs
    logger.info(
        f"Executed plan {plan.digest[:12]} ({params.operator}): expert {costs.expert_bytes} / "
        f"planned {plan.estimated_cost} bytes, base {costs.base_bytes}, output {costs.output_bytes}, "
        f"{snapshot.wall_seconds:.3f}s"
    )
    return snapshot, manifest


def replay(
    manifest_path,
    store: SnapshotStore,
    base: CheckpointHandle,
    sources: Sequence[DeltaSource],
    catalog: Optional[Catalog] = None,
    *,
    jobs: Optional[int] = None,
) -> Tuple[Snapshot, Manifest]:
    """Re-execute a published manifest's plan and require the same snapshot id"""
    manifest = load_manifest(manifest_path)
    snapshot_dir = Path(manifest_path)
    if not snapshot_dir.is_dir():
        snapshot_dir = snapshot_dir.parent
    plan = load_plan(snapshot_dir / PLAN_FILE)
    if plan.digest != manifest.plan_digest:
        raise PlanMismatchError(f"plan {plan.digest[:12]} does not belong to manifest {manifest.plan_digest[:12]}")
    if base.checkpoint_id != manifest.lineage.base_id:
        raise PlanMismatchError(f"manifest was built on base {manifest.lineage.base_id[:12]}")
    by_id = {source.expert_id: source for source in sources}
    for expert in manifest.lineage.experts:
        source = by_id.get(expert.expert_id)
        if source is None or source.handle.checkpoint_id != expert.checkpoint_id:
            raise PlanMismatchError(f"expert {expert.expert_id} differs from the one the manifest recorded")
    snapshot, replayed = execute(
        plan, base, sources, store, catalog, reference_mode=manifest.reference_mode, jobs=jobs
    )
    if snapshot.snapshot_id != manifest.output_digest:
        raise SoundnessError(
            f"replay produced {snapshot.snapshot_id[:12]}, manifest recorded {manifest.output_digest[:12]}"
        )
    logger.info(f"Replayed plan {plan.digest[:12]}: snapshot {snapshot.snapshot_id[:12]} reproduced")
    return snapshot, replayed

"""Ground truth for budgeted merges.

``full_read_merge`` is an independent whole-tensor merge: it never goes
through masks, DeltaIterator or the block writer, and shares only the scalar
arithmetic rules with the streaming path. Everything else here measures a
budgeted snapshot against it or against the bounds derived from the catalog.
"""

import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from app.errors import (
    GeometryMismatchError,
    MissingStatsError,
    NonAdditiveOperatorError,
    PlanMismatchError,
)
from app.schemas import (
    AccessUnit,
    BlockKey,
    BoundReport,
    Budget,
    Channel,
    DeviationReport,
    Manifest,
    MergePlan,
    OperatorParams,
    SoundnessReport,
    TensorMeta,
    TouchedRatios,
    VerifyReport,
)
from app.services.catalog import Catalog
from app.services.container import CheckpointHandle, read_tensor
from app.services.costmodel import IoMeter
from app.services.delta_source import LORA_A, LORA_B, DeltaSource
from app.services.operators import (
    add_to_base,
    dare_rescale,
    lora_delta,
    omega_keep_mask,
    resolved_alphas,
    subtract_delta,
    ties_combine,
    ties_trim,
    validate_params,
)
from app.services.snapshots import load_manifest, open_snapshot
from app.utils import logger

F32 = np.float32
F64 = np.float64


# Whole-tensor reference merge
def tensor_delta(source: DeltaSource, base_values: np.ndarray, name: str, meter: IoMeter) -> np.ndarray:
    """One expert's full delta for one tensor, flat f32"""
    if source.kind == "full":
        return subtract_delta(read_tensor(source.handle, name, meter, Channel.EXPERT).reshape(-1), base_values)
    if source.kind == "explicit-delta":
        return read_tensor(source.handle, name, meter, Channel.EXPERT).reshape(-1)
    if name not in source.targets:
        return np.zeros(base_values.size, dtype=F32)
    b = read_tensor(source.handle, name + LORA_B, meter, Channel.EXPERT)
    a = read_tensor(source.handle, name + LORA_A, meter, Channel.EXPERT)
    return lora_delta(b, a, source.targets[name]).reshape(-1)


def _blocks(meta: TensorMeta):
    for block_index in range(meta.num_blocks):
        start, count = meta.block_span(block_index)
        yield block_index, slice(start, start + count)


def _phi(
    meta: TensorMeta,
    deltas: List[np.ndarray],
    experts: Sequence[str],
    params: OperatorParams,
) -> np.ndarray:
    k = len(deltas)
    acc = np.zeros(meta.numel, dtype=F64)
    if params.operator == "avg-fixed":
        for alpha, delta in zip(resolved_alphas(params, k), deltas):
            acc += alpha * delta.astype(F64)
    elif params.operator == "avg-renorm":
        for delta in deltas:
            acc += (1.0 / k) * delta.astype(F64)
    elif params.operator == "ties":
        kept = [np.zeros(meta.numel, dtype=F64) for _ in deltas]
        for _, span in _blocks(meta):
            for i, delta in enumerate(deltas):
                kept[i][span] = ties_trim(delta[span], params.ties_density)
        acc = ties_combine(kept, meta.numel)
    elif params.operator == "dare":
        for expert, alpha, delta in zip(experts, resolved_alphas(params, k), deltas):
            keep = np.zeros(meta.numel, dtype=bool)
            for block_index, span in _blocks(meta):
                keep[span] = omega_keep_mask(
                    params.seed, expert, BlockKey(meta.name, block_index), span.stop - span.start, params.dare_drop_p
                )
            acc += alpha * dare_rescale(delta, keep, params.dare_drop_p)
    return acc


def full_read_merge(
    base: CheckpointHandle,
    sources: Sequence[DeltaSource],
    params: OperatorParams,
    meter: Optional[IoMeter] = None,
) -> Dict[str, np.ndarray]:
    """Merge every expert in full, tensor by tensor. Metered, this is the naive baseline."""
    meter = meter or IoMeter()
    sources = sorted(sources, key=lambda s: s.expert_id)
    experts = [s.expert_id for s in sources]
    validate_params(params, len(sources))
    for source in sources:
        source.check_geometry(base)
    merged: Dict[str, np.ndarray] = {}
    for name in base.tensor_order:
        meta = base.tensor(name)
        base_values = read_tensor(base, name, meter, Channel.BASE).reshape(-1)
        deltas = [tensor_delta(source, base_values, name, meter) for source in sources]
        psi = _phi(meta, deltas, experts, params)
        merged[name] = add_to_base(base_values, psi).reshape(meta.shape)
    logger.info(
        f"Full-read {params.operator} merge of {len(sources)} experts: "
        f"{meter.bytes(Channel.EXPERT)} expert bytes"
    )
    return merged


def load_tensors(handle: CheckpointHandle) -> Dict[str, np.ndarray]:
    """Every tensor of a checkpoint, unmetered"""
    meter = IoMeter()
    return {name: read_tensor(handle, name, meter, Channel.OUTPUT) for name in handle.tensor_order}


# Deviation
def _nearest_rank(values: List[float], pct: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def deviation(
    merged: Union[CheckpointHandle, Mapping[str, np.ndarray]],
    reference: Union[CheckpointHandle, Mapping[str, np.ndarray]],
    layout: Optional[Sequence[TensorMeta]] = None,
) -> DeviationReport:
    """Relative and absolute l2 deviation, nearest-rank p95 of per-block deviations"""
    if layout is None:
        for side in (merged, reference):
            if isinstance(side, CheckpointHandle):
                layout = side.header.tensors
                break
    if isinstance(merged, CheckpointHandle):
        merged = load_tensors(merged)
    if isinstance(reference, CheckpointHandle):
        reference = load_tensors(reference)
    if set(merged) != set(reference):
        raise GeometryMismatchError(f"tensor sets differ: {sorted(merged)} vs {sorted(reference)}")
    metas = {meta.name: meta for meta in layout or ()}

    diff_sq = ref_sq = 0.0
    per_tensor: Dict[str, float] = {}
    block_norms: List[float] = []
    for name in (list(metas) if metas else list(reference)):
        ours = np.asarray(merged[name])
        theirs = np.asarray(reference[name])
        if ours.shape != theirs.shape:
            raise GeometryMismatchError(f"{name}: shape {list(ours.shape)} vs {list(theirs.shape)}")
        diff = ours.astype(F64).reshape(-1) - theirs.astype(F64).reshape(-1)
        ref = theirs.astype(F64).reshape(-1)
        t_diff, t_ref = float(np.dot(diff, diff)), float(np.dot(ref, ref))
        diff_sq += t_diff
        ref_sq += t_ref
        per_tensor[name] = math.sqrt(t_diff) / math.sqrt(t_ref) if t_ref else (0.0 if t_diff == 0 else math.inf)
        if name in metas:
            block_norms.extend(float(np.linalg.norm(diff[span])) for _, span in _blocks(metas[name]))
        else:
            block_norms.append(math.sqrt(t_diff))

    abs_l2 = math.sqrt(diff_sq)
    if ref_sq:
        rel_l2 = abs_l2 / math.sqrt(ref_sq)
    else:
        rel_l2 = 0.0 if abs_l2 == 0 else math.inf
    return DeviationReport(rel_l2=rel_l2, abs_l2=abs_l2, p95_block=_nearest_rank(block_norms, 95), per_tensor=per_tensor)


# Bounds
def _delta_norm(catalog: Catalog, unit: AccessUnit) -> float:
    entry = catalog.entry(unit)
    if entry is None or not entry.stats.has_stats or entry.stats.delta_l2 is None:
        raise MissingStatsError(f"no delta norm for {unit}")
    return entry.stats.delta_l2


def omission_bound(plan: MergePlan, catalog: Catalog, alphas: Optional[Sequence[float]] = None) -> BoundReport:
    """Upper bounds on the l2 distance between the full-read and budgeted fixed averages.

    Per block q = sum over omitted experts of |alpha| * ||delta||; returns
    (sum q^2)^(1/2) and sum q.
    """
    if plan.operator.operator != "avg-fixed":
        raise NonAdditiveOperatorError(f"omission bound holds for avg-fixed only, plan uses {plan.operator.operator}")
    experts = plan.experts
    alphas = list(alphas) if alphas is not None else resolved_alphas(plan.operator, len(experts))
    selected = set(plan.selected)
    l2_sq = l1 = 0.0
    for key in catalog.keys():
        q = 0.0
        for expert, alpha in zip(experts, alphas):
            unit = AccessUnit(expert, key)
            if unit not in selected:
                q += abs(alpha) * _delta_norm(catalog, unit)
        l2_sq += q * q
        l1 += q
    return BoundReport(l2_form=math.sqrt(l2_sq), l1_form=l1)


def coefficient_drift_bound(plan: MergePlan, catalog: Catalog, alphas: Optional[Sequence[float]] = None) -> float:
    """Renormalized-average drift: per block, omitted and reweighted deltas scaled by their coefficient change"""
    if plan.operator.operator != "avg-renorm":
        raise NonAdditiveOperatorError(f"drift bound holds for avg-renorm only, plan uses {plan.operator.operator}")
    experts = plan.experts
    alphas = list(alphas) if alphas is not None else [1.0 / len(experts)] * len(experts)
    selected = set(plan.selected)
    total = 0.0
    for key in catalog.keys():
        chosen = [AccessUnit(expert, key) in selected for expert in experts]
        beta = 1.0 / sum(chosen) if any(chosen) else 0.0
        r = 0.0
        for expert, alpha, bit in zip(experts, alphas, chosen):
            drift = abs(alpha - (beta if bit else 0.0))
            if drift:
                r += drift * _delta_norm(catalog, AccessUnit(expert, key))
        total += r * r
    return math.sqrt(total)


def omission_difference(plan: MergePlan, base: CheckpointHandle, sources: Sequence[DeltaSource]) -> Dict[str, np.ndarray]:
    """Full-read minus budgeted output for avg-fixed, rebuilt in f64 from omitted deltas alone"""
    if plan.operator.operator != "avg-fixed":
        raise NonAdditiveOperatorError("the exact omission difference exists for avg-fixed only")
    by_id = {source.expert_id: source for source in sources}
    alphas = resolved_alphas(plan.operator, len(plan.experts))
    selected = set(plan.selected)
    meter = IoMeter()
    out: Dict[str, np.ndarray] = {}
    for name in base.tensor_order:
        meta = base.tensor(name)
        base_values = read_tensor(base, name, meter, Channel.BASE).reshape(-1)
        diff = np.zeros(meta.numel, dtype=F64)
        for expert, alpha in zip(plan.experts, alphas):
            omitted = [span for b, span in _blocks(meta) if AccessUnit(expert, BlockKey(name, b)) not in selected]
            if not omitted:
                continue
            delta = tensor_delta(by_id[expert], base_values, name, meter).astype(F64)
            for span in omitted:
                diff[span] += alpha * delta[span]
        out[name] = diff.reshape(meta.shape)
    return out


# Soundness
def check_soundness(manifest: Manifest, plan: MergePlan, budget: Optional[Budget] = None) -> SoundnessReport:
    """Realized expert bytes <= planned cost <= budget, trace within the selected set"""
    if manifest.plan_digest != plan.digest:
        raise PlanMismatchError(f"manifest is for plan {manifest.plan_digest[:12]}, got {plan.digest[:12]}")
    budget = budget or plan.budget
    budget_bytes = plan.estimated_cost if budget.is_full else budget.limit_bytes
    expert_bytes = manifest.costs.expert_bytes
    selected = set(plan.selected)
    touched = {
        AccessUnit(expert, BlockKey(block.tensor, block.block_index))
        for block in manifest.touched
        for expert in block.experts
    }
    trace_subset = touched <= selected
    failures = []
    if expert_bytes > plan.estimated_cost:
        failures.append(f"realized expert bytes {expert_bytes} exceed planned {plan.estimated_cost}")
    if plan.estimated_cost > budget_bytes:
        failures.append(f"planned {plan.estimated_cost} exceeds budget {budget_bytes}")
    if not trace_subset:
        failures.append(f"{len(touched - selected)} touched units were not selected")
    if manifest.max_reads_per_unit > 1:
        failures.append(f"a unit was pulled {manifest.max_reads_per_unit} times")
    return SoundnessReport(
        passed=not failures,
        expert_bytes=expert_bytes,
        estimated_cost=plan.estimated_cost,
        budget_bytes=budget_bytes,
        trace_subset=trace_subset,
        failures=failures,
    )


# TIES sparsification
def ties_touched_ratios(
    base: CheckpointHandle,
    sources: Sequence[DeltaSource],
    params: OperatorParams,
    plan: Optional[MergePlan] = None,
) -> TouchedRatios:
    """Share of expert blocks whose trimmed kept set is nonempty.

    ``universe`` divides by every (expert, block) unit; ``post_trim`` divides
    by the units that stay nonempty at the full-read endpoint. With a plan
    only selected units count in the numerator.
    """
    meter = IoMeter()
    selected = set(plan.selected) if plan is not None else None
    units = nonempty = counted = 0
    for name in base.tensor_order:
        meta = base.tensor(name)
        base_values = read_tensor(base, name, meter, Channel.BASE).reshape(-1)
        for source in sources:
            delta = tensor_delta(source, base_values, name, meter)
            for block_index, span in _blocks(meta):
                units += 1
                if not np.any(ties_trim(delta[span], params.ties_density)):
                    continue
                nonempty += 1
                if selected is None or AccessUnit(source.expert_id, BlockKey(name, block_index)) in selected:
                    counted += 1
    return TouchedRatios(
        universe=counted / units if units else 0.0,
        post_trim=counted / nonempty if nonempty else 0.0,
    )


def verify_run(
    snapshot_path: Union[str, Path],
    plan: MergePlan,
    base: CheckpointHandle,
    sources: Sequence[DeltaSource],
    catalog: Optional[Catalog] = None,
    *,
    against_full: bool = True,
    touched_basis: str = "universe",
) -> VerifyReport:
    """Check a published snapshot's soundness and bounds, optionally against the full-read merge"""
    manifest = load_manifest(snapshot_path, plan.digest)
    soundness = check_soundness(manifest, plan)
    report = None
    if against_full:
        snapshot = open_snapshot(snapshot_path, base=base)
        try:
            reference = full_read_merge(base, sources, plan.operator)
            report = deviation(snapshot, reference, layout=base.header.tensors)
        finally:
            snapshot.close()
    omission = drift = ratios = None
    operator = plan.operator.operator
    try:
        if catalog is not None and operator == "avg-fixed":
            omission = omission_bound(plan, catalog)
        if catalog is not None and operator == "avg-renorm":
            drift = coefficient_drift_bound(plan, catalog)
    except MissingStatsError as e:
        logger.warning(f"Skipping bound: {e.detail}")
    if operator == "ties":
        ratios = ties_touched_ratios(base, sources, plan.operator, plan)
        if report is not None:
            report.touched_ratio = getattr(ratios, touched_basis)
    deviation_note = f"rel_l2={report.rel_l2:.3e} p95={report.p95_block:.3e} " if report else ""
    logger.info(
        f"Verified {manifest.output_digest[:12]}: {deviation_note}"
        f"soundness={'pass' if soundness.passed else 'FAIL'}"
    )
    return VerifyReport(
        snapshot_id=manifest.output_digest,
        plan_digest=plan.digest,
        operator=operator,
        deviation=report,
        soundness=soundness,
        omission_bound=omission,
        drift_bound=drift,
        touched_ratios=ratios,
        touched_ratio_basis=touched_basis if ratios else None,
    )

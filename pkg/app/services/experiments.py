"""Experiment harness: budget sweeps, K scaling and overhead accounting.

Rows are pydantic models so they serialize the same way to CSV, JSON and
the plain-text tables printed by the CLI.
"""

import csv
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from app.schemas import (
    Budget,
    FamilySpec,
    OperatorParams,
    OverheadReport,
    ScaleRow,
    SweepRow,
)
from app.services.catalog import Catalog, build_catalog, persist_catalog
from app.services.container import CheckpointHandle, drop_page_cache
from app.services.costmodel import IoMeter, expert_read_fraction, fraction_cap
from app.services.delta_source import DeltaSource, close_inputs
from app.services.executor import execute
from app.services.family import FamilyLayout, generate_family, open_family
from app.services.planner import make_plan
from app.services.snapshots import SnapshotStore, open_snapshot
from app.services.verify import deviation, full_read_merge, ties_touched_ratios
from app.utils import logger

DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 11))


# Statistics
def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination of a least-squares line through (x, y)"""
    xs, ys = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(xs, ys, 1)
    residual = ys - (slope * xs + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    if ss_tot == 0:
        return 1.0
    return 1.0 - float(np.sum(residual ** 2)) / ss_tot


def _average_ranks(values: Sequence[float]) -> np.ndarray:
    data = np.asarray(values, dtype=np.float64)
    order = np.argsort(data, kind="mergesort")
    ranks = np.empty(len(data), dtype=np.float64)
    i = 0
    while i < len(data):
        j = i
        while j + 1 < len(data) and data[order[j + 1]] == data[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties"""
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("spearman needs two equally long sequences of at least two values")
    rx, ry = _average_ranks(x), _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denominator = float(np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    return float(np.dot(rx, ry)) / denominator if denominator else 0.0


# Output
def _row_dict(row: Union[BaseModel, Dict]) -> Dict:
    return row.model_dump(mode="json") if isinstance(row, BaseModel) else dict(row)


def write_csv(rows: Sequence[Union[BaseModel, Dict]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [_row_dict(row) for row in rows]
    columns = list(records[0]) if records else []
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(records)
    logger.info(f"Wrote {len(records)} rows to {path}")
    return path


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    return "-" if value is None else str(value)


def render_table(rows: Sequence[Union[BaseModel, Dict]], columns: Optional[Sequence[str]] = None) -> str:
    """Plain-text table with right-aligned columns"""
    records = [_row_dict(row) for row in rows]
    if not records:
        return "(no rows)"
    columns = list(columns or records[0])
    cells = [[_cell(record.get(column)) for column in columns] for record in records]
    widths = [max(len(column), *(len(row[i]) for row in cells)) for i, column in enumerate(columns)]
    lines = ["  ".join(column.rjust(width) for column, width in zip(columns, widths))]
    lines.append("  ".join("-" * width for width in widths))
    lines.extend("  ".join(cell.rjust(width) for cell, width in zip(row, widths)) for row in cells)
    return "\n".join(lines)


def render_costs(report: OverheadReport, width: int = 40) -> str:
    """Stacked text bar of the four I/O channels"""
    costs = report.costs.model_dump()
    total = report.costs.total or 1
    lines = []
    for channel, nbytes in costs.items():
        bar = "#" * round(width * nbytes / total)
        lines.append(f"{channel:>15} {bar:<{width}} {nbytes:>12} ({100.0 * nbytes / total:.3f}%)")
    lines.append(f"{'plan/execute':>15} {100.0 * report.plan_share:.3f}% of execution time")
    lines.append(f"{'manifest':>15} {100.0 * report.manifest_share:.5f}% of total I/O")
    return "\n".join(lines)


# Runs
@contextmanager
def prepared(layout: FamilyLayout, workspace: Union[str, Path]) -> Iterator[Tuple[CheckpointHandle, List[DeltaSource], Catalog, SnapshotStore]]:
    """Open a family, build and persist its catalog, and open a snapshot store; handles close on exit"""
    workspace = Path(workspace)
    base, sources = open_family(layout)
    try:
        catalog = build_catalog(base, sources, IoMeter())
        persist_catalog(catalog, workspace / "catalog.jsonl")
        yield base, sources, catalog, SnapshotStore(workspace)
    finally:
        close_inputs(base, sources)


def _evict(base: CheckpointHandle, sources: Sequence[DeltaSource]) -> None:
    drop_page_cache(base.root)
    for source in sources:
        drop_page_cache(source.handle.root)


def _sweep_row(
    base: CheckpointHandle,
    sources: Sequence[DeltaSource],
    catalog: Catalog,
    store: SnapshotStore,
    params: OperatorParams,
    reference: Dict[str, np.ndarray],
    fraction: float,
    *,
    cold_cache: bool,
    repeats: int,
    scoring_rule: Optional[str],
    jobs: Optional[int],
) -> SweepRow:
    budget = Budget.of_fraction(fraction, catalog.full_cost())
    plan, _ = make_plan(catalog, params, budget, scoring_rule)
    timings = []
    for _ in range(max(1, repeats)):
        if cold_cache:
            _evict(base, sources)
        snapshot, manifest = execute(plan, base, sources, store, catalog, jobs=jobs)
        timings.append(snapshot.wall_seconds)
    with open_snapshot(snapshot.path, base=base) as merged:
        report = deviation(merged, reference, layout=base.header.tensors)
    touched = None
    if params.operator == "ties":
        touched = ties_touched_ratios(base, sources, params, plan).universe
    logger.info(f"Sweep {params.operator} at {fraction:.2f}: {manifest.costs.expert_bytes} expert bytes")
    return SweepRow(
        fraction=fraction,
        budget_bytes=budget.limit_bytes,
        estimated_cost=plan.estimated_cost,
        expert_bytes=manifest.costs.expert_bytes,
        accessed_ratio=len(plan.selected) / len(catalog) if len(catalog) else 0.0,
        wall_seconds=min(timings),
        rel_l2=report.rel_l2,
        p95_block=report.p95_block,
        touched_ratio=touched,
    )


def budget_sweep(
    layout: FamilyLayout,
    params: OperatorParams,
    workspace: Union[str, Path],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    *,
    cold_cache: bool = True,
    repeats: int = 1,
    scoring_rule: Optional[str] = None,
    jobs: Optional[int] = None,
) -> List[SweepRow]:
    """Plan, execute and verify one family at each budget fraction of the universe cost"""
    with prepared(layout, workspace) as (base, sources, catalog, store):
        reference = full_read_merge(base, sources, params)
        return [
            _sweep_row(
                base, sources, catalog, store, params, reference, fraction,
                cold_cache=cold_cache, repeats=repeats, scoring_rule=scoring_rule, jobs=jobs,
            )
            for fraction in fractions
        ]


def scaling_sweep(
    ks: Sequence[int],
    budget_bytes: int,
    workspace: Union[str, Path],
    template: Optional[FamilySpec] = None,
    params: Optional[OperatorParams] = None,
) -> Tuple[List[ScaleRow], float]:
    """Naive full-read versus budgeted expert bytes as K grows under a fixed absolute budget.

    Returns the rows and the R^2 of a linear fit of naive bytes against K.
    """
    template = template or FamilySpec()
    params = params or OperatorParams()
    workspace = Path(workspace)
    rows: List[ScaleRow] = []
    for k in ks:
        layout = generate_family(template.model_copy(update={"k": k}), workspace / f"k{k:03d}" / "family")
        with prepared(layout, workspace / f"k{k:03d}") as (base, sources, catalog, store):
            naive = IoMeter()
            full_read_merge(base, sources, params, meter=naive)
            plan, _ = make_plan(catalog, params, Budget.of_bytes(budget_bytes))
            _, manifest = execute(plan, base, sources, store, catalog)
            mean = catalog.mean_expert_cost()
        rows.append(
            ScaleRow(
                k=k,
                naive_expert_bytes=naive.breakdown().expert_bytes,
                budgeted_expert_bytes=manifest.costs.expert_bytes,
                budget_bytes=budget_bytes,
                mean_expert_cost=mean,
                read_fraction=expert_read_fraction(manifest.costs.expert_bytes, k, mean),
                fraction_cap=fraction_cap(budget_bytes, k, mean),
            )
        )
    r2 = linear_fit_r2([row.k for row in rows], [row.naive_expert_bytes for row in rows]) if len(rows) > 1 else 1.0
    logger.info(f"Scaling sweep over K={list(ks)}: naive bytes linear fit R^2={r2:.4f}")
    return rows, r2


def overhead_report(
    layout: FamilyLayout,
    params: OperatorParams,
    workspace: Union[str, Path],
    budget: Optional[Budget] = None,
    fraction: Optional[float] = None,
) -> OverheadReport:
    """Four-channel cost breakdown of one run plus planning and manifest overheads"""
    with prepared(layout, workspace) as (base, sources, catalog, store):
        if fraction is not None:
            budget = Budget.of_fraction(fraction, catalog.full_cost())
        budget = budget or Budget.full()
        plan, plan_seconds = make_plan(catalog, params, budget)
        _evict(base, sources)
        started = time.perf_counter()
        snapshot, manifest = execute(plan, base, sources, store, catalog)
        execute_seconds = time.perf_counter() - started
    return OverheadReport(
        costs=manifest.costs,
        plan_seconds=plan_seconds,
        execute_seconds=execute_seconds,
        catalog_bytes=catalog.file_bytes,
        manifest_bytes=Path(snapshot.manifest_path).stat().st_size,
    )

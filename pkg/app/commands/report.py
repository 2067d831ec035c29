import argparse
import csv
from pathlib import Path

from app import crud
from app.config import settings
from app.database import get_db, init_db
from app.errors import MalformedHeaderError
from app.schemas import OverheadReport
from app.services.experiments import render_costs, render_table
from app.services.snapshots import load_manifest

SWEEP_COLUMNS = ["fraction", "budget_bytes", "expert_bytes", "accessed_ratio", "wall_seconds", "rel_l2", "p95_block"]


def register(subparsers) -> None:
    parser = subparsers.add_parser("report", help="render manifests, sweep CSVs and the commit ledger")
    mode = parser.add_mutually_exclusive_group(required=True)
    mode.add_argument("--snapshot", help="cost breakdown and coverage of one snapshot")
    mode.add_argument("--csv", help="render a sweep CSV as a table")
    mode.add_argument("--ledger", action="store_true", help="list recorded snapshots and the latest catalog")
    parser.add_argument("--limit", type=int, default=20)
    parser.set_defaults(handler=run)


def _snapshot_report(path: str) -> str:
    manifest = load_manifest(path)
    manifest_bytes = (Path(path) / "manifest.json" if Path(path).is_dir() else Path(path)).stat().st_size
    overhead = OverheadReport(
        costs=manifest.costs,
        plan_seconds=0.0,
        execute_seconds=0.0,
        catalog_bytes=0,
        manifest_bytes=manifest_bytes,
    )
    lines = [
        f"snapshot {manifest.output_digest}",
        f"plan {manifest.plan_digest} ({manifest.operator.operator})",
        f"estimated {manifest.estimated_cost} expert bytes, realized {manifest.costs.expert_bytes}",
        f"touched blocks {len(manifest.touched)}, base references {len(manifest.references)}",
        "",
        render_costs(overhead),
        "",
    ]
    coverage_rows = [
        {"tensor": tensor, **{expert: share for expert, share in shares.items()}}
        for tensor, shares in manifest.coverage.items()
    ]
    lines.append(render_table(coverage_rows))
    return "\n".join(lines)


def _csv_report(path: str) -> str:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise MalformedHeaderError(f"cannot read {path}: {e}")
    columns = [column for column in SWEEP_COLUMNS if rows and column in rows[0]] or None
    return render_table(rows, columns)


def _ledger_report(workspace: str, limit: int) -> str:
    database_url = settings.database_url(workspace)
    init_db(database_url)
    with get_db(database_url) as db:
        records = crud.list_snapshot_records(db, limit=limit)
        rows = [
            {
                "snapshot": record.snapshot_id[:12],
                "plan": record.plan_digest[:12],
                "operator": record.operator,
                "budget": "FULL" if record.budget_bytes is None else record.budget_bytes,
                "estimated": record.estimated_cost,
                "expert_bytes": record.expert_bytes,
                "created": record.created_at.isoformat(timespec="seconds") if record.created_at else None,
            }
            for record in records
        ]
        catalog = crud.get_latest_catalog_record(db)
        catalog_line = (
            f"latest catalog {catalog.path} ({catalog.entries} entries, {catalog.size_bytes} bytes, base {catalog.base_id[:12]})"
            if catalog
            else "no catalog recorded"
        )
    return render_table(rows) + "\n\n" + catalog_line


def run(args: argparse.Namespace) -> int:
    if args.snapshot:
        print(_snapshot_report(args.snapshot))
    elif args.csv:
        print(_csv_report(args.csv))
    else:
        print(_ledger_report(args.workspace, args.limit))
    return 0

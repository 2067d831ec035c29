import argparse
import json
from pathlib import Path

from app.commands.common import open_catalog_inputs
from app.errors import SoundnessError
from app.services.planner import load_plan
from app.services.snapshots import PLAN_FILE
from app.services.verify import verify_run
from app.utils import logger


def register(subparsers) -> None:
    parser = subparsers.add_parser("verify", help="check a snapshot's soundness, bounds and deviation")
    parser.add_argument("--snapshot", required=True, help="published snapshot directory")
    parser.add_argument("--catalog", required=True)
    parser.add_argument("--plan", help="plan file (defaults to the snapshot's own plan.json; runs/<digest>/plan.json for later runs)")
    parser.add_argument("--against-full", action="store_true", help="compare with the full-read merge")
    parser.add_argument("--touched-basis", choices=["universe", "post_trim"], default="universe")
    parser.add_argument("--out", help="also write the JSON report here")
    parser.add_argument("--strict", action="store_true", help="exit 3 when soundness fails")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    """Print a JSON verification report"""
    plan = load_plan(args.plan or Path(args.snapshot) / PLAN_FILE)
    with open_catalog_inputs(args.catalog) as (catalog, base, sources):
        report = verify_run(
            args.snapshot,
            plan,
            base,
            sources,
            catalog,
            against_full=args.against_full,
            touched_basis=args.touched_basis,
        )
    text = json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        logger.info(f"Verification report written to {args.out}")
    print(text)
    if args.strict and not report.soundness.passed:
        raise SoundnessError("; ".join(report.soundness.failures))
    return 0

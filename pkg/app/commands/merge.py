import argparse

from app.commands.common import open_catalog_inputs, published_line
from app.services.executor import execute, replay
from app.services.planner import load_plan
from app.services.snapshots import STAGES, FaultInjector, SnapshotStore


def register(subparsers) -> None:
    parser = subparsers.add_parser("merge", help="execute a plan and publish a snapshot")
    parser.add_argument("--plan", required=True)
    parser.add_argument("--catalog", required=True)
    parser.add_argument("--reference-base", action="store_true", default=None,
                        help="store blocks equal to the base as references")
    parser.add_argument("--jobs", type=int, default=None, help="blocks computed concurrently")
    parser.add_argument("--abort-at", choices=STAGES, help="inject an abort at a stage boundary (testing)")
    parser.set_defaults(handler=run)

    replay_parser = subparsers.add_parser("replay", help="re-execute a published manifest and check its snapshot id")
    replay_parser.add_argument("manifest", help="manifest.json or its snapshot directory")
    replay_parser.add_argument("--catalog", required=True)
    replay_parser.add_argument("--jobs", type=int, default=None)
    replay_parser.set_defaults(handler=run_replay)


def run(args: argparse.Namespace) -> int:
    plan = load_plan(args.plan)
    with open_catalog_inputs(args.catalog) as (catalog, base, sources):
        snapshot, manifest = execute(
            plan,
            base,
            sources,
            SnapshotStore(args.workspace),
            catalog,
            reference_mode=args.reference_base,
            jobs=args.jobs,
            faults=FaultInjector(args.abort_at),
        )
    print(published_line(snapshot, manifest))
    return 0


def run_replay(args: argparse.Namespace) -> int:
    with open_catalog_inputs(args.catalog) as (catalog, base, sources):
        snapshot, manifest = replay(args.manifest, SnapshotStore(args.workspace), base, sources, catalog, jobs=args.jobs)
    print(published_line(snapshot, manifest))
    return 0

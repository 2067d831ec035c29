import argparse
from pathlib import Path

from app import crud
from app.config import settings
from app.database import get_db, init_db
from app.errors import CatalogFormatError
from app.services.catalog import build_catalog, persist_catalog
from app.services.container import open_checkpoint
from app.services.costmodel import IoMeter
from app.services.delta_source import DeltaSource, close_inputs
from app.services.family import load_family, open_family
from app.utils import human_bytes, logger


def register(subparsers) -> None:
    parser = subparsers.add_parser("catalog", help="analyze experts into a per-block catalog file")
    inputs = parser.add_mutually_exclusive_group(required=True)
    inputs.add_argument("--family", help="generated family directory")
    inputs.add_argument("--base", help="base checkpoint directory")
    parser.add_argument("--expert", action="append", default=[], metavar="ID=PATH", help="expert source (repeatable)")
    parser.add_argument("--out", required=True, help="catalog file to write")
    parser.add_argument(
        "--no-stats", action="append", default=[], metavar="ID",
        help="catalog this expert from header geometry only (repeatable)",
    )
    parser.add_argument("--jobs", type=int, default=None)
    parser.set_defaults(handler=run)


def _inputs(args: argparse.Namespace):
    if args.family:
        return open_family(load_family(args.family))
    experts = []
    for item in args.expert:
        expert_id, sep, path = item.partition("=")
        if not sep or not expert_id or not path:
            raise CatalogFormatError(f"expected ID=PATH, got {item!r}")
        experts.append((expert_id, path))
    base = open_checkpoint(args.base)
    return base, [DeltaSource.from_path(expert_id, path) for expert_id, path in experts]


def run(args: argparse.Namespace) -> int:
    """Build, persist and record a catalog"""
    base, sources = _inputs(args)
    meter = IoMeter()
    try:
        catalog = build_catalog(base, sources, meter, jobs=args.jobs or settings.JOBS, fallback_experts=args.no_stats)
    finally:
        close_inputs(base, sources)
    path = persist_catalog(catalog, args.out)

    database_url = settings.database_url(args.workspace)
    init_db(database_url)
    with get_db(database_url) as db:
        crud.create_catalog_record(
            db,
            path=str(Path(path).resolve()),
            digest=catalog.file_digest,
            base_id=catalog.base_id,
            entries=len(catalog),
            size_bytes=catalog.file_bytes,
        )
    print(
        f"catalog path={path} digest={catalog.file_digest} entries={len(catalog)} "
        f"full_cost={catalog.full_cost()} analysis_bytes={meter.breakdown().total}"
    )
    logger.info(f"Catalog covers {len(catalog.experts)} experts, universe cost {human_bytes(catalog.full_cost())}")
    return 0

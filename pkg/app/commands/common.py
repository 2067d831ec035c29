"""Argument groups and helpers shared by the subcommands."""

import argparse
import json
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

from pydantic import BaseModel

from app.config import settings
from app.errors import CatalogFormatError, OperatorParamsError
from app.schemas import Budget, Manifest, OperatorParams, Snapshot
from app.services.catalog import Catalog, load_catalog
from app.services.container import CheckpointHandle, open_checkpoint
from app.services.delta_source import DeltaSource, close_inputs, open_sources
from app.services.snapshots import PLAN_FILE


def add_operator_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("operator")
    group.add_argument("--operator", default="avg-fixed", choices=["avg-fixed", "avg-renorm", "ties", "dare"])
    group.add_argument("--alphas", help="comma-separated coefficients, one per expert in id order")
    group.add_argument("--density", type=float, default=0.2, help="TIES keep fraction")
    group.add_argument("--drop-p", type=float, default=0.3, help="DARE drop probability")
    group.add_argument("--seed", type=int, default=None, help="DARE seed (defaults to the configured seed)")


def operator_params(args: argparse.Namespace) -> OperatorParams:
    alphas = None
    if args.alphas:
        try:
            alphas = [float(value) for value in args.alphas.split(",")]
        except ValueError:
            raise OperatorParamsError(f"cannot parse coefficients {args.alphas!r}")
    return OperatorParams(
        operator=args.operator,
        alphas=alphas,
        ties_density=args.density,
        dare_drop_p=args.drop_p,
        seed=settings.SEED if args.seed is None else args.seed,
    )


def add_budget_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--budget-bytes", type=int, help="absolute expert-read budget in bytes")
    group.add_argument("--budget-frac", type=float, help="budget as a fraction of the full universe cost")


def budget_from_args(args: argparse.Namespace, catalog: Catalog) -> Budget:
    if args.budget_bytes is not None:
        return Budget.of_bytes(args.budget_bytes)
    if args.budget_frac is not None:
        return Budget.of_fraction(args.budget_frac, catalog.full_cost())
    return Budget.full()


def parse_list(text: str, cast=float) -> List:
    return [cast(item) for item in text.split(",") if item.strip()]


@contextmanager
def open_catalog_inputs(catalog_path: str) -> Iterator[Tuple[Catalog, CheckpointHandle, List[DeltaSource]]]:
    """Load a catalog and open the base and sources it was built from; handles close on exit"""
    catalog = load_catalog(catalog_path)
    if not catalog.base_path:
        raise CatalogFormatError(f"{catalog_path} does not record its base checkpoint path")
    base = open_checkpoint(catalog.base_path)
    sources: List[DeltaSource] = []
    try:
        sources = open_sources(catalog.sources)
        yield catalog, base, sources
    finally:
        close_inputs(base, sources)


def published_line(snapshot: Snapshot, manifest: Manifest, plan_path: Optional[str] = None) -> str:
    """Machine-parseable summary of one published snapshot"""
    plan_path = plan_path or str(Path(snapshot.manifest_path).parent / PLAN_FILE)
    return (
        f"published snapshot={snapshot.snapshot_id} manifest={snapshot.manifest_path} "
        f"plan={manifest.plan_digest} plan_path={plan_path}"
    )


def print_json(model: BaseModel) -> None:
    print(json.dumps(model.model_dump(mode="json"), indent=2, sort_keys=True))

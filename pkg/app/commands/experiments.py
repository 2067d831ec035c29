import argparse
from pathlib import Path

from app.commands.common import add_budget_args, add_operator_args, operator_params, parse_list
from app.schemas import Budget, FamilySpec
from app.services.experiments import (
    DEFAULT_FRACTIONS,
    budget_sweep,
    overhead_report,
    render_costs,
    render_table,
    scaling_sweep,
    spearman,
    write_csv,
)
from app.services.family import load_family


def register(subparsers) -> None:
    sweep = subparsers.add_parser("sweep", help="budget sweep over one family")
    sweep.add_argument("--family", required=True)
    sweep.add_argument("--fractions", default=",".join(str(f) for f in DEFAULT_FRACTIONS))
    sweep.add_argument("--repeats", type=int, default=1, help="runs per fraction; the fastest is kept")
    sweep.add_argument("--warm", action="store_true", help="skip page cache eviction")
    sweep.add_argument("--jobs", type=int, default=None)
    sweep.add_argument("--csv", help="write rows to this CSV file")
    add_operator_args(sweep)
    sweep.set_defaults(handler=run_sweep)

    scale = subparsers.add_parser("scale", help="naive versus budgeted reads as K grows")
    scale.add_argument("--ks", default="2,4,8,16")
    scale.add_argument("--budget-bytes", type=int, required=True)
    scale.add_argument("--spec", help="family spec JSON used as the template")
    scale.add_argument("--csv")
    add_operator_args(scale)
    scale.set_defaults(handler=run_scale)

    overhead = subparsers.add_parser("overhead", help="four-channel cost breakdown of one run")
    overhead.add_argument("--family", required=True)
    add_budget_args(overhead)
    add_operator_args(overhead)
    overhead.set_defaults(handler=run_overhead)


def _scratch(args: argparse.Namespace, name: str) -> Path:
    return Path(args.workspace) / "experiments" / name


def run_sweep(args: argparse.Namespace) -> int:
    params = operator_params(args)
    rows = budget_sweep(
        load_family(args.family),
        params,
        _scratch(args, f"sweep-{params.operator}"),
        parse_list(args.fractions),
        cold_cache=not args.warm,
        repeats=args.repeats,
        jobs=args.jobs,
    )
    print(render_table(rows))
    if len(rows) > 1:
        rho = spearman([r.wall_seconds for r in rows], [r.expert_bytes for r in rows])
        print(f"\nspearman(wall_seconds, expert_bytes) = {rho:.3f}")
    if args.csv:
        write_csv(rows, args.csv)
    return 0


def run_scale(args: argparse.Namespace) -> int:
    template = FamilySpec.model_validate_json(Path(args.spec).read_bytes()) if args.spec else None
    rows, r2 = scaling_sweep(
        parse_list(args.ks, int), args.budget_bytes, _scratch(args, "scale"), template, operator_params(args)
    )
    print(render_table(rows))
    print(f"\nnaive expert bytes vs K: linear fit R^2 = {r2:.5f}")
    if args.csv:
        write_csv(rows, args.csv)
    return 0


def run_overhead(args: argparse.Namespace) -> int:
    budget = Budget.of_bytes(args.budget_bytes) if args.budget_bytes is not None else None
    report = overhead_report(
        load_family(args.family),
        operator_params(args),
        _scratch(args, "overhead"),
        budget,
        fraction=args.budget_frac,
    )
    print(render_costs(report))
    return 0

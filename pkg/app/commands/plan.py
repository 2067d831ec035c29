import argparse

from app.commands.common import add_budget_args, add_operator_args, budget_from_args, operator_params
from app.services.catalog import load_catalog
from app.services.planner import SCORING_RULES, make_plan, save_plan


def register(subparsers) -> None:
    parser = subparsers.add_parser("plan", help="select access units under an expert-read budget")
    parser.add_argument("--catalog", required=True)
    parser.add_argument("--out", default="plan.json")
    parser.add_argument("--scoring-rule", choices=SCORING_RULES, default=None)
    add_budget_args(parser)
    add_operator_args(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    """Plan against a catalog and write the plan file"""
    catalog = load_catalog(args.catalog)
    budget = budget_from_args(args, catalog)
    plan, seconds = make_plan(catalog, operator_params(args), budget, args.scoring_rule)
    path = save_plan(plan, args.out)
    budget_text = "FULL" if budget.is_full else str(budget.limit_bytes)
    print(
        f"plan digest={plan.digest} path={path} selected={len(plan.selected)}/{len(catalog)} "
        f"estimated={plan.estimated_cost} budget={budget_text} seconds={seconds:.6f}"
    )
    return 0

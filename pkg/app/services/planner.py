"""Greedy budget-aware planning over catalog statistics."""

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

from pydantic import ValidationError

from app.config import settings
from app.errors import OperatorParamsError, PlanMismatchError
from app.schemas import AccessUnit, Budget, MergePlan, OperatorParams
from app.services.catalog import Catalog
from app.services.costmodel import AccessMask, mask_cost
from app.services.operators import resolved_alphas, validate_params
from app.utils import canonical_json, logger, sha256_hex

SCORING_RULES = ("utility", "utility-per-byte")


@dataclass(frozen=True)
class CandidateScore:
    unit: AccessUnit
    utility: float
    byte_cost: int
    score: float
    has_stats: bool = True


def _score(utility: float, byte_cost: int, rule: str) -> float:
    if rule == "utility":
        return utility
    if byte_cost == 0:
        return math.inf if utility > 0 else 0.0
    return utility / byte_cost


def score_candidates(catalog: Catalog, params: OperatorParams, scoring_rule: Optional[str] = None) -> List[CandidateScore]:
    """Score every catalog unit; scored units by decreasing score, fallback units last.

    Ties break by (tensor, block_index, expert) ascending. Utility is
    |alpha_i| * delta_l2 with alpha = 1/K for operators without fixed
    coefficients.
    """
    rule = scoring_rule or settings.SCORING_RULE
    if rule not in SCORING_RULES:
        raise OperatorParamsError(f"unknown scoring rule {rule!r}")
    experts = catalog.experts
    if params.operator == "avg-fixed":
        alphas = dict(zip(experts, resolved_alphas(params, len(experts))))
    else:
        alphas = {expert: 1.0 / len(experts) for expert in experts}
    scored, fallback = [], []
    for entry in catalog:
        stats = entry.stats
        if not stats.has_stats or stats.delta_l2 is None:
            fallback.append(CandidateScore(entry.unit, 0.0, stats.byte_cost, 0.0, has_stats=False))
            continue
        utility = abs(alphas[entry.expert]) * stats.delta_l2
        scored.append(CandidateScore(entry.unit, utility, stats.byte_cost, _score(utility, stats.byte_cost, rule)))
    scored.sort(key=lambda c: (-c.score, *c.unit.canonical_order()))
    fallback.sort(key=lambda c: c.unit.canonical_order())
    return scored + fallback


def plan_digest(plan: MergePlan) -> str:
    """SHA-256 over the canonical plan, excluding the digest field itself"""
    return sha256_hex(canonical_json(plan.model_dump(mode="json", exclude={"digest"})))


def plan_greedy(
    candidates: List[CandidateScore],
    budget: Budget,
    *,
    catalog: Catalog,
    params: OperatorParams,
    traversal_order: Optional[List[str]] = None,
) -> MergePlan:
    """Scan candidates in score order and keep each one that still fits.

    A candidate that does not fit is skipped, not a stop signal. The FULL
    budget selects the whole universe; a budget of zero bytes selects
    nothing, zero-cost units included.
    """
    validate_params(params, len(catalog.experts))
    full_cost = catalog.full_cost()
    limit = budget.resolve(full_cost)
    selected: List[AccessUnit] = []
    estimated = 0
    for candidate in candidates:
        if budget.is_full or (limit > 0 and estimated + candidate.byte_cost <= limit):
            selected.append(candidate.unit)
            estimated += candidate.byte_cost
    selected.sort(key=AccessUnit.canonical_order)
    plan = MergePlan(
        operator=params,
        experts=catalog.experts,
        selected=selected,
        traversal_order=traversal_order or catalog.traversal_order,
        budget=budget,
        estimated_cost=estimated,
        universe_digest=catalog.universe_digest(),
        base_id=catalog.base_id,
    )
    plan.digest = plan_digest(plan)
    return plan


def make_plan(
    catalog: Catalog,
    params: OperatorParams,
    budget: Budget,
    scoring_rule: Optional[str] = None,
) -> Tuple[MergePlan, float]:
    """Score and plan in one step; returns the plan and planning seconds"""
    started = time.perf_counter()
    candidates = score_candidates(catalog, params, scoring_rule)
    plan = plan_greedy(candidates, budget, catalog=catalog, params=params)
    elapsed = time.perf_counter() - started
    logger.info(
        f"Planned {params.operator}: {len(plan.selected)}/{len(catalog)} units, "
        f"estimated {plan.estimated_cost} of budget {budget.resolve(catalog.full_cost())} bytes "
        f"(digest {plan.digest[:12]})"
    )
    return plan, elapsed


def plan_mask(plan: MergePlan) -> AccessMask:
    return AccessMask(plan.selected, plan.universe_digest)


def validate_plan(plan: MergePlan, catalog: Optional[Catalog] = None) -> None:
    """Digest, cost and universe checks before a plan is executed or verified"""
    if plan_digest(plan) != plan.digest:
        raise PlanMismatchError(f"plan digest {plan.digest[:12]} does not match its contents")
    if catalog is None:
        return
    if plan.universe_digest != catalog.universe_digest():
        raise PlanMismatchError("plan was made against a different catalog universe")
    if mask_cost(plan_mask(plan), catalog) != plan.estimated_cost:
        raise PlanMismatchError("plan estimated cost disagrees with catalog byte costs")
    if plan.estimated_cost > plan.budget.resolve(catalog.full_cost()):
        raise PlanMismatchError("plan estimated cost exceeds its budget")


def save_plan(plan: MergePlan, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(canonical_json(plan.model_dump(mode="json")))
    return path


def load_plan(path: Union[str, Path]) -> MergePlan:
    try:
        plan = MergePlan.model_validate_json(Path(path).read_bytes())
    except (OSError, ValidationError, json.JSONDecodeError) as e:
        raise PlanMismatchError(f"cannot load plan {path}: {e}")
    validate_plan(plan)
    return plan

"""Budgets, per-unit costs, the mask-cost functional and run metering."""

import threading
from collections import Counter
from typing import Dict, FrozenSet, Iterable, Optional

from app.errors import BudgetViolationError, MissingStatsError, ValidationFailure
from app.schemas import AccessUnit, BlockKey, Channel, CostBreakdown


class AccessMask:
    """Selected access units over a catalog universe. Omissions exist only as absence."""

    def __init__(self, selected: Iterable[AccessUnit], universe_digest: str = ""):
        self.selected: FrozenSet[AccessUnit] = frozenset(AccessUnit(u[0], BlockKey(*u[1])) for u in selected)
        self.universe_digest = universe_digest

    def __contains__(self, unit: AccessUnit) -> bool:
        return unit in self.selected

    def __len__(self) -> int:
        return len(self.selected)

    def __le__(self, other: "AccessMask") -> bool:
        return self.selected <= other.selected

    def row(self, key, experts) -> tuple:
        """Mask bits of one block over the ordered expert list"""
        return tuple(AccessUnit(expert, key) in self.selected for expert in experts)

    def rows(self, experts) -> Dict:
        """Mask rows for every block holding at least one selected unit"""
        keys = {unit.key for unit in self.selected}
        return {key: self.row(key, experts) for key in keys}


class IoMeter:
    """Per-channel byte counters plus a per-unit read trace.

    Reads done by catalog analysis are charged to the metadata channel unless
    the meter belongs to a merge run (``in_run``), in which case they count as
    expert reads. ``expert_limit`` turns any expert read past the planned cost
    into a hard failure.
    """

    def __init__(self, in_run: bool = False, expert_limit: Optional[int] = None):
        self.in_run = in_run
        self.expert_limit = expert_limit
        self._lock = threading.Lock()
        self._bytes: Dict[Channel, int] = {channel: 0 for channel in Channel}
        self.trace: Counter = Counter()
        self.unit_bytes: Counter = Counter()

    def charge(self, channel: Channel, nbytes: int, unit: Optional[AccessUnit] = None) -> None:
        if nbytes < 0:
            raise ValueError("byte counts are nonnegative")
        channel = Channel(channel)
        with self._lock:
            if channel is Channel.EXPERT and self.expert_limit is not None:
                if self._bytes[channel] + nbytes > self.expert_limit:
                    raise BudgetViolationError(
                        f"expert reads would reach {self._bytes[channel] + nbytes} bytes, "
                        f"planned cost is {self.expert_limit}"
                    )
            self._bytes[channel] += nbytes
            if unit is not None and channel is Channel.EXPERT:
                self.unit_bytes[unit] += nbytes

    @property
    def analysis_channel(self) -> Channel:
        """Channel that catalog analysis reads are charged to"""
        return Channel.EXPERT if self.in_run else Channel.METADATA

    def record_pull(self, unit: AccessUnit) -> None:
        """Count one materialization of a unit's delta"""
        with self._lock:
            self.trace[unit] += 1

    def bytes(self, channel: Channel) -> int:
        with self._lock:
            return self._bytes[Channel(channel)]

    def breakdown(self) -> CostBreakdown:
        with self._lock:
            return CostBreakdown(
                base_bytes=self._bytes[Channel.BASE],
                expert_bytes=self._bytes[Channel.EXPERT],
                output_bytes=self._bytes[Channel.OUTPUT],
                metadata_bytes=self._bytes[Channel.METADATA],
            )


def mask_cost(mask: AccessMask, catalog) -> int:
    """Controllable expert-read cost: sum of byte costs over selected units"""
    total = 0
    for unit in mask.selected:
        cost = catalog.byte_cost(unit)
        if cost is None:
            raise MissingStatsError(f"unit {unit} is not in the catalog")
        total += cost
    return total


def expert_read_fraction(run_expert_bytes: int, k: int, mean_expert_cost: float) -> float:
    """Realized expert bytes over the full-read expert volume K * mean cost"""
    denominator = k * mean_expert_cost
    if k < 1 or denominator <= 0:
        raise ValidationFailure("expert count and mean expert cost must be positive")
    return run_expert_bytes / denominator


def fraction_cap(budget_bytes: int, k: int, mean_expert_cost: float) -> float:
    """Upper bound B / (K * mean cost) on the expert-read fraction"""
    return expert_read_fraction(budget_bytes, k, mean_expert_cost)

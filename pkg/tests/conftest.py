import os

# Keep test runs from writing the rotating log file
os.environ.setdefault("BLOCKMERGE_LOG_FILE", "")
os.environ.setdefault("BLOCKMERGE_LOG_LEVEL", "WARNING")

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import pytest

from app.schemas import AccessUnit, BlockKey, BlockStats, Budget, CatalogEntry, FamilySpec, MergePlan, OperatorParams, TensorSpec
from app.services.catalog import Catalog, build_catalog, persist_catalog
from app.services.container import CheckpointHandle
from app.services.costmodel import IoMeter
from app.services.delta_source import DeltaSource
from app.services.executor import execute
from app.services.family import FamilyLayout, generate_family, open_family
from app.services.planner import make_plan, plan_digest
from app.services.snapshots import SnapshotStore

# 8 + 2 + 6 blocks at 64-byte blocks
SMALL_TENSORS = [
    TensorSpec(name="layers.0.mlp.up", shape=[16, 8]),
    TensorSpec(name="layers.0.norm", shape=[24]),
    TensorSpec(name="layers.1.attn.qkv", shape=[12, 8]),
]
SMALL_BLOCKS = 16


def small_spec(**overrides) -> FamilySpec:
    data = dict(k=3, tensors=SMALL_TENSORS, block_bytes=64, delta_scale=0.02, seed=0)
    data.update(overrides)
    return FamilySpec(**data)


def as_bits(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array, dtype=np.float32).view(np.uint32)


@dataclass
class Rig:
    """A generated family with its catalog and a private snapshot store"""
    root: Path
    layout: FamilyLayout
    base: CheckpointHandle
    sources: List[DeltaSource]
    catalog: Catalog
    store: SnapshotStore

    def plan(self, params: Optional[OperatorParams] = None, budget: Optional[Budget] = None, scoring_rule=None) -> MergePlan:
        plan, _ = make_plan(self.catalog, params or OperatorParams(), budget or Budget.full(), scoring_rule)
        return plan

    def masked_plan(self, params: OperatorParams, selected) -> MergePlan:
        """A plan selecting exactly the given units"""
        selected = sorted(selected, key=AccessUnit.canonical_order)
        plan = self.plan(params, Budget.full()).model_copy(update={"selected": selected, "digest": ""})
        cost = sum(self.catalog.byte_cost(unit) for unit in selected)
        plan = plan.model_copy(update={"estimated_cost": cost, "budget": Budget.of_bytes(cost)})
        plan.digest = plan_digest(plan)
        return plan

    def run(self, plan: MergePlan, **kwargs):
        return execute(plan, self.base, self.sources, self.store, self.catalog, **kwargs)

    def close(self) -> None:
        self.base.close()
        for source in self.sources:
            source.handle.close()


@pytest.fixture
def rig_factory(tmp_path):
    """Build rigs from small family specs; keyword arguments override the spec"""
    counter = itertools.count()
    rigs: List[Rig] = []

    def build(**overrides) -> Rig:
        root = tmp_path / f"rig{next(counter)}"
        layout = generate_family(small_spec(**overrides), root / "family")
        base, sources = open_family(layout)
        catalog = build_catalog(base, sources, IoMeter())
        persist_catalog(catalog, root / "catalog.jsonl")
        rig = Rig(root, layout, base, sources, catalog, SnapshotStore(root / "workspace"))
        rigs.append(rig)
        return rig

    yield build
    for rig in rigs:
        rig.close()


@pytest.fixture
def rig(rig_factory) -> Rig:
    return rig_factory()


def hand_catalog(rows, base_id: str = "base") -> Catalog:
    """Catalog from (expert, tensor, block, byte_cost, delta_l2) rows; delta_l2 None means no stats"""
    entries = [
        CatalogEntry(
            expert=expert,
            key=BlockKey(tensor, block),
            stats=BlockStats(byte_cost=cost, delta_l2=l2, has_stats=l2 is not None),
            base_id=base_id,
        )
        for expert, tensor, block, cost, l2 in rows
    ]
    return Catalog(base_id, entries, traversal_order=sorted({row[1] for row in rows}))



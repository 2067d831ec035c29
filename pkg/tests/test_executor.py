from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from app import crud
from app.database import get_db
from app.errors import (
    BudgetViolationError,
    GeometryMismatchError,
    InjectedFault,
    PlanMismatchError,
    PostPublishError,
    SoundnessError,
    TransactionAbortedError,
)
from app.schemas import AccessUnit, BlockKey, Budget, Channel, Lineage, OperatorParams, TouchedBlock
from app.services.container import BlockBuffer, payload_digest
from app.services.costmodel import IoMeter
from app.services.executor import apply_budgeted_op, build_manifest, check_run_budget, execute, replay
from app.services.operators import MaskedDeltaTuple
from app.services.planner import load_plan, plan_digest
from app.services.snapshots import STAGES, FaultInjector, SnapshotStore, load_manifest, open_snapshot
from app.services.verify import full_read_merge, load_tensors, verify_run
from conftest import as_bits

OPERATORS = [
    OperatorParams(operator="avg-fixed"),
    OperatorParams(operator="avg-renorm"),
    OperatorParams(operator="ties", ties_density=0.3),
    OperatorParams(operator="dare", dare_drop_p=0.4, seed=5),
]


def _merged(rig, snapshot):
    with open_snapshot(snapshot.path, base=rig.base) as handle:
        return load_tensors(handle)


def _forge(plan, **update):
    forged = plan.model_copy(update=update)
    forged.digest = plan_digest(forged)
    return forged


class TestApplyBudgetedOp:
    """Test the per-block operator application"""

    def test_zero_delta(self):
        """Test an empty mask returns the base block"""
        base = BlockBuffer(BlockKey("t", 0), np.array([1.0, 1.0], np.float32), 8)
        out = apply_budgeted_op(base, MaskedDeltaTuple((False,), {}, 2), OperatorParams(alphas=[1.0]))
        assert out.values.tolist() == [1.0, 1.0]

    def test_fixed_average(self):
        """Test base [1,1] plus delta [2,4] at weight 1 gives [3,5]"""
        base = BlockBuffer(BlockKey("t", 0), np.array([1.0, 1.0], np.float32), 8)
        tuple_ = MaskedDeltaTuple((True,), {0: np.array([2.0, 4.0], np.float32)}, 2)
        out = apply_budgeted_op(base, tuple_, OperatorParams(alphas=[1.0]))
        assert out.values.tolist() == [3.0, 5.0]
        assert out.byte_len == 8

    def test_length_mismatch(self):
        """Test a tuple longer than the base block is rejected"""
        base = BlockBuffer(BlockKey("t", 0), np.array([1.0, 1.0], np.float32), 8)
        tuple_ = MaskedDeltaTuple((True,), {0: np.ones(3, np.float32)}, 3)
        with pytest.raises(GeometryMismatchError):
            apply_budgeted_op(base, tuple_, OperatorParams(alphas=[1.0]))


class TestExecute:
    """Test end-to-end execution and publishing"""

    @pytest.mark.parametrize("params", OPERATORS, ids=lambda p: p.operator)
    def test_full_budget_matches_full_read(self, rig, params):
        """Test a FULL plan reproduces the full-read merge bit for bit"""
        snapshot, manifest = rig.run(rig.plan(params))
        merged = _merged(rig, snapshot)
        reference = full_read_merge(rig.base, rig.sources, params)
        for name in rig.base.tensor_order:
            assert np.array_equal(as_bits(merged[name]), as_bits(reference[name])), name
        assert manifest.costs.expert_bytes == rig.catalog.full_cost()

    def test_empty_plan_returns_base(self, rig):
        """Test a zero budget publishes the base payload with no expert reads"""
        snapshot, manifest = rig.run(rig.plan(budget=Budget.of_bytes(0)))
        merged = _merged(rig, snapshot)
        for name in rig.base.tensor_order:
            base_values = load_tensors(rig.base)[name]
            assert np.array_equal(as_bits(merged[name]), as_bits(base_values))
        assert manifest.costs.expert_bytes == 0
        assert manifest.touched == []
        assert all(share == 0.0 for shares in manifest.coverage.values() for share in shares.values())
        assert snapshot.snapshot_id == rig.base.header.payload_sha256

    def test_published_layout(self, rig):
        """Test the snapshot directory holds container, manifest and plan"""
        snapshot, manifest = rig.run(rig.plan(budget=Budget.of_fraction(0.5, rig.catalog.full_cost())))
        path = Path(snapshot.path)
        assert path.name == snapshot.snapshot_id == manifest.output_digest
        assert sorted(p.name for p in path.iterdir()) == ["header.json", "manifest.json", "payload.bin", "plan.json"]
        assert rig.store.list_staging() == []
        with open_snapshot(path, base=rig.base, verify_integrity=True) as handle:
            assert payload_digest(handle) == manifest.output_digest

    def test_costs(self, rig):
        """Test every channel of a half-budget run"""
        plan = rig.plan(budget=Budget.of_fraction(0.5, rig.catalog.full_cost()))
        _, manifest = rig.run(plan)
        payload = sum(meta.nbytes for meta in rig.base.header.tensors)
        costs = manifest.costs
        assert costs.expert_bytes == plan.estimated_cost <= plan.budget.limit_bytes
        assert costs.base_bytes == payload
        assert costs.output_bytes == payload
        assert costs.metadata_bytes > rig.catalog.file_bytes > 0
        assert manifest.max_reads_per_unit == 1

    def test_touched_and_coverage(self, rig):
        """Test the manifest lists contributing experts per block"""
        tensor = "layers.0.norm"
        units = [AccessUnit("e01", BlockKey(tensor, b)) for b in range(2)] + [AccessUnit("e02", BlockKey(tensor, 1))]
        _, manifest = rig.run(rig.masked_plan(OperatorParams(), units))
        assert [(t.block_index, t.experts) for t in manifest.touched] == [(0, ["e01"]), (1, ["e01", "e02"])]
        assert manifest.coverage[tensor] == {"e00": 0.0, "e01": 1.0, "e02": 0.5}
        assert manifest.coverage["layers.0.mlp.up"]["e01"] == 0.0

    def test_commit_record(self, rig):
        """Test publishing records the snapshot in the ledger"""
        snapshot, manifest = rig.run(rig.plan())
        with get_db(rig.store.database_url) as db:
            record = crud.get_snapshot_record(db, snapshot.snapshot_id)
            assert record is not None
            assert record.plan_digest == manifest.plan_digest
            assert record.budget_bytes is None
            assert record.expert_bytes == manifest.costs.expert_bytes

    def test_identical_runs(self, rig):
        """Test two runs of one plan publish one snapshot with equal manifests"""
        plan = rig.plan(OperatorParams(operator="ties"), Budget.of_fraction(0.6, rig.catalog.full_cost()))
        first, first_manifest = rig.run(plan)
        second, second_manifest = rig.run(plan)
        assert first.snapshot_id == second.snapshot_id
        assert first_manifest.model_dump() == second_manifest.model_dump()
        assert rig.store.list_snapshots() == [first.snapshot_id]

    def test_jobs_do_not_change_output(self, rig):
        """Test concurrent block computation is bit-identical to sequential"""
        plan = rig.plan(OperatorParams(operator="dare", seed=9), Budget.of_fraction(0.7, rig.catalog.full_cost()))
        sequential, first = rig.run(plan, jobs=1)
        parallel, second = rig.run(plan, jobs=4)
        assert sequential.snapshot_id == parallel.snapshot_id
        assert first.model_dump() == second.model_dump()

    def test_reference_mode(self, rig):
        """Test untouched blocks become base references without changing the snapshot id"""
        units = [AccessUnit("e00", BlockKey("layers.0.mlp.up", b)) for b in range(3)]
        plan = rig.masked_plan(OperatorParams(), units)
        referenced, manifest = rig.run(plan, reference_mode=True)
        materialized, plain = execute(plan, rig.base, rig.sources, SnapshotStore(rig.root / "plain"), rig.catalog)
        assert referenced.snapshot_id == materialized.snapshot_id
        assert manifest.reference_mode == True
        assert len(manifest.references) == 16 - 3
        assert manifest.costs.output_bytes < plain.costs.output_bytes
        assert manifest.costs.base_bytes == plain.costs.base_bytes
        merged = _merged(rig, referenced)
        for name, values in _merged(rig, materialized).items():
            assert np.array_equal(as_bits(merged[name]), as_bits(values))
        with pytest.raises(GeometryMismatchError):
            open_snapshot(referenced.path)

    def test_partial_plan_reads_only_selected(self, rig):
        """Test realized expert bytes equal the selected units' costs"""
        units = [AccessUnit("e02", BlockKey("layers.1.attn.qkv", b)) for b in (0, 5)]
        plan = rig.masked_plan(OperatorParams(operator="avg-renorm"), units)
        _, manifest = rig.run(plan)
        assert manifest.costs.expert_bytes == sum(rig.catalog.byte_cost(u) for u in units) == plan.estimated_cost


class TestPlanChecks:
    """Test plans that must not execute"""

    def test_tampered_plan(self, rig):
        """Test a plan whose digest does not match is refused"""
        plan = rig.plan()
        plan.estimated_cost -= 1
        with pytest.raises(PlanMismatchError):
            rig.run(plan)

    def test_plan_for_another_base(self, rig_factory):
        """Test a plan built for a different base is refused"""
        first, second = rig_factory(), rig_factory(seed=1)
        with pytest.raises(PlanMismatchError):
            execute(first.plan(), second.base, second.sources, second.store)

    def test_plan_for_another_catalog(self, rig_factory):
        """Test a plan whose universe differs from the catalog is refused"""
        first, second = rig_factory(), rig_factory(seed=1)
        with pytest.raises(PlanMismatchError):
            execute(first.plan(), first.base, first.sources, first.store, second.catalog)

    def test_missing_source(self, rig):
        """Test every planned expert needs a source"""
        with pytest.raises(PlanMismatchError):
            execute(rig.plan(), rig.base, rig.sources[:2], rig.store, rig.catalog)

    def test_traversal_order_must_cover_base(self, rig):
        """Test a plan traversing other tensors is refused"""
        plan = _forge(rig.plan(), traversal_order=rig.base.tensor_order[:2])
        with pytest.raises(PlanMismatchError):
            execute(plan, rig.base, rig.sources, rig.store)


class TestAtomicity:
    """Test that failures before publishing leave nothing visible"""

    @pytest.mark.parametrize("stage", STAGES)
    def test_abort_at_every_stage(self, rig, stage):
        """Test an injected abort leaves no snapshot and no staging, then a re-run publishes"""
        plan = rig.plan(budget=Budget.of_fraction(0.5, rig.catalog.full_cost()))
        with pytest.raises(InjectedFault) as excinfo:
            rig.run(plan, faults=FaultInjector(stage))
        assert excinfo.value.exit_code == 4
        assert rig.store.list_snapshots() == []
        assert rig.store.list_staging() == []
        with get_db(rig.store.database_url) as db:
            assert crud.list_snapshot_records(db) == []
        snapshot, _ = rig.run(plan)
        assert rig.store.list_snapshots() == [snapshot.snapshot_id]

    def test_unknown_stage(self):
        """Test fault injection only accepts known stages"""
        with pytest.raises(ValueError):
            FaultInjector("halfway")

    def test_budget_violation_mid_run(self, rig):
        """Test expert reads past the planned cost abort the run"""
        units = [AccessUnit("e00", BlockKey("layers.0.mlp.up", b)) for b in range(4)]
        plan = rig.masked_plan(OperatorParams(), units)
        forged = _forge(plan, estimated_cost=plan.estimated_cost - 1, budget=Budget.of_bytes(plan.estimated_cost - 1))
        with pytest.raises(BudgetViolationError) as excinfo:
            execute(forged, rig.base, rig.sources, rig.store)
        assert excinfo.value.exit_code == 3
        assert rig.store.list_snapshots() == []
        assert rig.store.list_staging() == []

    def test_commit_record_failure_after_publish(self, rig):
        """Test a ledger failure after the rename is a post-publish error"""
        with patch("app.services.snapshots.crud.create_snapshot_record", side_effect=RuntimeError("ledger down")):
            with pytest.raises(PostPublishError) as excinfo:
                rig.run(rig.plan())
        assert excinfo.value.exit_code == 5
        assert len(rig.store.list_snapshots()) == 1

    def test_rename_failure_aborts(self, rig):
        """Test a failed rename leaves the namespace unchanged"""
        with patch("app.services.snapshots.os.rename", side_effect=OSError("read-only")):
            with pytest.raises(TransactionAbortedError):
                rig.run(rig.plan())
        assert rig.store.list_snapshots() == []
        assert rig.store.list_staging() == []


class TestPublishCollisions:
    """Test runs of different plans that publish the same output"""

    def _colliding(self, rig):
        first_plan = rig.plan(OperatorParams(), Budget.of_bytes(0))
        second_plan = rig.plan(OperatorParams(operator="dare", seed=3), Budget.of_bytes(0))
        assert first_plan.digest != second_plan.digest
        first, _ = rig.run(first_plan)
        second, second_manifest = rig.run(second_plan)
        assert first.snapshot_id == second.snapshot_id
        return first_plan, first, second_plan, second, second_manifest

    def test_each_run_keeps_its_manifest(self, rig):
        """Test the later run gets its own manifest and plan beside the shared payload"""
        first_plan, first, second_plan, second, manifest = self._colliding(rig)
        assert rig.store.list_snapshots() == [first.snapshot_id]
        assert rig.store.list_staging() == []
        assert Path(first.manifest_path) == Path(first.path) / "manifest.json"
        assert Path(second.manifest_path) == Path(second.path) / "runs" / second_plan.digest / "manifest.json"
        assert load_manifest(first.path).plan_digest == first_plan.digest
        assert load_manifest(second.manifest_path).model_dump() == manifest.model_dump()
        assert load_manifest(second.path, second_plan.digest).model_dump() == manifest.model_dump()
        assert load_plan(Path(second.manifest_path).parent / "plan.json") == second_plan

    def test_verify_each_plan(self, rig):
        """Test both plans verify soundly against the shared snapshot"""
        first_plan, _, second_plan, second, _ = self._colliding(rig)
        for plan in (first_plan, second_plan):
            report = verify_run(second.path, plan, rig.base, rig.sources, rig.catalog, against_full=False)
            assert report.plan_digest == plan.digest
            assert report.soundness.passed

    def test_ledger_row_per_plan(self, rig):
        """Test the ledger records one row per plan under the shared snapshot id"""
        first_plan, first, second_plan, second, _ = self._colliding(rig)
        with get_db(rig.store.database_url) as db:
            records = crud.list_snapshot_records(db)
            assert sorted(r.plan_digest for r in records) == sorted([first_plan.digest, second_plan.digest])
            assert crud.get_snapshot_record(db, first.snapshot_id).plan_digest == first_plan.digest
            assert crud.get_snapshot_record(db, second.snapshot_id, second_plan.digest).manifest_path == second.manifest_path

    def test_replay_attached_run(self, rig):
        """Test replaying the later run's manifest resolves its own plan"""
        _, _, _, second, manifest = self._colliding(rig)
        replayed, again = replay(second.manifest_path, rig.store, rig.base, rig.sources, rig.catalog)
        assert replayed.manifest_path == second.manifest_path
        assert again.model_dump() == manifest.model_dump()
        with get_db(rig.store.database_url) as db:
            assert len(crud.list_snapshot_records(db)) == 2


class TestManifest:
    """Test manifest construction and run budget checks"""

    def test_touched_unit_without_trace(self, rig):
        """Test a touched block with no recorded pull is refused"""
        touch = [TouchedBlock(tensor="layers.0.norm", block_index=0, experts=["e00"])]
        lineage = Lineage(base_id=rig.base.checkpoint_id, experts=[])
        with pytest.raises(SoundnessError):
            build_manifest(rig.plan(), touch, {}, IoMeter(), "0" * 64, lineage)

    def test_stray_unit_in_trace(self, rig):
        """Test a pull of an unselected unit fails the run budget check"""
        plan = rig.masked_plan(OperatorParams(), [])
        meter = IoMeter()
        meter.record_pull(AccessUnit("e00", BlockKey("layers.0.norm", 0)))
        with pytest.raises(SoundnessError):
            check_run_budget(meter, plan)

    def test_realized_over_estimate(self, rig):
        """Test realized expert bytes above the estimate fail the check"""
        plan = rig.masked_plan(OperatorParams(), [])
        meter = IoMeter()
        meter.charge(Channel.EXPERT, 1)
        with pytest.raises(BudgetViolationError):
            check_run_budget(meter, plan)


class TestReplay:
    """Test re-execution of published manifests"""

    def test_replay_reproduces_snapshot(self, rig):
        """Test replaying a manifest gives the same snapshot id"""
        snapshot, manifest = rig.run(rig.plan(OperatorParams(operator="dare"), Budget.of_fraction(0.4, rig.catalog.full_cost())))
        replayed, again = replay(snapshot.manifest_path, rig.store, rig.base, rig.sources, rig.catalog)
        assert replayed.snapshot_id == snapshot.snapshot_id
        assert again.model_dump() == manifest.model_dump()

    def test_replay_into_fresh_store(self, rig):
        """Test a manifest replays from its snapshot directory into another workspace"""
        snapshot, _ = rig.run(rig.plan(OperatorParams(operator="ties")), reference_mode=True)
        other = SnapshotStore(rig.root / "other")
        replayed, manifest = replay(snapshot.path, other, rig.base, rig.sources)
        assert replayed.snapshot_id == snapshot.snapshot_id
        assert manifest.reference_mode == True

    def test_replay_with_other_base(self, rig_factory):
        """Test replay refuses a base the manifest was not built on"""
        first, second = rig_factory(), rig_factory(seed=2)
        snapshot, _ = first.run(first.plan())
        with pytest.raises(PlanMismatchError):
            replay(snapshot.manifest_path, first.store, second.base, first.sources)

    def test_replay_with_changed_expert(self, rig_factory):
        """Test replay refuses an expert whose checkpoint changed"""
        first, second = rig_factory(), rig_factory(seed=2)
        snapshot, _ = first.run(first.plan())
        sources = [first.sources[0], second.sources[1], first.sources[2]]
        with pytest.raises(PlanMismatchError):
            replay(snapshot.manifest_path, first.store, first.base, sources)

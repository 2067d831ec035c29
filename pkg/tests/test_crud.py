from app.crud import (
    create_catalog_record,
    create_snapshot_record,
    get_latest_catalog_record,
    get_snapshot_record,
    list_snapshot_records,
)
from app.database import get_db, init_db
from app.schemas import Budget


class TestSnapshotRecords:
    """Test the commit ledger of published snapshots"""

    def test_publish_records_snapshot(self, rig):
        """Test a published run is in the ledger with its costs"""
        plan = rig.plan(budget=Budget.of_fraction(0.5, rig.catalog.full_cost()))
        snapshot, manifest = rig.run(plan)
        with get_db(rig.store.database_url) as db:
            record = get_snapshot_record(db, snapshot.snapshot_id)
            assert record is not None
            assert record.plan_digest == plan.digest
            assert record.expert_bytes == manifest.costs.expert_bytes
            assert record.budget_bytes == plan.budget.limit_bytes
            assert record.manifest_path == snapshot.manifest_path

    def test_full_budget_has_no_limit(self, rig):
        """Test FULL runs record a NULL budget"""
        snapshot, _ = rig.run(rig.plan())
        with get_db(rig.store.database_url) as db:
            assert get_snapshot_record(db, snapshot.snapshot_id).budget_bytes is None

    def test_duplicate_record_is_reused(self, rig):
        """Test recording the same snapshot twice keeps one row"""
        snapshot, manifest = rig.run(rig.plan())
        with get_db(rig.store.database_url) as db:
            first = get_snapshot_record(db, snapshot.snapshot_id)
            again = create_snapshot_record(db, snapshot, manifest)
            assert again.id == first.id
            assert len(list_snapshot_records(db)) == 1

    def test_list_by_plan(self, rig):
        """Test listing filters by plan digest, newest first"""
        first, _ = rig.run(rig.plan(budget=Budget.of_bytes(0)))
        plan = rig.plan()
        second, _ = rig.run(plan)
        with get_db(rig.store.database_url) as db:
            assert [r.snapshot_id for r in list_snapshot_records(db)] == [second.snapshot_id, first.snapshot_id]
            assert [r.snapshot_id for r in list_snapshot_records(db, plan_digest=plan.digest)] == [second.snapshot_id]
            assert len(list_snapshot_records(db, limit=1)) == 1


class TestCatalogRecords:
    """Test catalog file records"""

    def test_latest_per_base(self, tmp_path):
        """Test the newest record wins and base filters apply"""
        url = f"sqlite:///{tmp_path}/ledger.db"
        init_db(url)
        with get_db(url) as db:
            create_catalog_record(db, "a.jsonl", "d1", "base-a", 10, 100)
            create_catalog_record(db, "b.jsonl", "d2", "base-b", 20, 200)
            create_catalog_record(db, "c.jsonl", "d3", "base-a", 30, 300)
        with get_db(url) as db:
            assert get_latest_catalog_record(db).path == "c.jsonl"
            assert get_latest_catalog_record(db, "base-b").entries == 20
            assert get_latest_catalog_record(db, "missing") is None

    def test_rollback_on_error(self, tmp_path):
        """Test a failing session scope leaves no record behind"""
        url = f"sqlite:///{tmp_path}/ledger.db"
        init_db(url)
        try:
            with get_db(url) as db:
                create_catalog_record(db, "a.jsonl", "d1", "base-a", 10, 100)
                raise RuntimeError("boom")
        except RuntimeError:
            pass
        with get_db(url) as db:
            assert get_latest_catalog_record(db) is None

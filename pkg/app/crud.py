from typing import List, Optional

from sqlalchemy import desc, select
from sqlalchemy.orm import Session

from app import models
from app.schemas import Manifest, Snapshot
from app.utils import logger


# Snapshot records
def get_snapshot_record(db: Session, snapshot_id: str, plan_digest: Optional[str] = None) -> Optional[models.SnapshotRecord]:
    """Get the first snapshot record by snapshot id, or the one of a given plan"""
    query = select(models.SnapshotRecord).where(models.SnapshotRecord.snapshot_id == snapshot_id)
    if plan_digest:
        query = query.where(models.SnapshotRecord.plan_digest == plan_digest)
    return db.execute(query.order_by(models.SnapshotRecord.id)).scalars().first()


def create_snapshot_record(db: Session, snapshot: Snapshot, manifest: Manifest) -> models.SnapshotRecord:
    """Record a published run; an existing record for the same snapshot and plan is returned as is"""
    existing = get_snapshot_record(db, snapshot.snapshot_id, manifest.plan_digest)
    if existing:
        logger.info(f"Snapshot {snapshot.snapshot_id[:12]} already recorded for plan {manifest.plan_digest[:12]}")
        return existing
    record = models.SnapshotRecord(
        snapshot_id=snapshot.snapshot_id,
        plan_digest=manifest.plan_digest,
        base_id=manifest.lineage.base_id,
        operator=manifest.operator.operator,
        budget_bytes=manifest.budget.limit_bytes,
        estimated_cost=manifest.estimated_cost,
        expert_bytes=manifest.costs.expert_bytes,
        reference_mode=manifest.reference_mode,
        path=snapshot.path,
        manifest_path=snapshot.manifest_path,
    )
    db.add(record)
    db.flush()
    logger.info(f"Recorded snapshot {snapshot.snapshot_id[:12]} for plan {manifest.plan_digest[:12]}")
    return record


def list_snapshot_records(db: Session, plan_digest: Optional[str] = None, limit: int = 100) -> List[models.SnapshotRecord]:
    """Most recent snapshot records, optionally for one plan"""
    query = select(models.SnapshotRecord)
    if plan_digest:
        query = query.where(models.SnapshotRecord.plan_digest == plan_digest)
    query = query.order_by(desc(models.SnapshotRecord.id)).limit(limit)
    return list(db.execute(query).scalars().all())


# Catalog records
def create_catalog_record(db: Session, path: str, digest: str, base_id: str, entries: int, size_bytes: int) -> models.CatalogRecord:
    """Record a persisted catalog file"""
    record = models.CatalogRecord(path=path, digest=digest, base_id=base_id, entries=entries, size_bytes=size_bytes)
    db.add(record)
    db.flush()
    logger.info(f"Recorded catalog {path} ({entries} entries, {size_bytes} bytes)")
    return record


def get_latest_catalog_record(db: Session, base_id: Optional[str] = None) -> Optional[models.CatalogRecord]:
    """Most recently recorded catalog, optionally for one base"""
    query = select(models.CatalogRecord)
    if base_id:
        query = query.where(models.CatalogRecord.base_id == base_id)
    return db.execute(query.order_by(desc(models.CatalogRecord.id)).limit(1)).scalars().first()

from datetime import datetime, timezone

from sqlalchemy import BigInteger, Boolean, Column, DateTime, Integer, String, UniqueConstraint

from app.database import Base


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class SnapshotRecord(Base):
    """Commit record of one run publishing a snapshot; runs with equal output share the snapshot id"""
    __tablename__ = "snapshots"
    __table_args__ = (UniqueConstraint("snapshot_id", "plan_digest", name="uq_snapshot_plan"),)

    id = Column(Integer, primary_key=True, index=True)
    snapshot_id = Column(String(64), index=True, nullable=False)
    plan_digest = Column(String(64), index=True, nullable=False)
    base_id = Column(String(64), index=True, nullable=False)
    operator = Column(String(32), nullable=False)
    budget_bytes = Column(BigInteger, nullable=True)  # NULL for the FULL budget
    estimated_cost = Column(BigInteger, nullable=False)
    expert_bytes = Column(BigInteger, nullable=False)
    reference_mode = Column(Boolean, default=False)
    path = Column(String, nullable=False)
    manifest_path = Column(String, nullable=False)
    created_at = Column(DateTime(timezone=True), default=_utcnow)


class CatalogRecord(Base):
    """A persisted catalog file and its size"""
    __tablename__ = "catalogs"

    id = Column(Integer, primary_key=True, index=True)
    path = Column(String, nullable=False)
    digest = Column(String(64), index=True, nullable=False)
    base_id = Column(String(64), index=True, nullable=False)
    entries = Column(Integer, nullable=False)
    size_bytes = Column(BigInteger, nullable=False)
    created_at = Column(DateTime(timezone=True), default=_utcnow)

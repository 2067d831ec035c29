"""Staging transactions and atomic, content-addressed snapshot publishing.

Workspace layout::

    <workspace>/staging/<uuid>/      private to one running transaction
    <workspace>/snapshots/<sid>/     header.json, payload.bin, manifest.json, plan.json
    <workspace>/snapshots/<sid>/runs/<plan_digest>/
                                     manifest.json, plan.json of later runs with the same output
    <workspace>/commits.db           commit-record ledger

A snapshot becomes visible through a single directory rename.
"""

import os
import shutil
import uuid
from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError

from app import crud
from app.config import settings
from app.database import get_db, init_db
from app.errors import (
    GeometryMismatchError,
    InjectedFault,
    IntegrityError,
    MalformedHeaderError,
    PostPublishError,
    TransactionAbortedError,
)
from app.schemas import BlockKey, ContainerHeader, Manifest, MergePlan, Snapshot
from app.services.container import CheckpointHandle, StagingWriter, _load_header, payload_digest
from app.services.costmodel import IoMeter
from app.utils import canonical_json, logger

MANIFEST_FILE = "manifest.json"
PLAN_FILE = "plan.json"
RUNS_DIR = "runs"

# Stage boundaries where an abort can be injected, in execution order
STAGES = (
    "begin",
    "first_block",
    "blocks_written",
    "flushed",
    "validated",
    "sealed",
    "manifest_built",
    "before_publish",
)


class FaultInjector:
    """Raises InjectedFault when execution crosses the configured stage"""

    def __init__(self, abort_at: Optional[str] = None):
        if abort_at is not None and abort_at not in STAGES:
            raise ValueError(f"unknown stage {abort_at!r}")
        self.abort_at = abort_at

    def check(self, stage: str) -> None:
        if stage == self.abort_at:
            raise InjectedFault(f"injected abort at stage {stage}")


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def _write_synced(path: Path, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())


class SnapshotStore:
    def __init__(self, root: Union[str, Path, None] = None):
        self.root = Path(root or settings.WORKSPACE_DIR)
        self.staging_dir = self.root / "staging"
        self.snapshots_dir = self.root / "snapshots"
        self.staging_dir.mkdir(parents=True, exist_ok=True)
        self.snapshots_dir.mkdir(parents=True, exist_ok=True)
        self.database_url = settings.database_url(str(self.root))
        init_db(self.database_url)

    def begin(self) -> "Transaction":
        return Transaction(self)

    def snapshot_path(self, snapshot_id: str) -> Path:
        return self.snapshots_dir / snapshot_id

    def list_snapshots(self):
        return sorted(p.name for p in self.snapshots_dir.iterdir() if p.is_dir())

    def list_staging(self):
        return sorted(p.name for p in self.staging_dir.iterdir())


class Transaction:
    """One execution's private staging area; aborts leave no published state"""

    def __init__(self, store: SnapshotStore):
        self.store = store
        self.id = uuid.uuid4().hex
        self.path = store.staging_dir / self.id
        self.path.mkdir()
        self.state = "active"
        self.writer: Optional[StagingWriter] = None
        logger.debug(f"Began transaction {self.id}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and self.state == "active":
            self.abort(str(exc))
        return False

    def open_writer(self, template: ContainerHeader, meter: IoMeter, reference_mode: bool = False) -> StagingWriter:
        if self.state != "active":
            raise TransactionAbortedError(f"transaction {self.id} is {self.state}")
        self.writer = StagingWriter(self.path, template, meter, reference_mode)
        return self.writer

    def abort(self, reason: str = "") -> None:
        if self.writer is not None:
            self.writer.close()
        shutil.rmtree(self.path, ignore_errors=True)
        self.state = "aborted"
        logger.error(f"Aborted transaction {self.id}" + (f": {reason}" if reason else ""))


def _attach_run(txn: Transaction, target: Path, plan_digest: str) -> Path:
    """Move this run's manifest and plan under an already published snapshot"""
    run_dir = target / RUNS_DIR / plan_digest
    if not run_dir.exists():
        staged = txn.path / RUNS_DIR / plan_digest
        staged.mkdir(parents=True)
        os.rename(txn.path / MANIFEST_FILE, staged / MANIFEST_FILE)
        os.rename(txn.path / PLAN_FILE, staged / PLAN_FILE)
        run_dir.parent.mkdir(exist_ok=True)
        try:
            os.rename(staged, run_dir)
        except OSError as e:
            if not run_dir.exists():
                txn.abort(f"rename failed: {e}")
                raise TransactionAbortedError(f"attaching plan {plan_digest[:12]} to {target.name[:12]} failed: {e}")
        _fsync_dir(run_dir.parent)
    return run_dir / MANIFEST_FILE


def atomic_publish(
    txn: Transaction,
    manifest: Manifest,
    plan: MergePlan,
    faults: Optional[FaultInjector] = None,
) -> Snapshot:
    """Rename the staged container into the snapshot namespace, then record the commit.

    Publishing an id that already exists is an idempotent success. When the
    existing snapshot came from another plan, this run's manifest and plan
    are kept under runs/<plan_digest>/ and the payload is not duplicated.
    """
    writer = txn.writer
    if txn.state != "active" or writer is None or not writer.closed:
        raise TransactionAbortedError(f"transaction {txn.id} is not ready to publish")
    snapshot_id = manifest.output_digest
    _write_synced(txn.path / MANIFEST_FILE, canonical_json(manifest.model_dump(mode="json")))
    _write_synced(txn.path / PLAN_FILE, canonical_json(plan.model_dump(mode="json")))
    _fsync_dir(txn.path)
    if faults:
        faults.check("before_publish")
    target = txn.store.snapshot_path(snapshot_id)
    manifest_path = target / MANIFEST_FILE
    if not target.exists():
        try:
            os.rename(txn.path, target)
        except OSError as e:
            if not target.exists():
                txn.abort(f"rename failed: {e}")
                raise TransactionAbortedError(f"publish of {snapshot_id[:12]} failed: {e}")
        _fsync_dir(txn.store.snapshots_dir)
    if txn.path.exists():
        if load_manifest(target).plan_digest != plan.digest:
            manifest_path = _attach_run(txn, target, plan.digest)
            logger.info(f"Snapshot {snapshot_id[:12]} already published; attached plan {plan.digest[:12]}")
        else:
            logger.info(f"Snapshot {snapshot_id[:12]} already published; publish is idempotent")
        shutil.rmtree(txn.path, ignore_errors=True)
    txn.state = "published"
    snapshot = Snapshot(
        snapshot_id=snapshot_id,
        path=str(target),
        manifest_path=str(manifest_path),
    )
    try:
        with get_db(txn.store.database_url) as db:
            crud.create_snapshot_record(db, snapshot, manifest)
    except Exception as e:
        raise PostPublishError(f"snapshot {snapshot_id[:12]} is published but its commit record failed: {e}")
    txn.state = "committed"
    logger.info(f"Published snapshot {snapshot_id[:12]} at {target}")
    return snapshot


def _read_manifest(path: Path) -> Manifest:
    try:
        return Manifest.model_validate_json(path.read_bytes())
    except (OSError, ValidationError) as e:
        raise MalformedHeaderError(f"cannot load manifest {path}: {e}")


def load_manifest(path: Union[str, Path], plan_digest: Optional[str] = None) -> Manifest:
    """Load a manifest file, or the manifest of a snapshot directory.

    With a plan digest, a snapshot directory yields that plan's run manifest
    when the root manifest belongs to another plan.
    """
    path = Path(path)
    if not path.is_dir():
        return _read_manifest(path)
    manifest = _read_manifest(path / MANIFEST_FILE)
    if plan_digest and manifest.plan_digest != plan_digest:
        run_manifest = path / RUNS_DIR / plan_digest / MANIFEST_FILE
        if run_manifest.exists():
            return _read_manifest(run_manifest)
    return manifest


def open_snapshot(
    path: Union[str, Path],
    base: Optional[CheckpointHandle] = None,
    verify_integrity: bool = False,
) -> CheckpointHandle:
    """Open a published snapshot; referenced blocks resolve to the base"""
    root = Path(path)
    manifest = load_manifest(root)
    header = _load_header(root)
    references = frozenset(BlockKey(*key) for key in manifest.references)
    if references and (base is None or base.checkpoint_id != manifest.lineage.base_id):
        raise GeometryMismatchError(f"{root} references base {manifest.lineage.base_id[:12]}; open it with that base")
    handle = CheckpointHandle(root, header, references=references, base=base)
    if verify_integrity and payload_digest(handle) != manifest.output_digest:
        raise IntegrityError(f"{root}: payload does not match manifest output digest")
    return handle

"""Per-block metadata catalog: byte costs, content hashes and delta norms.

Catalog file layout (one JSON document per line):

    {"format": "blockmerge-catalog", "version": 1, ...header...}
    {entry}            sorted by (expert, tensor, block_index)
    ...
    sha256:<hex>       digest of every preceding byte
"""

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from app.errors import CatalogFormatError, GeometryMismatchError
from app.schemas import AccessUnit, BlockKey, BlockStats, CatalogEntry, SourceRef
from app.services.container import CheckpointHandle, read_block
from app.services.costmodel import IoMeter
from app.services.delta_source import DeltaSource
from app.utils import canonical_json, logger, sha256_hex

CATALOG_FORMAT = "blockmerge-catalog"
CATALOG_VERSION = 1
TRAILER_PREFIX = b"sha256:"


def _entry_order(entry: CatalogEntry):
    return (entry.expert, entry.key.tensor, entry.key.block_index)


class Catalog:
    """Immutable set of catalog entries relative to one base checkpoint"""

    def __init__(
        self,
        base_id: str,
        entries: Iterable[CatalogEntry],
        sources: Sequence[SourceRef] = (),
        traversal_order: Sequence[str] = (),
        base_path: str = "",
    ):
        self.base_id = base_id
        self.base_path = base_path
        self.sources = sorted(sources, key=lambda ref: ref.expert_id)
        self.traversal_order = list(traversal_order)
        self.file_bytes = 0
        self.file_digest: Optional[str] = None
        self._entries: Dict[AccessUnit, CatalogEntry] = {}
        for entry in sorted(entries, key=_entry_order):
            if entry.base_id != base_id:
                raise CatalogFormatError(f"entry {entry.unit} is relative to base {entry.base_id[:12]}, not {base_id[:12]}")
            if entry.unit in self._entries:
                raise CatalogFormatError(f"duplicate catalog entry {entry.unit}")
            self._entries[entry.unit] = entry
        self.experts: List[str] = sorted({unit.expert for unit in self._entries} | {ref.expert_id for ref in self.sources})

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[CatalogEntry]:
        return iter(self._entries.values())

    def entry(self, unit: AccessUnit) -> Optional[CatalogEntry]:
        return self._entries.get(unit)

    def byte_cost(self, unit: AccessUnit) -> Optional[int]:
        entry = self._entries.get(unit)
        return entry.stats.byte_cost if entry else None

    def universe(self) -> List[AccessUnit]:
        return sorted(self._entries, key=AccessUnit.canonical_order)

    def keys(self) -> List[BlockKey]:
        return sorted({unit.key for unit in self._entries})

    def universe_digest(self) -> str:
        rows = [[u.expert, u.key.tensor, u.key.block_index, self._entries[u].stats.byte_cost] for u in self.universe()]
        return sha256_hex(canonical_json({"base_id": self.base_id, "universe": rows}))

    def full_cost(self) -> int:
        return sum(entry.stats.byte_cost for entry in self._entries.values())

    def mean_expert_cost(self) -> float:
        return self.full_cost() / len(self.experts) if self.experts else 0.0

    def source(self, expert: str) -> SourceRef:
        for ref in self.sources:
            if ref.expert_id == expert:
                return ref
        raise CatalogFormatError(f"catalog has no source reference for expert {expert}")


def analyze(
    base: CheckpointHandle,
    expert: Union[DeltaSource, CheckpointHandle],
    meter: IoMeter,
    with_stats: bool = True,
) -> List[CatalogEntry]:
    """Build one entry per block of one expert.

    Reads are charged to ``meter.analysis_channel``: metadata when run
    standalone, expert bytes when the meter belongs to a merge run.
    """
    if base is None:
        raise GeometryMismatchError("analysis needs a base checkpoint")
    source = expert if isinstance(expert, DeltaSource) else DeltaSource(expert.root.name, expert)
    source.check_geometry(base)
    channel = meter.analysis_channel
    entries: List[CatalogEntry] = []
    for tensor in base.tensor_order:
        factor_cache: Dict[str, np.ndarray] = {}
        for key in base.keys(tensor):
            byte_cost = source.unit_cost(base, key)
            if not with_stats:
                stats = BlockStats(byte_cost=byte_cost, has_stats=False)
            else:
                base_block = read_block(base, key, meter, channel) if source.kind == "full" else None
                delta = source.pull(base, key, base_block, meter, channel=channel, factor_cache=factor_cache)
                wide = delta.astype(np.float64)
                stats = BlockStats(
                    byte_cost=byte_cost,
                    content_hash=hashlib.sha256(delta.tobytes()).hexdigest(),
                    delta_l2=math.sqrt(float(np.dot(wide, wide))),
                )
            entries.append(CatalogEntry(expert=source.expert_id, key=key, stats=stats, base_id=base.checkpoint_id))
    logger.info(
        f"Analyzed {source.expert_id} ({source.kind}): {len(entries)} blocks"
        + ("" if with_stats else " with fallback metadata only")
    )
    return entries


def build_catalog(
    base: CheckpointHandle,
    sources: Sequence[DeltaSource],
    meter: IoMeter,
    jobs: int = 1,
    fallback_experts: Iterable[str] = (),
) -> Catalog:
    """Analyze every source (concurrently when jobs > 1) into one catalog"""
    fallback = set(fallback_experts)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        batches = list(pool.map(lambda s: analyze(base, s, meter, with_stats=s.expert_id not in fallback), sources))
    return Catalog(
        base.checkpoint_id,
        [entry for batch in batches for entry in batch],
        sources=[source.ref() for source in sources],
        traversal_order=base.tensor_order,
        base_path=str(base.root),
    )


def persist_catalog(catalog: Catalog, path: Union[str, Path]) -> Path:
    """Write the catalog file once; returns its path"""
    path = Path(path)
    header = {
        "format": CATALOG_FORMAT,
        "version": CATALOG_VERSION,
        "base_id": catalog.base_id,
        "base_path": catalog.base_path,
        "traversal_order": catalog.traversal_order,
        "sources": [ref.model_dump(mode="json") for ref in catalog.sources],
        "count": len(catalog),
    }
    lines = [canonical_json(header)]
    lines.extend(canonical_json(entry.model_dump(mode="json")) for entry in catalog)
    body = b"\n".join(lines) + b"\n"
    digest = hashlib.sha256(body).hexdigest()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + TRAILER_PREFIX + digest.encode("ascii") + b"\n")
    catalog.file_bytes = path.stat().st_size
    catalog.file_digest = digest
    logger.info(f"Persisted catalog with {len(catalog)} entries to {path} ({catalog.file_bytes} bytes)")
    return path


def load_catalog(path: Union[str, Path]) -> Catalog:
    """Load and digest-check a catalog file; never touches expert payloads"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CatalogFormatError(f"cannot read catalog {path}: {e}")
    body, _, trailer = data.rstrip(b"\n").rpartition(b"\n")
    body += b"\n"
    if not trailer.startswith(TRAILER_PREFIX):
        raise CatalogFormatError(f"{path}: missing digest trailer (truncated?)")
    digest = trailer[len(TRAILER_PREFIX):].decode("ascii", "replace")
    if hashlib.sha256(body).hexdigest() != digest:
        raise CatalogFormatError(f"{path}: digest mismatch")
    lines = body.decode("utf-8").splitlines()
    try:
        header = json.loads(lines[0])
        if header.get("format") != CATALOG_FORMAT or header.get("version") != CATALOG_VERSION:
            raise CatalogFormatError(f"{path}: unsupported catalog version {header.get('version')}")
        entries = [CatalogEntry.model_validate_json(line) for line in lines[1:]]
        sources = [SourceRef.model_validate(ref) for ref in header.get("sources", [])]
    except (json.JSONDecodeError, ValidationError, IndexError) as e:
        raise CatalogFormatError(f"{path}: {e}")
    if len(entries) != header.get("count"):
        raise CatalogFormatError(f"{path}: header declares {header.get('count')} entries, found {len(entries)}")
    catalog = Catalog(
        header["base_id"],
        entries,
        sources=sources,
        traversal_order=header.get("traversal_order", []),
        base_path=header.get("base_path", ""),
    )
    catalog.file_bytes = len(data)
    catalog.file_digest = digest
    return catalog

"""Block-structured checkpoint container (format v1).

A checkpoint is a directory holding ``header.json`` and ``payload.bin``.
The header lists tensors in traversal order; the payload is raw
little-endian f32 with each tensor at its declared offset. Rank-2 tensors
are blocked by whole rows, rank-1 tensors by element ranges.

The payload digest is SHA-256 over the per-block SHA-256 digests in header
order, so it can be computed block by block and is independent of whether a
block was physically written or referenced from the base.
"""

import hashlib
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Union

import numpy as np
from pydantic import ValidationError

from app.config import settings
from app.errors import (
    BlockOutOfRangeError,
    CorruptPayloadError,
    GeometryMismatchError,
    IntegrityError,
    MalformedHeaderError,
    TransactionAbortedError,
    UnsupportedDtypeError,
    WriterClosedError,
)
from app.schemas import BlockKey, Channel, ContainerHeader, TensorMeta
from app.services.costmodel import IoMeter
from app.utils import canonical_json, logger, sha256_hex

HEADER_FILE = "header.json"
PAYLOAD_FILE = "payload.bin"
F32 = np.dtype("<f4")


@dataclass(frozen=True)
class BlockBuffer:
    key: BlockKey
    values: np.ndarray
    byte_len: int


def block_geometry(shape: List[int], block_bytes: int) -> Dict[str, int]:
    """Blocking for a tensor at a nominal block size, rounded down to whole rows"""
    if len(shape) == 2:
        row_bytes = 4 * shape[1]
        return {"block_rows": max(1, block_bytes // row_bytes)}
    return {"block_elems": max(1, block_bytes // 4)}


def header_digest_bytes(header: ContainerHeader) -> bytes:
    return canonical_json(header.model_dump(mode="json", exclude={"payload_sha256"}))


def checkpoint_id_for(header: ContainerHeader, payload_digest: str) -> str:
    return sha256_hex(header_digest_bytes(header), payload_digest.encode("ascii"))


class CheckpointHandle:
    """Read-only view of an on-disk container. Safe to share across threads."""

    def __init__(
        self,
        root: Path,
        header: ContainerHeader,
        references: Optional[frozenset] = None,
        base: Optional["CheckpointHandle"] = None,
    ):
        self.root = Path(root)
        self.header = header
        self.role = header.role
        self.checkpoint_id = checkpoint_id_for(header, header.payload_sha256 or "")
        self.tensors: Dict[str, TensorMeta] = {meta.name: meta for meta in header.tensors}
        self.references = references or frozenset()
        self.base = base
        self._fd: Optional[int] = None
        self._fd_lock = threading.Lock()

    def __repr__(self) -> str:
        return f"CheckpointHandle({self.root}, role={self.role}, id={self.checkpoint_id[:12]})"

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def tensor_order(self) -> List[str]:
        return [meta.name for meta in self.header.tensors]

    def tensor(self, name: str) -> TensorMeta:
        try:
            return self.tensors[name]
        except KeyError:
            raise BlockOutOfRangeError(f"{self.root}: no tensor named {name!r}")

    def keys(self, tensor: Optional[str] = None) -> Iterator[BlockKey]:
        """Block keys in canonical traversal order"""
        names = [tensor] if tensor else self.tensor_order
        for name in names:
            for index in range(self.tensor(name).num_blocks):
                yield BlockKey(name, index)

    def validate_key(self, key: BlockKey) -> TensorMeta:
        meta = self.tensor(key.tensor)
        if not 0 <= key.block_index < meta.num_blocks:
            raise BlockOutOfRangeError(
                f"block {key.block_index} out of range for {key.tensor} ({meta.num_blocks} blocks)"
            )
        return meta

    def block_nbytes(self, key: BlockKey) -> int:
        meta = self.validate_key(key)
        return 4 * meta.block_span(key.block_index)[1]

    def read_bytes(self, offset: int, nbytes: int) -> bytes:
        with self._fd_lock:
            if self._fd is None:
                self._fd = os.open(self.root / PAYLOAD_FILE, os.O_RDONLY)
        data = os.pread(self._fd, nbytes, offset)
        if len(data) != nbytes:
            raise CorruptPayloadError(
                f"{self.root}: short read at offset {offset} ({len(data)} of {nbytes} bytes)"
            )
        return data

    def close(self) -> None:
        with self._fd_lock:
            if self._fd is not None:
                os.close(self._fd)
                self._fd = None


def _load_header(root: Path) -> ContainerHeader:
    path = root / HEADER_FILE
    if not path.is_file() or not (root / PAYLOAD_FILE).is_file():
        raise MalformedHeaderError(f"{root} is not a v1 container (missing header or payload)")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"{path}: {e}")
    for tensor in raw.get("tensors", []) if isinstance(raw, dict) else []:
        dtype = tensor.get("dtype", "f32") if isinstance(tensor, dict) else "f32"
        if dtype != "f32":
            raise UnsupportedDtypeError(f"{path}: tensor {tensor.get('name')} has dtype {dtype}")
    try:
        return ContainerHeader.model_validate(raw)
    except ValidationError as e:
        raise MalformedHeaderError(f"{path}: {e}")


def open_checkpoint(path: Union[str, Path], verify_integrity: Optional[bool] = None) -> CheckpointHandle:
    """Open a container, parsing only its header"""
    root = Path(path)
    header = _load_header(root)
    handle = CheckpointHandle(root, header)
    if verify_integrity if verify_integrity is not None else settings.VERIFY_INTEGRITY:
        actual = payload_digest(handle)
        if actual != header.payload_sha256:
            handle.close()
            raise IntegrityError(
                f"{root}: payload digest {actual[:12]} does not match header {str(header.payload_sha256)[:12]}"
            )
    logger.debug(f"Opened {handle}")
    return handle


def read_block(
    handle: CheckpointHandle,
    key: BlockKey,
    meter: IoMeter,
    channel: Channel,
    unit=None,
) -> BlockBuffer:
    """Read one block, charging exactly its stored byte length to the channel"""
    meta = handle.validate_key(key)
    start, count = meta.block_span(key.block_index)
    nbytes = 4 * count
    if key in handle.references:
        data = handle.base.read_bytes(handle.base.tensor(key.tensor).offset + 4 * start, nbytes)
    else:
        data = handle.read_bytes(meta.offset + 4 * start, nbytes)
    meter.charge(channel, nbytes, unit)
    return BlockBuffer(key=key, values=np.frombuffer(data, dtype=F32), byte_len=nbytes)


def read_rows(
    handle: CheckpointHandle,
    tensor: str,
    row_start: int,
    row_end: int,
    meter: IoMeter,
    channel: Channel,
    unit=None,
) -> np.ndarray:
    """Read a contiguous row range of a rank-2 tensor"""
    meta = handle.tensor(tensor)
    if meta.rank != 2 or not 0 <= row_start <= row_end <= meta.shape[0]:
        raise BlockOutOfRangeError(f"rows {row_start}:{row_end} invalid for {tensor} {meta.shape}")
    cols = meta.shape[1]
    nbytes = 4 * (row_end - row_start) * cols
    data = handle.read_bytes(meta.offset + 4 * row_start * cols, nbytes)
    meter.charge(channel, nbytes, unit)
    return np.frombuffer(data, dtype=F32).reshape(row_end - row_start, cols)


def read_tensor(handle: CheckpointHandle, name: str, meter: IoMeter, channel: Channel) -> np.ndarray:
    """Read a whole tensor in one physical read"""
    meta = handle.tensor(name)
    if handle.references:
        parts = [read_block(handle, key, meter, channel).values for key in handle.keys(name)]
        return np.concatenate(parts).reshape(meta.shape)
    data = handle.read_bytes(meta.offset, meta.nbytes)
    meter.charge(channel, meta.nbytes)
    return np.frombuffer(data, dtype=F32).reshape(meta.shape)


def payload_digest(handle: CheckpointHandle) -> str:
    """Digest over per-block hashes in header order (unmetered)"""
    chain = hashlib.sha256()
    for key in handle.keys():
        meta = handle.tensor(key.tensor)
        start, count = meta.block_span(key.block_index)
        if key in handle.references:
            base_meta = handle.base.tensor(key.tensor)
            data = handle.base.read_bytes(base_meta.offset + 4 * start, 4 * count)
        else:
            data = handle.read_bytes(meta.offset + 4 * start, 4 * count)
        chain.update(hashlib.sha256(data).digest())
    return chain.hexdigest()


def _layout(tensors: Mapping[str, np.ndarray], block_bytes: int) -> List[TensorMeta]:
    metas, offset = [], 0
    for name, array in tensors.items():
        shape = list(array.shape)
        meta = TensorMeta(name=name, shape=shape, offset=offset, **block_geometry(shape, block_bytes))
        metas.append(meta)
        offset += meta.nbytes
    return metas


def _write_header(root: Path, header: ContainerHeader) -> bytes:
    data = canonical_json(header.model_dump(mode="json"))
    with open(root / HEADER_FILE, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    return data


def write_checkpoint(
    path: Union[str, Path],
    tensors: Mapping[str, np.ndarray],
    role: str,
    block_bytes: Optional[int] = None,
    lora_scales: Optional[Dict[str, float]] = None,
    layout: Optional[List[TensorMeta]] = None,
) -> CheckpointHandle:
    """Write a whole container in one pass; tensors are laid out in mapping order"""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    metas = layout or _layout(tensors, block_bytes or settings.BLOCK_BYTES)
    chain = hashlib.sha256()
    with open(root / PAYLOAD_FILE, "wb") as f:
        for meta in metas:
            array = np.ascontiguousarray(tensors[meta.name], dtype=F32)
            if list(array.shape) != meta.shape:
                raise GeometryMismatchError(f"tensor {meta.name} has shape {array.shape}, layout says {meta.shape}")
            flat = array.reshape(-1)
            for index in range(meta.num_blocks):
                start, count = meta.block_span(index)
                chain.update(hashlib.sha256(flat[start:start + count].tobytes()).digest())
            f.seek(meta.offset)
            f.write(flat.tobytes())
        f.flush()
        os.fsync(f.fileno())
    header = ContainerHeader(
        role=role, tensors=metas, lora_scales=dict(lora_scales or {}), payload_sha256=chain.hexdigest()
    )
    _write_header(root, header)
    logger.debug(f"Wrote {role} container {root} ({len(metas)} tensors)")
    return CheckpointHandle(root, header)


def drop_page_cache(path: Union[str, Path]) -> None:
    """Advise the kernel to evict a container's files, where supported"""
    if not hasattr(os, "posix_fadvise"):
        return
    for name in (HEADER_FILE, PAYLOAD_FILE):
        file_path = Path(path) / name
        if not file_path.exists():
            continue
        fd = os.open(file_path, os.O_RDONLY)
        try:
            os.fsync(fd)
            os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
        finally:
            os.close(fd)


class StagingWriter:
    """Writes one merged container into a staging directory.

    Exclusive to one execution. Blocks may arrive in any order; the payload
    digest is assembled from per-block hashes when the writer is sealed.
    """

    def __init__(
        self,
        root: Path,
        template: ContainerHeader,
        meter: IoMeter,
        reference_mode: bool = False,
        role: str = "merged",
    ):
        self.root = Path(root)
        self.meter = meter
        self.reference_mode = reference_mode
        self.header = ContainerHeader(role=role, tensors=[meta.model_copy() for meta in template.tensors])
        self.tensors = {meta.name: meta for meta in self.header.tensors}
        self.references: set = set()
        self.block_hashes: Dict[BlockKey, bytes] = {}
        self.materialized_hashes: Dict[BlockKey, bytes] = {}
        self.closed = False
        self.header_bytes = 0
        size = sum(meta.nbytes for meta in self.header.tensors)
        self._file = open(self.root / PAYLOAD_FILE, "wb+")
        self._file.truncate(size)

    def _require_open(self) -> None:
        if self.closed:
            raise WriterClosedError(f"staging writer {self.root} is closed")

    def write(self, key: BlockKey, values: np.ndarray) -> None:
        self._require_open()
        meta = self.tensors[key.tensor]
        start, count = meta.block_span(key.block_index)
        data = np.ascontiguousarray(values, dtype=F32).tobytes()
        if len(data) != 4 * count:
            raise CorruptPayloadError(f"block {key} has {len(data)} bytes, expected {4 * count}")
        try:
            os.pwrite(self._file.fileno(), data, meta.offset + 4 * start)
        except OSError as e:
            raise TransactionAbortedError(f"write of {key} failed: {e}")
        digest = hashlib.sha256(data).digest()
        self.block_hashes[key] = digest
        self.materialized_hashes[key] = digest
        self.meter.charge(Channel.OUTPUT, len(data))

    def reference(self, key: BlockKey, values: np.ndarray) -> None:
        self._require_open()
        self.references.add(key)
        self.block_hashes[key] = hashlib.sha256(np.ascontiguousarray(values, dtype=F32).tobytes()).digest()

    def payload_digest(self) -> str:
        chain = hashlib.sha256()
        for meta in self.header.tensors:
            for index in range(meta.num_blocks):
                key = BlockKey(meta.name, index)
                if key not in self.block_hashes:
                    raise CorruptPayloadError(f"block {key} was never written")
                chain.update(self.block_hashes[key])
        return chain.hexdigest()

    def flush(self) -> None:
        self._require_open()
        try:
            self._file.flush()
            os.fsync(self._file.fileno())
        except OSError as e:
            raise TransactionAbortedError(f"flush of {self.root} failed: {e}")

    def validate(self) -> None:
        """Re-read every materialized block from staging and compare hashes"""
        for key, expected in self.materialized_hashes.items():
            meta = self.tensors[key.tensor]
            start, count = meta.block_span(key.block_index)
            self._file.seek(meta.offset + 4 * start)
            if hashlib.sha256(self._file.read(4 * count)).digest() != expected:
                raise IntegrityError(f"staged block {key} does not match its written hash")

    def seal(self) -> ContainerHeader:
        """Write the header with the payload digest and close the payload file"""
        self._require_open()
        self.header = self.header.model_copy(update={"payload_sha256": self.payload_digest()})
        data = _write_header(self.root, self.header)
        self.header_bytes = len(data)
        self.meter.charge(Channel.METADATA, len(data))
        self.close()
        return self.header

    def close(self) -> None:
        if not self.closed:
            self._file.close()
            self.closed = True


def write_block_or_reference(
    writer: StagingWriter,
    key: BlockKey,
    values: BlockBuffer,
    base: CheckpointHandle,
    base_block: Optional[BlockBuffer] = None,
    meter: Optional[IoMeter] = None,
) -> str:
    """Store a merged block, or a base reference when it equals the base bit for bit.

    Without reference mode every block is materialized. ``base_block`` is the
    already-streamed base buffer; when absent the base block is read and
    charged to the base channel.
    """
    writer._require_open()
    if writer.reference_mode:
        if base_block is None:
            base_block = read_block(base, key, meter or writer.meter, Channel.BASE)
        if np.array_equal(values.values.view(np.uint32), base_block.values.view(np.uint32)):
            writer.reference(key, values.values)
            return "reference"
    writer.write(key, values.values)
    return "materialized"

import hashlib
import json
import sys

from loguru import logger

from app.config import settings

# Configure logger
logger.remove()
_stderr_sink = logger.add(sys.stderr, level=settings.LOG_LEVEL)
if settings.LOG_FILE:
    logger.add(settings.LOG_FILE, rotation="10 MB", level="INFO")


def set_verbosity(level: str) -> None:
    """Replace the stderr sink, keeping the file sink untouched"""
    global _stderr_sink
    logger.remove(_stderr_sink)
    _stderr_sink = logger.add(sys.stderr, level=level)


def human_bytes(n: float) -> str:
    """Render a byte count with a binary unit"""
    for unit in ("B", "KiB", "MiB"):
        if abs(n) < 1024:
            return f"{n:.0f} {unit}" if unit == "B" else f"{n:.2f} {unit}"
        n /= 1024
    return f"{n:.2f} GiB"


def canonical_json(data) -> bytes:
    """Deterministic JSON bytes: sorted keys, no whitespace, UTF-8"""
    return json.dumps(
        data, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def sha256_hex(*chunks: bytes) -> str:
    """SHA-256 hex digest over the concatenation of chunks"""
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()

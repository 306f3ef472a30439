"""JRRT tensor files and the line-oriented ``key = value`` text format.

A JRRT file is: 8 magic bytes ``JRRT0001``, a little-endian u32 rank,
``rank`` little-endian u64 extents, then the payload as little-endian
IEEE-754 float64 in row-major order. Every tensor exchanged on disk by
this package (images, masks, sinograms, momenta, network weights) uses
this format.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"JRRT0001"

_MAX_RANK = 32


class JRRTError(ValueError):
    """Raised for malformed JRRT files."""


def write_tensor(path, array) -> None:
    """Write ``array`` (any real numeric dtype) to ``path`` as float64 JRRT."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim:  # ascontiguousarray promotes 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a JRRT file into a contiguous float64 array."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 4:
        raise JRRTError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise JRRTError(f"{path}: bad magic {blob[:8]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", blob, len(MAGIC))
    if rank > _MAX_RANK:
        raise JRRTError(f"{path}: implausible rank {rank}")
    offset = len(MAGIC) + 4
    if len(blob) < offset + 8 * rank:
        raise JRRTError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
    offset += 8 * rank
    count = 1
    for extent in shape:
        if extent == 0:
            raise JRRTError(f"{path}: zero extent in shape {shape}")
        count *= extent
    expected = offset + 8 * count
    if len(blob) != expected:
        raise JRRTError(
            f"{path}: payload size mismatch, file has {len(blob)} bytes, "
            f"shape {shape} needs {expected}"
        )
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(shape)


def write_kv(path, entries) -> None:
    """Write a mapping as ``key = value`` lines (one per key, insertion order)."""
    lines = []
    for key, value in entries.items():
        value = _format_value(value)
        if "\n" in value:
            raise ValueError(f"value for {key!r} contains a newline")
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines ignored."""
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_float_list(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    return [float(part) for part in text.split(",")]

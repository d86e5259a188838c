"""Single-file archive: a JSON manifest plus named little-endian float32 arrays.

Layout::

    b"SCLARCH1"                  8-byte magic
    uint64 LE                    header length N
    N bytes                      UTF-8 JSON {"manifest": ..., "arrays": [...]}
    payload                      raw '<f4' arrays, back to back

Each array entry records ``name``, ``shape``, ``offset`` (relative to the
payload start) and ``nbytes``.  Serialization is canonical (sorted names,
sorted JSON keys), so save -> load -> save reproduces the same bytes.
Enhancer checkpoints, VGG/segmentation weights and NIQE models all use it.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"SCLARCH1"
FORMAT_VERSION = 1
_PREFIX = len(MAGIC) + 8


class ArchiveError(ValueError):
    """Malformed archive; the message carries the byte offset of the problem."""

    def __init__(self, path: str | os.PathLike, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: corrupt archive at byte offset {offset}: {reason}")


def encode(manifest: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4"))
        if not np.isfinite(arr).all():
            raise ValueError(f"array {name!r} contains non-finite values")
        data = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {"format_version": FORMAT_VERSION, "manifest": dict(manifest), "arrays": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode(raw: bytes, path: str | os.PathLike = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < _PREFIX:
        raise ArchiveError(path, len(raw), "file shorter than the fixed prefix")
    if raw[: len(MAGIC)] != MAGIC:
        raise ArchiveError(path, 0, f"bad magic {raw[:len(MAGIC)]!r}")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):_PREFIX])
    if _PREFIX + hlen > len(raw):
        raise ArchiveError(path, len(MAGIC), f"header length {hlen} runs past end of file ({len(raw)} bytes)")
    try:
        header = json.loads(raw[_PREFIX:_PREFIX + hlen].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ArchiveError(path, _PREFIX + exc.start, "header is not UTF-8") from None
    except json.JSONDecodeError as exc:
        raise ArchiveError(path, _PREFIX + exc.pos, f"header JSON: {exc.msg}") from None
    if not isinstance(header, dict) or "arrays" not in header or "manifest" not in header:
        raise ArchiveError(path, _PREFIX, "header lacks 'manifest'/'arrays'")
    if header.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(path, _PREFIX, f"unsupported format_version {header.get('format_version')!r}")
    base = _PREFIX + hlen
    arrays: dict[str, np.ndarray] = {}
    end = base
    for entry in header["arrays"]:
        start = base + int(entry["offset"])
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(entry["nbytes"])
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ArchiveError(path, start, f"array {entry['name']!r}: nbytes does not match shape {shape}")
        if start + nbytes > len(raw):
            raise ArchiveError(path, start, f"array {entry['name']!r} truncated (needs {nbytes} bytes)")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape).copy()
        end = max(end, start + nbytes)
    if end != len(raw):
        raise ArchiveError(path, end, f"{len(raw) - end} trailing bytes after payload")
    return header["manifest"], arrays


def save(path: str | os.PathLike, manifest: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(manifest, arrays)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    return decode(path.read_bytes(), path)


def content_hash(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

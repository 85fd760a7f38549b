"""Versioned binary container for named float64 arrays.

Layout (all integers little-endian)::

    b"IPTK" | u32 format version | u64 header length | JSON header | payload

The header lists every array's name, shape, byte offset and byte length in
insertion order, plus a free-form ``meta`` object. The payload holds the raw
little-endian float64 values back to back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"IPTK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class ContainerError(ValueError):
    """Malformed, truncated, or incompatible container."""


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": FORMAT_VERSION, "meta": dict(meta or {}), "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < _PREFIX.size:
        raise ContainerError("container truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise ContainerError("container truncated inside header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from None
    payload = memoryview(blob)[start + hlen:]
    arrays: dict[str, np.ndarray] = {}
    try:
        for entry in header["tensors"]:
            lo, n = entry["offset"], entry["nbytes"]
            if lo + n > len(payload):
                raise ContainerError(f"payload truncated at {entry['name']!r}")
            arr = np.frombuffer(payload[lo:lo + n], dtype="<f8").astype(np.float64)
            arrays[entry["name"]] = arr.reshape(entry["shape"])
        meta = header["meta"]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ContainerError):
            raise
        raise ContainerError(f"corrupt header: {exc}") from None
    return arrays, meta


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())

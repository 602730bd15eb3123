"""Self-describing binary container used for checkpoints and feature caches.

Layout::

    b"BHSRS1\\n"
    uint64 little-endian header length
    header: UTF-8 JSON, sorted keys, {"meta": ..., "arrays": [{name, dtype, shape, offset, nbytes}]}
    concatenated little-endian C-order array payloads

Writing the result of a read reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BHSRS1\n"


class ContainerError(ValueError):
    pass


def _encode(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, payload, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payload)


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    return _encode(meta, arrays)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not blob.startswith(MAGIC):
        raise ContainerError("not a BHSRS1 container (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise ContainerError("truncated container header")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt container header: {exc}") from None
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise ContainerError(f"array {e['name']!r} runs past end of file")
        arrays[e["name"]] = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                                          offset=start).reshape(e["shape"]).copy()
    return header["meta"], arrays


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a container and return the SHA-256 of its bytes."""
    blob = _encode(meta, arrays)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def content_hash(*arrays: np.ndarray, extra: dict | None = None) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(arr.dtype.str.encode() + str(arr.shape).encode())
        h.update(arr.tobytes())
    if extra is not None:
        h.update(json.dumps(extra, sort_keys=True).encode())
    return h.hexdigest()

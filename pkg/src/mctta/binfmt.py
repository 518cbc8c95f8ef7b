"""Container format: JSON header followed by little-endian f64 blocks.

Layout::

    b"MCTT"  | u32 version | u64 header length | header (utf-8 JSON) | blocks

The header lists every block as ``{"name": ..., "shape": [...]}`` in the
order the blocks are stored.  Arrays are written as ``<f8`` in C order, so
a save/load cycle is bit exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import SchemaMismatch

MAGIC = b"MCTT"
FORMAT_VERSION = 1


def pack(header: Mapping[str, Any], blocks: Mapping[str, np.ndarray]) -> bytes:
    head = dict(header)
    head["blocks"] = [{"name": k, "shape": list(np.shape(v))} for k, v in blocks.items()]
    raw = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(raw)), raw]
    for arr in blocks.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def unpack(data: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise SchemaMismatch("not an mctta container (bad magic)")
    version, n = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise SchemaMismatch(f"container version {version}, expected {FORMAT_VERSION}")
    off = 4 + struct.calcsize("<IQ")
    header = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    blocks: dict[str, np.ndarray] = {}
    for spec in header.pop("blocks"):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
        blocks[spec["name"]] = arr.reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise SchemaMismatch("trailing bytes after last block")
    return header, blocks


def write(path: str | Path, header: Mapping[str, Any], blocks: Mapping[str, np.ndarray]) -> bytes:
    data = pack(header, blocks)
    Path(path).write_bytes(data)
    return data


def read(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return unpack(Path(path).read_bytes())


def digest_arrays(blocks: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, arr in blocks.items():
        h.update(name.encode())
        h.update(str(np.shape(arr)).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()

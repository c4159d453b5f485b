"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    magic        4 bytes   b"FLND"
    version      u8        1
    header_len   u32       length of the JSON header that follows
    header       utf-8 JSON (architecture spec and free-form metadata)
    entry_count  u32
    entries      entry_count times:
                   name_len u16, name utf-8,
                   ndim u8, dims u32 * ndim,
                   data float32 * prod(dims)
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FLND"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], header: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    head = json.dumps(dict(header or {}), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, head_len = struct.unpack_from("<BI", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 9
    header = json.loads(bytes(view[off:off + head_len]).decode("utf-8"))
    off += head_len
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + nlen]).decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        if off + 4 * n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {name!r}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after last entry")
    return tensors, header


def save(path, tensors: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, header))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())

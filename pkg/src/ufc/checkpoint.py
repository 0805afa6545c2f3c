"""Binary checkpoint format.

Layout, all integers u32 little-endian::

    b"UFCK"  version  count
    count x [ name_len  name(utf-8)  rank  extents[rank]  f32 data (LE) ]
"""

from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"UFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_checkpoint(arrays: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def parse_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt array name") from exc
        if name in out:
            raise CheckpointError(f"duplicate array name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(bytes(take(4 * n)), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after {count} arrays")
    return out


def save_checkpoint(path, arrays: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dump_checkpoint(arrays))
    os.replace(tmp, path)


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return parse_checkpoint(Path(path).read_bytes())

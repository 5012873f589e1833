"""Binary checkpoint reader/writer.

Layout (all integers unsigned 64-bit little-endian)::

    b"DTRN0001"  count
    repeated count times:
        name_len  name(utf-8)  rank  dim_0 .. dim_{rank-1}  data(float32 LE, row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTRN0001"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, _U64.pack(len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.require(np.asarray(arr, dtype="<f4"), requirements="C")
        out.append(_U64.pack(len(raw)))
        out.append(raw)
        out.append(_U64.pack(arr.ndim))
        out.extend(_U64.pack(d) for d in arr.shape)
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise CheckpointError("bad magic, not a DTRN0001 checkpoint")
    pos = 8

    def u64():
        nonlocal pos
        if pos + 8 > len(buf):
            raise CheckpointError("truncated checkpoint")
        (v,) = _U64.unpack_from(buf, pos)
        pos += 8
        return v

    state = {}
    for _ in range(u64()):
        n = u64()
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        rank = u64()
        dims = tuple(u64() for _ in range(rank))
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = 4 * size
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated data for {name!r}")
        state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last record")
    return state


def save(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())

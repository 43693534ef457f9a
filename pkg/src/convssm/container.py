"""Portable array container used for checkpoints, datasets and fixtures.

Layout (all integers little-endian)::

    b"CSSM" | version u32 | entry count u32
    per entry: name length u16 | name bytes (utf-8) | dtype u8 | rank u8
               | dims u64 * rank | row-major payload

dtype codes: 0 = f32, 1 = f64, 2 = c64, 3 = c128. Complex payloads are
interleaved (re, im) pairs, which is numpy's native complex layout.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CSSM"
VERSION = 1

_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<c8"): 2,
    np.dtype("<c16"): 3,
}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class ContainerError(ValueError):
    pass


def _coerce(arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype.kind in "iub":
        a = a.astype(np.float64)
    dt = a.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise ContainerError(f"unsupported dtype {a.dtype}")
    return np.asarray(a, dtype=dt, order="C")


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = _coerce(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _CODES[a.dtype], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    try:
        return _loads(buf)
    except (struct.error, UnicodeDecodeError) as err:
        raise ContainerError(f"malformed container: {err}") from None


def _loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ContainerError("bad magic bytes, not a CSSM container")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        if code not in _DTYPES:
            raise ContainerError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(buf):
            raise ContainerError(f"entry {name!r}: truncated payload")
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize,
                                  offset=off).reshape(dims).copy()
        off += nbytes
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())

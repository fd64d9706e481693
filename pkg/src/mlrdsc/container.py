"""Single-file binary container shared by dataset caches, affinity exports and
training checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes   b"MLRD"
    version    1 byte
    kind       u16 length + utf-8 bytes      ("sampleset", "checkpoint", ...)
    meta       u32 length + utf-8 JSON
    n_arrays   u32
    per array: u16 name length + name, u8 dtype code, u8 ndim,
               ndim * u64 shape, raw little-endian bytes
    crc32      u32 over everything above

A file is only accepted if every section parses and the checksum matches, so a
truncated or corrupted file never yields partial contents.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"MLRD"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i4"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class FormatError(ValueError):
    """Raised when a container file is malformed, truncated or of the wrong kind/version."""


def _code_for(arr: np.ndarray) -> int:
    dt = np.dtype("u1") if arr.dtype == bool else arr.dtype.newbyteorder("<")
    try:
        return _CODES[dt]
    except KeyError:
        raise TypeError(f"unsupported dtype for container: {arr.dtype}") from None


def dumps(kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    kb = kind.encode()
    buf.write(struct.pack("<H", len(kb)) + kb)
    mb = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(mb)) + mb)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code_for(arr)
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(data: bytes, kind: str | None = None) -> tuple[str, dict[str, np.ndarray], dict]:
    if len(data) < 4 + 1 + 4 or data[:4] != MAGIC:
        raise FormatError("not an MLRD container (bad magic or empty file)")
    body, trailer = data[:-4], data[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body) & 0xFFFFFFFF:
        raise FormatError("checksum mismatch: file truncated or corrupted")
    version = body[4]
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} (expected {VERSION})")

    pos = 5

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise FormatError("unexpected end of container")
        out = body[pos:pos + n]
        pos += n
        return out

    (klen,) = struct.unpack("<H", take(2))
    got_kind = take(klen).decode()
    if kind is not None and got_kind != kind:
        raise FormatError(f"container holds {got_kind!r}, expected {kind!r}")
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for array {name!r}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    if pos != len(body):
        raise FormatError("trailing bytes after last array")
    return got_kind, arrays, meta


def write(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(kind, arrays, meta))
    tmp.replace(path)


def read(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    _, arrays, meta = loads(Path(path).read_bytes(), kind)
    return arrays, meta

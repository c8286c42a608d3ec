"""PSCP1 binary tensor container.

Layout (all integers little-endian)::

    b"PSCP1"
    u32 record count
    per record:
        u32 name length, name bytes (UTF-8)
        u8  element code: 4 = float32, 8 = float64, 1 = raw bytes
        u32 rank, rank x u64 dims
        payload (product(dims) elements, little-endian)

Records are written in the order given and read back into an ordered dict,
so a save/load cycle reproduces every array bit for bit.  Text metadata
(model configs) rides along as a raw-bytes record.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import HeaderMismatchError, MissingFileError, TruncatedFileError, UnsupportedFormatError

MAGIC = b"PSCP1"
_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8"), 1: np.dtype("u1")}


def _code_for(arr: np.ndarray) -> int:
    if arr.dtype == np.float32:
        return 4
    if arr.dtype == np.float64:
        return 8
    if arr.dtype == np.uint8:
        return 1
    raise UnsupportedFormatError(f"cannot store dtype {arr.dtype}")


def dumps(records: Mapping[str, np.ndarray | bytes | str]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(records))]
    for name, value in records.items():
        if isinstance(value, str):
            value = value.encode("utf-8")
        if isinstance(value, (bytes, bytearray)):
            value = np.frombuffer(bytes(value), dtype=np.uint8)
        arr = np.asarray(value)
        code = _code_for(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise UnsupportedFormatError("not a PSCP1 container (bad magic)")
    view = memoryview(blob)
    pos = len(MAGIC)

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"container truncated at byte {pos} (wanted {n} more)")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in _CODES:
            raise HeaderMismatchError(f"record {name!r}: unknown element code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _CODES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(bytes(take(n * dt.itemsize)), dtype=dt).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(view):
        raise HeaderMismatchError(f"{len(view) - pos} trailing bytes after {count} records")
    return out


def save(path: str | Path, records: Mapping[str, np.ndarray | bytes | str]) -> None:
    Path(path).write_bytes(dumps(records))


def load(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"no such file: {path}") from None
    return loads(blob)


def record_text(arr: np.ndarray) -> str:
    return arr.tobytes().decode("utf-8")

"""Single-file binary container for named tensors.

Byte layout (all integers little-endian)::

    magic      8 bytes   b"TNDOCKPT"
    version    uint32    1
    count      uint32    number of records
    record * count:
        name_len  uint16
        name      name_len bytes, UTF-8
        dtype     uint8     1 = float32, 2 = float64
        ndim      uint8
        dims      ndim * uint32
        data      prod(dims) * itemsize bytes, row-major, little-endian

Records are written in the mapping's iteration order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..exceptions import FormatError

MAGIC = b"TNDOCKPT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise FormatError("not a checkpoint container (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 16
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + n_bytes > len(blob):
                raise FormatError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(blob, dtype=dtype, count=n_bytes // dtype.itemsize,
                                      offset=pos).reshape(dims).astype(dtype.newbyteorder("="))
            pos += n_bytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise FormatError("trailing bytes after last record")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())

"""Binary container of named float64/int64 tensors.

Layout (all integers little-endian)::

    magic        8 bytes   b"CMEMDCKP"
    version      uint32    currently 1
    meta_len     uint32    length of the UTF-8 JSON metadata blob
    meta         meta_len bytes
    count        uint32    number of tensors
    count times:
      name_len   uint16
      name       name_len bytes, UTF-8
      dtype      uint8     1 = float64, 2 = int64
      ndim       uint8
      shape      ndim x uint64
      data       prod(shape) x 8 bytes, C order, little-endian

Values are stored as raw IEEE-754 bytes so a save/load round trip is
bit-exact.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"CMEMDCKP"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {"f": 1, "i": 2}


def save_tensors(path, tensors, metadata=None):
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            code = _CODES.get(arr.dtype.kind)
            if code is None:
                raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
            arr = arr.astype(_DTYPES[code], order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path):
    """Returns ``(tensors, metadata)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    off = 8
    version, meta_len = struct.unpack_from("<II", data, off)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    metadata = json.loads(data[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(data[off:off + size], dtype=dtype).reshape(shape).copy()
        off += size
    if off != len(data):
        raise ParseError(f"{path}: {len(data) - off} trailing bytes")
    return tensors, metadata

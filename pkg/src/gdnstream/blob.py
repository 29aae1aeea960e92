"""Flat, versioned binary container for named tensors.

Layout (all integers little-endian)::

    magic      4 bytes   b"GDNB"
    version    u32       currently 1
    meta_len   u32       length of the metadata block
    meta       meta_len  UTF-8 JSON object (scalars only)
    count      u32       number of tensors
    count x tensor record:
        name_len  u16
        name      name_len bytes, UTF-8
        dtype     u8        1 = float64, 2 = float32, 3 = int64
        ndim      u8
        dims      ndim x u64
        payload   prod(dims) * itemsize bytes, row-major, little-endian

Tensors are written in insertion order; readers must not depend on order.
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import BinaryIO, Dict, Tuple, Union

import numpy as np

MAGIC = b"GDNB"
VERSION = 1

_CODES = {np.dtype("<f8"): 1, np.dtype("<f4"): 2, np.dtype("<i8"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


class BlobFormatError(ValueError):
    pass


PathOrFile = Union[str, os.PathLike, BinaryIO]


def dumps(tensors: Dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise BlobFormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise BlobFormatError("truncated blob")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise BlobFormatError("not a gdnstream blob (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise BlobFormatError(f"unsupported blob version {version}")
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise BlobFormatError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(bytes(take(n)), dtype=dt).reshape(dims).copy()
    if pos != len(view):
        raise BlobFormatError("trailing bytes after last tensor")
    return tensors, meta


def save(path: PathOrFile, tensors: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    data = dumps(tensors, meta)
    if hasattr(path, "write"):
        path.write(data)
    else:
        with open(path, "wb") as fh:
            fh.write(data)


def load(path: PathOrFile) -> Tuple[Dict[str, np.ndarray], dict]:
    if hasattr(path, "read"):
        return loads(path.read())
    with open(path, "rb") as fh:
        return loads(fh.read())

"""Versioned binary container with named array entries.

Layout (all integers little-endian):

    magic   4 bytes  b"VXCK"
    version u32      currently 1
    n_meta  u32
    n_meta times:
        key_len u32, key utf-8, val_len u32, val utf-8
    n_entries u32
    n_entries times:
        name_len u32, name utf-8
        dtype_len u32, dtype string (numpy dtype name, e.g. "float32")
        ndim u32, ndim * u64 shape
        data_len u64, raw little-endian array bytes (C order)
"""

from __future__ import annotations

import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"VXCK"
VERSION = 1


class ContainerError(IOError):
    pass


def _w_str(out, s: str):
    b = s.encode("utf-8")
    out.append(struct.pack("<I", len(b)))
    out.append(b)


def write_container(path, entries: Dict[str, np.ndarray], meta: Dict[str, str] = None):
    meta = meta or {}
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta))]
    for k, v in meta.items():
        _w_str(out, k)
        _w_str(out, v)
    out.append(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        # np.ascontiguousarray would promote 0-dim scalars to 1-dim
        arr = np.asarray(arr, order="C")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        _w_str(out, name)
        _w_str(out, arr.dtype.name)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        raw = le.tobytes()
        out.append(struct.pack("<Q", len(raw)))
        out.append(raw)
    blob = b"".join(out)
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError("truncated container file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_container(path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ContainerError(f"{path}: not a voxadv container (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    meta = {}
    for _ in range(r.u32()):
        k = r.string()
        meta[k] = r.string()
    entries = {}
    for _ in range(r.u32()):
        name = r.string()
        dtype = np.dtype(r.string()).newbyteorder("<")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim)) if ndim else ()
        nbytes = r.u64()
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
        entries[name] = arr.astype(dtype.newbyteorder("="), copy=False).copy()
    if r.pos != len(data):
        raise ContainerError(f"{path}: {len(data) - r.pos} trailing bytes")
    return entries, meta

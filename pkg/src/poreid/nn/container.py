"""Binary tensor container used for models, descriptor sets and patch sets.

Layout (little-endian)::

    b"PKNN" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name (utf-8) | u8 dtype (0=float32) | u8 rank
                | rank x u64 dims | raw data
    u32 meta_len | utf-8 "key=value" lines
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PKNN"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
DTYPE_CODES = {np.dtype("<f4"): 0}


class FormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    lines = []
    for key, value in (metadata or {}).items():
        if "\n" in f"{key}{value}" or "=" in str(key):
            raise ValueError(f"metadata key/value not representable: {key!r}")
        lines.append(f"{key}={value}")
    meta = "\n".join(lines).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        at = pos
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code}", at)
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        dtype = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = take(size * dtype.itemsize, f"data of {name!r}")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(dims).astype(np.float32)
    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    text = take(mlen, "metadata").decode("utf-8")
    if pos != len(buf):
        raise FormatError("trailing bytes after metadata", pos)
    meta = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return tensors, meta


def save(path, tensors, metadata=None) -> None:
    data = encode(tensors, metadata)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())

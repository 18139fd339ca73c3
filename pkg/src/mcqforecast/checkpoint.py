"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    magic      8 bytes   b"MCQFCKPT"
    version    u32       currently 1
    meta_len   u32       length of the UTF-8 JSON metadata block
    meta       bytes     JSON object (model kind, strategy, vocab hash, ...)
    n_params   u32
    then n_params records:
        name_len u32, name (UTF-8), ndim u32, dims u32 * ndim,
        data     float64 little-endian, C order, prod(dims) values

Arrays round-trip bit-exactly.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"MCQFCKPT"
VERSION = 1


def write_checkpoint(path, params, meta=None):
    """Write named arrays (name -> ndarray) and a JSON-serializable ``meta`` dict."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.array(arr, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"{self.path}: truncated checkpoint while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path):
    """Return ``(params, meta)``; raises :class:`CheckpointError` on any defect."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32("metadata length"), "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from None
    params = {}
    for _ in range(r.u32("parameter count")):
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        ndim = r.u32(f"{name} ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} shape"))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * count, f"{name} data"), dtype="<f8")
        params[name] = data.reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after last parameter")
    return params, meta

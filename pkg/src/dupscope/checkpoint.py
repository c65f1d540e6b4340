"""Binary checkpoint container: named tensors plus a JSON config blob.

Layout (all little-endian):
  magic "BTNT" | u32 version | u32 json_len | json | u32 n_tensors |
  per tensor: u16 name_len | name | u8 dtype | u8 ndim | u32 dims... | payload

dtype codes: 0 = float32, 1 = float64. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import BadMagic, IoError, VersionMismatch

MAGIC = b"BTNT"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, tensors, config):
    """Write named float arrays and a JSON-serializable config dict."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy(order="C")  # preserves 0-d shape, unlike ascontiguousarray
        if arr.dtype not in _DTYPE_CODES:
            raise IoError(f"unsupported dtype {arr.dtype} for tensor '{name}'")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    data = b"".join(parts)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint: {exc}") from exc


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise IoError("truncated checkpoint file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict, config dict)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint: {exc}") from exc
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagic("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    (json_len,) = r.unpack("<I")
    config = json.loads(r.take(json_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise IoError(f"unknown dtype code {code}")
        shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
    if r.pos != len(data):
        raise IoError("trailing bytes after checkpoint payload")
    return tensors, config

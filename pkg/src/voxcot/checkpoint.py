"""Binary parameter checkpoints.

Layout (all integers little-endian):

    magic   8 bytes  b"VOXCKPT\\0"
    version u32      currently 1
    meta    u32 length + UTF-8 JSON (free-form header, e.g. architecture)
    count   u32      number of parameters
    then per parameter, in order:
        name    u16 length + UTF-8 bytes
        ndim    u8
        extents ndim x u32
        data    little-endian float32 raster, C order

Round-trips are bit-exact for float32 parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = ["save_params", "load_params", "CHECKPOINT_VERSION"]

MAGIC = b"VOXCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, params: dict, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            if arr.dtype != np.float32:
                raise CheckpointError(
                    f"parameter '{name}' has dtype {arr.dtype}; checkpoints store float32")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path):
    """Returns (params: dict[name, float32 ndarray], meta: dict)."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path} is not a parameter checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8")) if meta_len else {}
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise CheckpointError(f"truncated checkpoint while reading '{name}'")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        return params, meta

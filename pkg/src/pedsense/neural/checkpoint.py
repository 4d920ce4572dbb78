"""Binary parameter checkpoints.

Layout (little-endian): magic ``PSCK``, u32 version, u32 parameter count,
then per parameter: u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
float32 data in row-major order.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import InputError

MAGIC = b"PSCK"
VERSION = 1


def save_checkpoint(path, params: Mapping[str, "np.ndarray"]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value.detach().cpu().numpy() if hasattr(value, "detach") else value)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise InputError(f"{path}: truncated checkpoint ({exc})") from None
    return out

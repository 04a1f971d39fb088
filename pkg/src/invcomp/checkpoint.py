"""Binary tensor container used for weight and optimizer checkpoints.

Layout (all integers little-endian u32, payload little-endian float32):

    magic "RIMW" | version | tensor count |
    per tensor: name length | UTF-8 name | rank | dims... | values

Tensor names for solver weights follow the module tree: ``conv_in.weight``,
``conv_in.bias``, ``conv_in.u``, ``gru1.z.weight`` ... ``conv_out.weight``.
Training checkpoints add ``adam.m.<name>``, ``adam.v.<name>`` and
``meta.step``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"RIMW"
VERSION = 1


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, origin: str):
        self.data = data
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint file: {self.origin}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_tensors(path: str | Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != MAGIC:
        raise FormatError(f"not a RIMW checkpoint: {path}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} in {path}")
    count = r.u32()
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        if name in out:
            raise FormatError(f"duplicate tensor name '{name}' in {path}")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(4 * n)
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes in {path}")
    return out

"""Binary checkpoint archive for named float32 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"NVK1"
    count   u32      number of tensors
    then per tensor:
        name_len  u16
        name      UTF-8 bytes
        rank      u8
        dims      rank x u32
        payload   prod(dims) float32 values

Tensors are written in sorted-name order so identical parameter sets
produce identical files. Loading a file produced by `save` returns
bitwise-identical arrays; any truncation or header mismatch raises
`CheckpointError`.
"""

from __future__ import annotations

import struct
from typing import Dict, Mapping, Union

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"NVK1"

TensorMap = Dict[str, np.ndarray]


def _as_array(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    arr = np.asarray(arr, dtype=np.float32)
    # ascontiguousarray promotes rank 0 to shape (1,); keep the true rank
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


def save(path: str, tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = _as_array(tensors[name])
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long ({len(encoded)} bytes): {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor rank {arr.ndim} exceeds format limit for {name}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint {self.path}: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def load(path: str) -> TensorMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    magic = r.read(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {magic!r} (expected {MAGIC!r})")
    (count,) = struct.unpack("<I", r.read(4))
    out: TensorMap = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.read(2))
        name = r.read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", r.read(1))
        dims = struct.unpack(f"<{rank}I", r.read(4 * rank))
        n_values = 1
        for d in dims:
            n_values *= d
        payload = r.read(4 * n_values)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if name in out:
            raise CheckpointError(f"duplicate tensor name in {path}: {name}")
        out[name] = arr
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after last tensor in {path}")
    return out

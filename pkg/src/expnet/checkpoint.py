"""Binary checkpoints: everything needed to resume a run bit-for-bit.

Layout (integers little-endian):

    magic   4 bytes  b"EXPN"
    version u16      currently 1
    u32 + bytes      run config text, UTF-8
    u32              tensor count
    per tensor:
        u16 + bytes  name, UTF-8
        u8           dtype code (0 = float64)
        u8           rank
        u32 * rank   dims
        payload      float64 little-endian, C order
    u32 + bytes      JSON state: epoch, optimizer scalars, rng state, metrics rows

Model parameters, BN running stats, and optimizer moment arrays all live in
the tensor table under distinct name prefixes; the JSON trailer holds only
scalars and small structures. Tensors are written in sorted name order so
identical state always produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EXPN"
VERSION = 1
DTYPE_F64 = 0


@dataclass
class Checkpoint:
    """A run frozen at an epoch boundary."""

    config_text: str
    tensors: dict[str, np.ndarray]
    state: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<H", VERSION)]
        config = self.config_text.encode()
        parts.append(struct.pack("<I", len(config)))
        parts.append(config)
        parts.append(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            # asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
            arr = np.asarray(self.tensors[name], dtype=np.float64, order="C")
            encoded = name.encode()
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.astype("<f8").tobytes())
        state = json.dumps(self.state, sort_keys=True).encode()
        parts.append(struct.pack("<I", len(state)))
        parts.append(state)
        return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValueError(
                f"{self.source}: truncated reading {what} at offset {self.pos}, "
                f"need {n} bytes, have {len(self.raw) - self.pos}"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ValueError(f"{source}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ValueError(f"{source}: unsupported checkpoint version {version}")
    (config_len,) = r.unpack("<I", "config length")
    config_text = r.take(config_len, "config text").decode()
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode()
        dtype_code, rank = r.unpack("<BB", f"tensor {name!r} header")
        if dtype_code != DTYPE_F64:
            raise ValueError(f"{source}: tensor {name!r} has unknown dtype code {dtype_code}")
        shape = r.unpack(f"<{rank}I", f"tensor {name!r} shape")
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(8 * n_items, f"tensor {name!r} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    (state_len,) = r.unpack("<I", "state length")
    state = json.loads(r.take(state_len, "state").decode())
    if r.pos != len(raw):
        raise ValueError(f"{source}: {len(raw) - r.pos} trailing bytes after state")
    return Checkpoint(config_text=config_text, tensors=tensors, state=state)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes(), str(path))

"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"NIMM"  u32 version  u64 config_len  config (UTF-8 JSON)
    u32 tensor_count
    per tensor: u16 name_len  name  u8 rank  u64 dims[rank]  f32 payload
    u64 checksum

The checksum is an 8-byte BLAKE2b digest of every byte before it. The config
blob is JSON with sorted keys, so equal contents always serialize identically.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"NIMM"
VERSION = 1


def checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass
class Checkpoint:
    config: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}

    def to_bytes(self) -> bytes:
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise DataError(f"tensor name too long: {name[:40]}...")
            arr = np.asarray(arr)
            if arr.ndim > 0xFF:
                raise DataError(f"tensor {name} has rank {arr.ndim}")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<Q", checksum(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        reader = _Reader(data)
        if reader.take(4, "magic") != MAGIC:
            raise FormatError("bad magic, not a checkpoint", 0)
        (version,) = reader.unpack("<I", "version")
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}; this build reads version {VERSION}", 4)
        (blob_len,) = reader.unpack("<Q", "config length")
        at = reader.pos
        try:
            config = json.loads(reader.take(blob_len, "config").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"config blob is not valid JSON: {exc}", at) from None
        (count,) = reader.unpack("<I", "tensor count")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            at = reader.pos
            (name_len,) = reader.unpack("<H", "tensor name length")
            name = reader.take(name_len, "tensor name").decode("utf-8", errors="replace")
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}", at)
            (rank,) = reader.unpack("<B", "tensor rank")
            shape = reader.unpack(f"<{rank}Q", "tensor dims")
            n = math.prod(shape)
            payload = reader.take(4 * n, f"payload of {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
        end = reader.pos
        (stored,) = reader.unpack("<Q", "checksum")
        if reader.pos != len(data):
            raise FormatError(f"{len(data) - reader.pos} trailing bytes after checksum", reader.pos)
        if stored != checksum(data[:end]):
            raise FormatError("checksum mismatch", end)
        return cls(config, tensors)

    def save(self, path: str | Path) -> None:
        """Write atomically: a reader never observes a half-written file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)

    def equals(self, other: Checkpoint) -> bool:
        return (
            self.config == other.config
            and list(self.tensors) == list(other.tensors)
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
        )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

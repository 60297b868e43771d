"""Binary checkpoint format.

Layout, all integers little-endian::

    b"SWKT" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 ndim | ndim x u64 dims | f32 data
    u32 metadata length | UTF-8 JSON metadata

The metadata holds the model config, optional optimizer state summary and
run info (experiment id, epoch, seed).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from swinkoa.config import ModelConfig
from swinkoa.model import KOANet

MAGIC = b"SWKT"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        start = r.pos
        (n,) = r.unpack("<H", "name length")
        try:
            name = r.take(n, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("tensor name is not valid UTF-8", start + 2) from None
        (ndim,) = r.unpack("<B", "ndim")
        dims = r.unpack(f"<{ndim}Q", "dims")
        size = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * size, f"data of {name}")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor {name}", start)
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    meta_at = r.pos
    (mlen,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable metadata: {exc}", meta_at + 4) from None
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return tensors, meta


def save_checkpoint(model: KOANet, path, **info) -> Path:
    """Write parameters plus ``{"config": ..., **info}`` metadata."""
    path = Path(path)
    meta = {"config": model.cfg.to_dict(), **info}
    path.write_bytes(encode(model.state_dict(), meta))
    return path


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[KOANet, dict]:
    """Rebuild the model from a checkpoint; ``expect`` checks config compatibility."""
    tensors, meta = decode(Path(path).read_bytes())
    if "config" not in meta:
        raise CheckpointFormatError("metadata has no model config", 0)
    cfg = ModelConfig.from_dict(meta["config"])
    if expect is not None and expect != cfg:
        diffs = [f"{k}: checkpoint {v!r} vs requested {expect.to_dict()[k]!r}"
                 for k, v in cfg.to_dict().items() if expect.to_dict()[k] != v]
        raise ValueError("checkpoint config does not match:\n  " + "\n  ".join(diffs))
    model = KOANet(cfg, 0)
    model.load_state_dict(tensors)
    return model, meta


def header_size(model: KOANet) -> int:
    """Bytes used by everything except tensor payloads and metadata."""
    n = 12 + 4
    for name, p in model.named_parameters():
        n += 2 + len(name.encode("utf-8")) + 1 + 8 * p.data.ndim
    return n

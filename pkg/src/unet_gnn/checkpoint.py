"""Binary checkpoint format.

Layout, all integers little-endian::

    b"UGNN" | u32 version | u32 len + UTF-8 JSON run config | u32 epoch
    | tensor table (params) | u64 optimizer step | tensor table (optimizer)

A tensor table is ``u32 count`` followed by ``count`` entries of
``u16 name length, name, u32 rank, rank * u32 dims, float32 payload``.
Trailing bytes are rejected.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"UGNN"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: "OrderedDict[str, np.ndarray]"
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    optimizer_step: int = 0
    epoch: int = 0
    version: int = VERSION


def _table(tensors) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")  # tobytes() below is C order; keeps 0-d shapes
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def dumps(ckpt: Checkpoint) -> bytes:
    cfg = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<I", ckpt.version),
        struct.pack("<I", len(cfg)), cfg,
        struct.pack("<I", ckpt.epoch),
        _table(ckpt.tensors),
        struct.pack("<Q", ckpt.optimizer_step),
        _table(ckpt.optimizer),
    ])


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what} (offset {self.pos}, need {n} bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def table(self, what: str):
        (count,) = self.unpack("<I", f"{what} count")
        out = OrderedDict()
        for _ in range(count):
            (ln,) = self.unpack("<H", f"{what} name length")
            name = self.take(ln, f"{what} name").decode("utf-8")
            (rank,) = self.unpack("<I", f"rank of {name}")
            dims = self.unpack(f"<{rank}I", f"dims of {name}") if rank else ()
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = self.take(4 * n, f"payload of {name}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        return out


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (clen,) = r.unpack("<I", "config length")
    try:
        config = json.loads(r.take(clen, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt config block: {exc}") from None
    (epoch,) = r.unpack("<I", "epoch")
    tensors = r.table("tensor")
    (step,) = r.unpack("<Q", "optimizer step")
    opt = r.table("optimizer tensor")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} unexpected trailing bytes")
    return Checkpoint(config, tensors, opt, step, epoch, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def restore_tensors(ckpt_tensors, named) -> None:
    """Copy checkpoint arrays into the ``named`` tensors, validating names and shapes."""
    for name, t in named.items():
        if name not in ckpt_tensors:
            raise ShapeError(f"checkpoint is missing tensor {name!r}")
        arr = ckpt_tensors[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise ShapeError(f"tensor {name!r}: checkpoint shape {list(arr.shape)} != model shape {list(t.shape)}")
    extra = [k for k in ckpt_tensors if k not in named]
    if extra:
        raise ShapeError(f"checkpoint has tensor {extra[0]!r} that the model does not define")
    for name, t in named.items():
        t.data = np.array(ckpt_tensors[name], dtype=t.data.dtype)

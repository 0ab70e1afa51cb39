"""Binary checkpoint files.

Layout (all integers and floats little-endian):

    magic  b"HTXC"
    u16    version (currently 1)
    u16    flags   (reserved, 0)
    u32    tensor count
    per tensor:
        u16   name length, then UTF-8 name bytes
        u8    rank
        u32 x rank  dims
        f32 x prod(dims)  raw data
    u32    CRC32 over everything after the flags field (count + records)

Non-numeric metadata rides along as tensors: class names are stored as a
rank-1 tensor of UTF-8 byte values (one float per byte, newline-separated
names), epoch and schedule position as single-element tensors.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .network import TextureNet

MAGIC = b"HTXC"
VERSION = 1

META_CLASS_NAMES = "meta.class_names"
META_EPOCH = "meta.epoch"
META_SCHEDULE_STEP = "meta.schedule_step"
_META_NAMES = (META_CLASS_NAMES, META_EPOCH, META_SCHEDULE_STEP)


class CheckpointError(ValueError):
    """Malformed checkpoint file; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    version: int = VERSION
    flags: int = 0

    @property
    def class_names(self) -> list[str]:
        arr = self.tensors.get(META_CLASS_NAMES)
        if arr is None:
            return []
        raw = bytes(np.asarray(arr, dtype=np.float32).astype(np.uint8).tolist())
        return raw.decode("utf-8").split("\n") if raw else []

    @property
    def epoch(self) -> int:
        arr = self.tensors.get(META_EPOCH)
        return int(arr[0]) if arr is not None and arr.size else 0

    @property
    def schedule_step(self) -> int:
        arr = self.tensors.get(META_SCHEDULE_STEP)
        return int(arr[0]) if arr is not None and arr.size else 0

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("meta.")}

    def parameter_payload_bytes(self) -> int:
        """Raw data bytes of trainable parameters (buffers and meta excluded)."""
        return sum(4 * v.size for k, v in self.tensors.items()
                   if not k.startswith("meta.") and "running_" not in k)


def _encode_class_names(names: Sequence[str]) -> np.ndarray:
    raw = "\n".join(names).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def checkpoint_from_model(model: TextureNet, class_names: Sequence[str],
                          epoch: int = 0, schedule_step: int = 0) -> Checkpoint:
    tensors = dict(model.state_arrays())
    tensors[META_CLASS_NAMES] = _encode_class_names(class_names)
    tensors[META_EPOCH] = np.array([epoch], dtype=np.float32)
    tensors[META_SCHEDULE_STEP] = np.array([schedule_step], dtype=np.float32)
    return Checkpoint(tensors=tensors)


def save_checkpoint(obj: Checkpoint | TextureNet, path: str | Path,
                    class_names: Sequence[str] = (), epoch: int = 0,
                    schedule_step: int = 0) -> None:
    if isinstance(obj, TextureNet):
        obj = checkpoint_from_model(obj, class_names, epoch, schedule_step)
    payload = bytearray()
    payload += struct.pack("<I", len(obj.tensors))
    for name, arr in obj.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        payload += struct.pack("<H", len(encoded)) + encoded
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.tobytes()
    blob = MAGIC + struct.pack("<HH", obj.version, obj.flags) + bytes(payload)
    blob += struct.pack("<I", zlib.crc32(bytes(payload)))
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated while reading {what}", self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str, what: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))[0]


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic bytes", 0)
    version = r.u("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    flags = r.u("<H", "flags")
    payload_start = r.pos
    if len(blob) < payload_start + 8:
        raise CheckpointError("file too short for count and checksum", r.pos)
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[payload_start:-4])
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"payload checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}", len(blob) - 4)

    count = r.u("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u("<H", f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        rank = r.u("<B", f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if n < 0 or n > (1 << 31):
            raise CheckpointError(f"implausible element count {n} for {name}", r.pos)
        raw = r.take(4 * n, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.pos != len(blob) - 4:
        raise CheckpointError("trailing bytes after last tensor", r.pos)
    return Checkpoint(tensors=tensors, version=version, flags=flags)

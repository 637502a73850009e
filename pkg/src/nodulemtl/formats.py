"""Little-endian binary containers.

NKVOL1 (volumes, patches, masks)::

    b"NKVOL1" | u32 d, h, w | f32 sz, sy, sx | f32 voxels[d*h*w], z outermost

NKCKPT1 (model checkpoints)::

    b"NKCKPT1" | u32 version | u64 step | u32 len | config JSON (canonical)
    | u32 count | count x (u32 name_len | name utf-8 | u32 ndim | u32 dims[ndim]
    | f32 payload)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"NKVOL1"
CHECKPOINT_MAGIC = b"NKCKPT1"
CHECKPOINT_VERSION = 1
_VOL_HEADER = struct.Struct("<3I3f")


class FormatError(ValueError):
    """Base class for container parse errors."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class BadSpacingError(FormatError):
    pass


class CheckpointError(FormatError):
    pass


# -- NKVOL1 ------------------------------------------------------------------

def encode_volume(voxels: np.ndarray, spacing) -> bytes:
    voxels = np.asarray(voxels)
    if voxels.ndim != 3 or 0 in voxels.shape:
        raise ValueError(f"volume must be 3-D and non-empty, got shape {voxels.shape}")
    spacing = np.asarray(spacing, dtype="<f4")
    if spacing.shape != (3,) or not np.all(spacing > 0):
        raise BadSpacingError(f"spacing must be three positive values, got {spacing.tolist()}")
    header = VOLUME_MAGIC + _VOL_HEADER.pack(*voxels.shape, *spacing.tolist())
    return header + np.ascontiguousarray(voxels, dtype="<f4").tobytes()


def decode_volume(buf: bytes) -> tuple[np.ndarray, tuple[float, float, float]]:
    if buf[: len(VOLUME_MAGIC)] != VOLUME_MAGIC:
        raise BadMagicError("not an NKVOL1 file (bad magic)")
    start = len(VOLUME_MAGIC)
    if len(buf) < start + _VOL_HEADER.size:
        raise TruncatedError("NKVOL1 header truncated")
    d, h, w, sz, sy, sx = _VOL_HEADER.unpack_from(buf, start)
    if not (sz > 0 and sy > 0 and sx > 0):
        raise BadSpacingError(f"non-positive spacing {(sz, sy, sx)}")
    offset = start + _VOL_HEADER.size
    expected = offset + 4 * d * h * w
    if len(buf) < expected:
        raise TruncatedError(f"NKVOL1 payload truncated: {len(buf)} of {expected} bytes")
    if len(buf) > expected:
        raise FormatError(f"NKVOL1 has {len(buf) - expected} trailing bytes")
    voxels = np.frombuffer(buf, dtype="<f4", count=d * h * w, offset=offset).reshape(d, h, w)
    return voxels.astype(np.float32), (sz, sy, sx)


def write_volume_file(path, voxels: np.ndarray, spacing) -> None:
    Path(path).write_bytes(encode_volume(voxels, spacing))


def read_volume_file(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    return decode_volume(Path(path).read_bytes())


# -- NKCKPT1 ------------------------------------------------------------------

def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg = canonical_json(ckpt.config)
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQI", CHECKPOINT_VERSION, ckpt.step, len(cfg)), cfg,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw
                     + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError("not an NKCKPT1 file (bad magic)")
    r = _Reader(buf)
    r.pos = len(CHECKPOINT_MAGIC)
    version, step, cfg_len = r.unpack("<IQI", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = json.loads(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint config: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt tensor name") from None
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (ndim,) = r.unpack("<I", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"checkpoint has {len(buf) - r.pos} trailing bytes")
    return Checkpoint(config=config, tensors=tensors, step=step)


def write_checkpoint_file(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def read_checkpoint_file(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())

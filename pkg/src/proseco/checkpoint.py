"""Binary checkpoints: student, teacher and optimizer moments.

Layout (little-endian)::

    b"PSCK" | u32 version | u64 step | 32-byte config hash | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 rank | rank x u64 dims | f32 data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"PSCK"
VERSION = 1
GROUPS = ("student", "teacher", "adam.m", "adam.v")


@dataclass
class Checkpoint:
    step: int
    config_hash: bytes
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}


def encode(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    out = bytearray(MAGIC)
    out += struct.pack("<IQ", VERSION, ckpt.step)
    out += ckpt.config_hash
    out += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        a = np.array(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.tobytes()
    return bytes(out)


def decode(raw: bytes, path="<bytes>") -> Checkpoint:
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, step = struct.unpack_from("<IQ", raw, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        digest = raw[pos:pos + 32]
        pos += 32
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) * 4
            if pos + size > len(raw):
                raise FormatError(f"{path}: truncated tensor data for {name!r}")
            tensors[name] = np.frombuffer(raw[pos:pos + size], dtype="<f4").reshape(dims).astype(np.float32)
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint") from exc
    if len(digest) != 32 or pos != len(raw):
        raise FormatError(f"{path}: truncated or trailing bytes in checkpoint")
    return Checkpoint(step, bytes(digest), tensors)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path: str | Path, expected_shapes: dict[str, tuple] | None = None) -> Checkpoint:
    """Read and validate a checkpoint.

    ``expected_shapes`` maps parameter names (without group prefix) to the
    shapes the current config produces; every group is checked against it.
    """
    ckpt = decode(Path(path).read_bytes(), path)
    if expected_shapes is not None:
        for group in GROUPS:
            stored = ckpt.group(group)
            missing = sorted(set(expected_shapes) - set(stored))
            if missing:
                raise ConfigError(f"{path}: checkpoint lacks {group} tensors {missing}")
            for name, shape in expected_shapes.items():
                if tuple(stored[name].shape) != tuple(shape):
                    raise ConfigError(
                        f"{path}: {group}/{name} has shape {tuple(stored[name].shape)}, "
                        f"config expects {tuple(shape)}"
                    )
    return ckpt

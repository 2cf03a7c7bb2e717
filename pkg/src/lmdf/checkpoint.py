"""Binary parameter checkpoint container.

Layout (all integers little-endian):

    magic  "LMDF" (4 bytes)
    format version   u32
    tensor count     u32
    per tensor:
        name length  u32
        name         UTF-8 bytes
        rank         u32
        extents      u64 * rank
        payload      float32 * prod(extents), row-major

Payloads are stored as float32; round-tripping a float32 tensor is
bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"LMDF"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors to `path`. Values are cast to float32."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(np.asarray(value), dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by save_checkpoint."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(f"not a parameter checkpoint: {path}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            extents = struct.unpack_from(f"<{rank}Q", data, offset)
            offset += 8 * rank
            n = int(np.prod(extents)) if rank else 1
            payload = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            tensors[name] = payload.reshape(extents).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if offset != len(data):
        raise CheckpointError(f"corrupt checkpoint {path}: trailing bytes")
    return tensors


def write_manifest(path, entries: dict) -> None:
    """Write a key=value text manifest (one entry per line)."""
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"manifest not found: {path}")
    entries: dict[str, str] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries

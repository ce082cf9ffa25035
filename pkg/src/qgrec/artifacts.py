"""Binary artifact container and hashing helpers.

Model files share one little-endian layout:

    magic (4 bytes) | version u16 | config-json length u32 | config json utf-8
    | array count u32 | per array: name length u16, name utf-8,
      rows u32, cols u32, rows*cols float32 values

Weights are stored as float32 regardless of the in-memory precision, so a
write -> read -> write cycle is byte identical.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np


class ArtifactFormatError(ValueError):
    """Magic, version, or layout of an artifact file is wrong."""


def write_container(path, magic: bytes, version: int, config: dict,
                    arrays: list[tuple[str, np.ndarray]]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<H", version))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            a = np.ascontiguousarray(arr, dtype="<f4")
            if a.ndim == 1:
                a = a.reshape(1, -1)
            if a.ndim != 2:
                raise ValueError(f"array {name!r} must be 1-D or 2-D")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<II", a.shape[0], a.shape[1]))
            fh.write(a.tobytes())


def read_container(path, magic: bytes, version: int):
    """Returns (config dict, list of (name, float32 array))."""
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise ArtifactFormatError(
                f"{path}: expected magic {magic!r}, found {got!r}")
        (ver,) = struct.unpack("<H", _must_read(fh, 2, path))
        if ver != version:
            raise ArtifactFormatError(
                f"{path}: unsupported version {ver} (expected {version})")
        (clen,) = struct.unpack("<I", _must_read(fh, 4, path))
        config = json.loads(_must_read(fh, clen, path).decode("utf-8"))
        (count,) = struct.unpack("<I", _must_read(fh, 4, path))
        arrays = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _must_read(fh, 2, path))
            name = _must_read(fh, nlen, path).decode("utf-8")
            rows, cols = struct.unpack("<II", _must_read(fh, 8, path))
            data = _must_read(fh, rows * cols * 4, path)
            arr = np.frombuffer(data, dtype="<f4").reshape(rows, cols).copy()
            arrays.append((name, arr))
    return config, arrays


def _must_read(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ArtifactFormatError(f"{path}: truncated file")
    return data


def stable_hash64(parts) -> int:
    """64-bit content hash of an iterable of strings/bytes (order matters)."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, str):
            part = part.encode("utf-8")
        h.update(part)
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def file_hash(path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()

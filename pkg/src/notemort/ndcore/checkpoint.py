"""Flat binary checkpoint container.

Layout (all integers little-endian):

    magic           8 bytes   b"NMCKPT01" (format version 1)
    config hash     u16 length + UTF-8 bytes
    entry count     u32
    per entry:
        name        u16 length + UTF-8 bytes
        ndim        u8
        shape       ndim * u32
        data        product(shape) float64 values, little-endian, row-major

Round-trips are bit-exact; the loader verifies magic, lengths, and that
the file ends exactly after the last entry.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"NMCKPT01"


def save_checkpoint(path, entries: dict[str, np.ndarray], config_hash: str = "") -> None:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    hash_bytes = config_hash.encode("utf-8")
    blob += struct.pack("<H", len(hash_bytes)) + hash_bytes
    blob += struct.pack("<I", len(entries))
    for name, array in entries.items():
        arr = np.asarray(array, dtype="<f8", order="C")
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes)) + name_bytes
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    path.write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    offset = 8

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(raw):
            raise DataError(f"{path}: truncated checkpoint")
        values = struct.unpack_from(fmt, raw, offset)
        offset += size
        return values

    (hash_len,) = take("<H")
    config_hash = raw[offset : offset + hash_len].decode("utf-8")
    offset += hash_len
    (count,) = take("<I")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n_values = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n_values
        if end > len(raw):
            raise DataError(f"{path}: truncated checkpoint entry {name!r}")
        entries[name] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes after last entry")
    return entries, config_hash

"""Flat key -> array archive with a JSON shape/dtype header.

Byte-deterministic on purpose: identical contents produce identical files,
so checkpoint round-trip tests can compare raw bytes. Arrays are stored
little-endian, C-contiguous, sorted by key.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"GNSAR1\n"


class ArchiveError(RuntimeError):
    pass


def save_archive(path, arrays: dict[str, np.ndarray]) -> None:
    entries = {}
    blobs = []
    offset = 0
    for key in sorted(arrays):
        shape = list(np.asarray(arrays[key]).shape)  # ascontiguousarray promotes 0-dim
        arr = np.ascontiguousarray(arrays[key])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries[key] = {
            "dtype": arr.dtype.str,
            "shape": shape,
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ArchiveError(f"{path}: not a parameter archive (bad magic)")
        (header_len,) = struct.unpack("<Q", f.read(8))
        try:
            entries = json.loads(f.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ArchiveError(f"{path}: corrupt header: {e}") from e
        payload = f.read()
    arrays = {}
    for key, meta in entries.items():
        start, n = meta["offset"], meta["nbytes"]
        if start + n > len(payload):
            raise ArchiveError(f"{path}: truncated payload for key {key!r}")
        arr = np.frombuffer(payload[start : start + n], dtype=np.dtype(meta["dtype"]))
        arrays[key] = arr.reshape(meta["shape"]).copy()
    return arrays

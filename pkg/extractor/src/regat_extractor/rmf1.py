"""Writer for the RMF1 feature file format.

Layout, little-endian: 8-byte magic "RMF1\\0\\0\\0\\0"; three uint32 dims
(frames, regions, channels); float32 payload in (frame, region, channel)
row-major order; trailing CRC32 of everything preceding. This mirrors the
retrieval engine's documented interface so the two packages only share
bytes on disk.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"RMF1\x00\x00\x00\x00"


def write_rmf1(data: np.ndarray, path) -> None:
    """Write a (frames, regions, channels) float array as an RMF1 file."""
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 3 or min(data.shape) < 1:
        raise ValueError(f"expected a non-empty 3-d tensor, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("tensor contains non-finite values")
    blob = MAGIC + struct.pack("<III", *data.shape) + data.tobytes()
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)

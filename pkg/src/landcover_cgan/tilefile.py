"""Reader/writer for the flat ``LCT1`` tile container.

Layout (little-endian)::

    offset  size  field
    0       4     magic b"LCT1"
    4       2     height   (u16)
    6       2     width    (u16)
    8       2     channels (u16)
    10      2     dtype tag (u16): 1 = u8, 2 = u16, 3 = f32
    12      4     reserved, zero
    16      ...   payload, row-major, channel-interleaved (H, W, C)

Arrays are handed out channel-first, ``(C, H, W)``; single-channel label
files come back as ``(H, W)``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import TileFormatError

MAGIC = b"LCT1"
HEADER = struct.Struct("<4sHHHH4x")
assert HEADER.size == 16

_TAGS = {1: np.dtype("<u1"), 2: np.dtype("<u2"), 3: np.dtype("<f4")}
_TAG_OF = {np.dtype(v).newbyteorder("=").str: k for k, v in _TAGS.items()}


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise TileFormatError(f"expected (H, W) or (C, H, W) array, got shape {arr.shape}")
    tag = _TAG_OF.get(arr.dtype.newbyteorder("=").str)
    if tag is None:
        raise TileFormatError(f"unsupported dtype {arr.dtype}")
    c, h, w = arr.shape
    if max(c, h, w) > 0xFFFF:
        raise TileFormatError(f"dimensions {arr.shape} exceed u16 header fields")
    payload = np.ascontiguousarray(arr.transpose(1, 2, 0), dtype=_TAGS[tag]).tobytes()
    return HEADER.pack(MAGIC, h, w, c, tag) + payload


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < HEADER.size:
        raise TileFormatError(f"{source}: truncated header")
    magic, h, w, c, tag = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise TileFormatError(f"{source}: bad magic {magic!r}")
    if tag not in _TAGS:
        raise TileFormatError(f"{source}: unknown dtype tag {tag}")
    dtype = _TAGS[tag]
    expected = h * w * c * dtype.itemsize
    if len(buf) - HEADER.size != expected:
        raise TileFormatError(f"{source}: payload is {len(buf) - HEADER.size} bytes, header implies {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=HEADER.size).reshape(h, w, c)
    arr = arr.transpose(2, 0, 1).astype(dtype.newbyteorder("="), copy=True)
    return arr[0] if c == 1 else arr


def write(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def read(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tile {path}: {exc.strerror}") from exc
    return decode(buf, str(path))

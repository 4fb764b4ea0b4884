"""Flat binary tensor container used for checkpoints, galleries and affinity tables.

Layout (little-endian)::

    magic        4 bytes  b"GTCK"
    version      uint32   (1)
    count        uint32   number of tensors
    width        uint32   bytes per value: 4 (float32) or 8 (float64)
    per tensor:
        name_len uint32
        name     utf-8 bytes
        rank     uint32
        dims     rank x uint64
        payload  prod(dims) values, row-major

float32 is the compact export form; float64 is used when a file must
reproduce training state bit-for-bit (e.g. resuming).
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GTCK"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(IOError):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensors(tensors: Mapping[str, np.ndarray], width: int = 4) -> bytes:
    if width not in _DTYPES:
        raise ValueError(f"value width must be 4 or 8, got {width}")
    dt = _DTYPES[width]
    parts = [MAGIC, struct.pack("<III", VERSION, len(tensors), width)]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}")
    try:
        version, count, width = struct.unpack_from("<III", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported version {version}")
        if width not in _DTYPES:
            raise CheckpointError(f"{source}: unsupported value width {width}")
        dt = _DTYPES[width]
        off = 16
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) * width
            if off + size > len(buf):
                raise CheckpointError(f"{source}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype=dt, count=size // width, offset=off).reshape(dims).copy()
            off += size
    except struct.error as exc:
        raise CheckpointError(f"{source}: truncated header ({exc})") from None
    return out


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], width: int = 4) -> None:
    atomic_write_bytes(path, encode_tensors(tensors, width))


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return decode_tensors(buf, str(path))

"""MSPR tensor container.

Layout (all integers little-endian)::

    b"MSPR"            magic
    u32                format version (1)
    repeated until EOF:
      u32              name length in bytes
      bytes            name, UTF-8
      u64              rows
      u64              cols
      f64[rows*cols]   payload, row-major

1-D arrays are stored as ``rows x 1``; callers reshape on load.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MSPR"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(-1, 1)
        elif a.ndim == 0:
            a = a.reshape(1, 1)
        elif a.ndim != 2:
            raise ContainerError(f"tensor {name!r} has {a.ndim} dims; only 2-D supported")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<QQ", a.shape[0], a.shape[1]))
        chunks.append(np.ascontiguousarray(a).astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        try:
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<QQ", buf, pos)
        except (struct.error, UnicodeDecodeError) as exc:
            raise ContainerError(f"{path}: truncated or corrupt header at byte {pos}") from exc
        pos += 16
        nbytes = rows * cols * 8
        if pos + nbytes > len(buf):
            raise ContainerError(f"{path}: truncated tensor {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
    return out

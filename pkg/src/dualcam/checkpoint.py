"""Binary checkpoint container.

Layout (little endian)::

    b"DCAMCKPT"  u32 version
    u32 config_len, config text (UTF-8 key-value document)
    u32 n_records
    per record: u16 name_len, name, u8 ndim, u32 dims[ndim], float32 data (row-major)
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DCAMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, config_text: str = "") -> Path:
    """Write ``tensors`` (name -> array) atomically via a temporary file and rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    cfg = config_text.encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4").copy(order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict, str]:
    """Return ``(tensors, config_text)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    (clen,) = struct.unpack_from("<I", data, off)
    off += 4
    config_text = data[off:off + clen].decode("utf-8")
    off += clen
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    try:
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nl].decode("utf-8")
            off += nl
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return tensors, config_text

"""Binary file helpers: atomic writes and little-endian tensor records.

Tensor records are shared by the model checkpoint (``TPRT``) and gallery
(``TPGL``) formats: ``name_len:u32, name:utf-8, rank:u32, dims:u32*rank,
data:f32*prod(dims)``, everything little-endian.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file + rename.

    Guarantees no partial file is left behind if the write fails.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack_tensor(name: str, values: np.ndarray) -> bytes:
    """Encode one named float32 tensor record."""
    raw = np.ascontiguousarray(values, dtype="<f4")
    name_b = name.encode("utf-8")
    header = struct.pack("<I", len(name_b)) + name_b
    shape = struct.pack("<I", raw.ndim) + struct.pack(f"<{raw.ndim}I", *raw.shape)
    return header + shape + raw.tobytes()


def unpack_tensors(buf: bytes, offset: int = 0) -> dict[str, np.ndarray]:
    """Decode consecutive tensor records from ``buf`` until its end."""
    out: dict[str, np.ndarray] = {}
    view = memoryview(buf)
    pos = offset
    end = len(buf)
    while pos < end:
        if end - pos < 4:
            raise ValueError("truncated tensor record header")
        (name_len,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", view, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if end - pos < nbytes:
            raise ValueError(f"truncated tensor data for {name!r}")
        data = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += nbytes
        out[name] = data.copy()
    return out

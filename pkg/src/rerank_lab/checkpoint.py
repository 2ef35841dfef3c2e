"""Named-tensor checkpoint files.

Layout: magic, format version, step counter, entry count, then per entry a
length-prefixed UTF-8 name, the rank and dims, and the raw little-endian
float32 payload. Entries are written sorted by name so the same state always
produces the same bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .corpus import DataError

_MAGIC = b"RLCKPT01"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], step: int = 0) -> None:
    with Path(path).open("wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<QI", step, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    path = Path(path)
    with path.open("rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        step, count = struct.unpack("<QI", f.read(12))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n_values = int(np.prod(shape)) if ndim else 1
            payload = f.read(4 * n_values)
            if len(payload) != 4 * n_values:
                raise DataError(f"{path}: truncated checkpoint entry {name!r}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
            tensors[name] = arr.astype(np.float32).copy()
    return tensors, step

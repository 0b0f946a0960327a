"""Tensor file formats.

MDT1 is little-endian: the 4-byte magic ``MDT1``, a u32 rank, ``rank`` u64
dimensions, then the float64 payload in row-major order. Small tensors can
also travel as nested JSON arrays, and tiny single-channel grids as plain
PGM (``P2``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MDT1"


class TensorFormatError(ValueError):
    pass


def to_mdt_bytes(array) -> bytes:
    a = np.asarray(array, dtype="<f8")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes(order="C")


def from_mdt_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TensorFormatError("not an MDT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    offset = 8 + 8 * rank
    if len(buf) < offset:
        raise TensorFormatError("truncated MDT1 header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != offset + 8 * count:
        raise TensorFormatError(f"MDT1 payload has {len(buf) - offset} bytes, expected {8 * count} for shape {dims}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(dims)


def save_mdt(path, array) -> None:
    Path(path).write_bytes(to_mdt_bytes(array))


def load_mdt(path) -> np.ndarray:
    return from_mdt_bytes(Path(path).read_bytes())


def save_json_tensor(path, array) -> None:
    Path(path).write_text(json.dumps(np.asarray(array, dtype=np.float64).tolist()) + "\n")


def load_json_tensor(path) -> np.ndarray:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TensorFormatError(f"{path}: invalid JSON ({exc})") from None
    try:
        return np.array(data, dtype=np.float64)
    except ValueError:
        raise TensorFormatError(f"{path}: ragged or non-numeric array") from None


def save_pgm(path, image, maxval: int = 65535) -> None:
    """Write an H x W grid with values in [0, 1] as plain PGM, quantised to ``maxval``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise TensorFormatError(f"PGM holds 2-D grids, got shape {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.int64)
    lines = ["P2", f"{img.shape[1]} {img.shape[0]}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in q]
    Path(path).write_text("\n".join(lines) + "\n")


def load_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#", 1)[0].split()
    if len(tokens) < 4 or tokens[0] != "P2":
        raise TensorFormatError(f"{path}: not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = tokens[4:]
    if len(values) != w * h:
        raise TensorFormatError(f"{path}: expected {w * h} pixels, found {len(values)}")
    return np.array(values, dtype=np.float64).reshape(h, w) / maxval


def load_tensor(path) -> np.ndarray:
    """Dispatch on suffix: ``.json`` arrays, ``.pgm`` grids, anything else MDT1."""
    suffix = Path(path).suffix.lower()
    if suffix == ".json":
        return load_json_tensor(path)
    if suffix == ".pgm":
        return load_pgm(path)
    return load_mdt(path)


def save_tensor(path, array) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".json":
        save_json_tensor(path, array)
    elif suffix == ".pgm":
        save_pgm(path, array)
    else:
        save_mdt(path, array)

"""Binary file formats: RVOL volumes, RTFM transforms, CAGC checkpoints.

All integers and floats are little-endian. Arrays are stored C-ordered
with z slowest.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

RVOL_MAGIC = b"RVOL"
RTFM_MAGIC = b"RTFM"
CKPT_MAGIC = b"CAGC"
VERSION = 1

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """File content does not match the expected format."""


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=_F32).astype(np.float32)

    def header(self, magic: bytes) -> None:
        got = self.take(4)
        if got != magic:
            raise FormatError(f"{self.path}: bad magic {got!r}, expected {magic!r}")
        (version,) = self.unpack("I")
        if version != VERSION:
            raise FormatError(f"{self.path}: unsupported version {version}")


def write_rvol(path, voxels: np.ndarray, spacing: float) -> None:
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ValueError(f"RVOL holds 3-D volumes, got shape {voxels.shape}")
    d, h, w = voxels.shape
    head = RVOL_MAGIC + struct.pack("<IIIIf", VERSION, d, h, w, spacing)
    _atomic_write(path, head + np.ascontiguousarray(voxels, dtype=_F32).tobytes())


def read_rvol(path) -> tuple[np.ndarray, float]:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    r.header(RVOL_MAGIC)
    d, h, w = r.unpack("III")
    (spacing,) = r.unpack("f")
    voxels = r.floats(d * h * w).reshape(d, h, w)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after voxel data")
    return voxels, float(spacing)


def write_rtfm(path, matrix: np.ndarray, offset: np.ndarray, displacement: np.ndarray | None) -> None:
    matrix = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
    offset = np.asarray(offset, dtype=np.float64).reshape(3)
    parts = [RTFM_MAGIC, struct.pack("<I", VERSION)]
    parts.append(np.concatenate([matrix.ravel(), offset]).astype(_F32).tobytes())
    if displacement is None:
        parts.append(struct.pack("<B", 0))
    else:
        displacement = np.asarray(displacement)
        if displacement.ndim != 4 or displacement.shape[3] != 3:
            raise ValueError(f"displacement must be (D, H, W, 3), got {displacement.shape}")
        parts.append(struct.pack("<BIII", 1, *displacement.shape[:3]))
        parts.append(np.ascontiguousarray(displacement, dtype=_F32).tobytes())
    _atomic_write(path, b"".join(parts))


def read_rtfm(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    r.header(RTFM_MAGIC)
    params = r.floats(12).astype(np.float64)
    (has_disp,) = r.unpack("B")
    if has_disp not in (0, 1):
        raise FormatError(f"{path}: bad displacement flag {has_disp}")
    disp = None
    if has_disp:
        d, h, w = r.unpack("III")
        disp = r.floats(d * h * w * 3).reshape(d, h, w, 3)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after transform data")
    return params[:9].reshape(3, 3), params[9:], disp


def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        # ascontiguousarray would promote 0-d tensors to 1-d
        arr = np.array(value, dtype=_F32, order="C")
        encoded = name.encode("utf-8")
        if arr.ndim > 255 or len(encoded) > 0xFFFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    r.header(CKPT_MAGIC)
    (count,) = r.unpack("I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}Q") if rank else ()
        out[name] = r.floats(int(np.prod(dims, dtype=np.int64))).reshape(dims)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    return out

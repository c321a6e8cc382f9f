"""Portable tensor file format used by every module that touches disk.

Layout: magic ``STTF``, version u16 (=1), rank u16, then one u64 per
extent, then the payload as little-endian float32 in row-major order.
Internal float64 values are narrowed to f32 on write and widened on read;
the f32 payload itself round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"STTF"
VERSION = 1


def write_sttf(path, array: np.ndarray) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype=np.float64).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def sttf_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype=np.float64).astype("<f4")
    head = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def read_sttf(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read tensor file {path}: {exc}") from exc
    arr, used = parse_sttf(blob, str(path))
    if used != len(blob):
        raise CheckpointError(f"trailing bytes after tensor payload in {path}")
    return arr


def parse_sttf(blob: bytes, origin: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode one STTF record from blob; returns (array, bytes consumed)."""
    if len(blob) < 8:
        raise CheckpointError(f"{origin}: truncated tensor header")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{origin}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<HH", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{origin}: unsupported tensor format version {version}")
    off = 8
    if len(blob) < off + 8 * rank:
        raise CheckpointError(f"{origin}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    count = 1
    for s in shape:
        count *= s
    nbytes = 4 * count
    if len(blob) < off + nbytes:
        raise CheckpointError(f"{origin}: truncated payload ({len(blob) - off} of {nbytes} bytes)")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    return data.astype(np.float64).reshape(shape), off + nbytes


def read_sttf_shape(path) -> tuple[int, ...]:
    """Read only the header of a tensor file; cheap validation for manifests."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
            if len(head) < 8:
                raise CheckpointError(f"{path}: truncated tensor header")
            if head[:4] != MAGIC:
                raise CheckpointError(f"{path}: bad magic {head[:4]!r}, expected {MAGIC!r}")
            version, rank = struct.unpack("<HH", head[4:])
            if version != VERSION:
                raise CheckpointError(f"{path}: unsupported tensor format version {version}")
            ext = fh.read(8 * rank)
            if len(ext) < 8 * rank:
                raise CheckpointError(f"{path}: truncated extents")
            return struct.unpack(f"<{rank}Q", ext)
    except OSError as exc:
        raise CheckpointError(f"cannot read tensor file {path}: {exc}") from exc

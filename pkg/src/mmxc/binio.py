"""Little-endian binary primitives shared by the artifact file formats.

Every artifact starts with an 8-byte magic followed by a u32 format version.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """File does not match the expected artifact format."""


def write_header(fh: BinaryIO, magic: bytes, version: int) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    fh.write(magic)
    write_u32(fh, version)


def read_header(fh: BinaryIO, magic: bytes, max_version: int) -> int:
    got = fh.read(8)
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")
    version = read_u32(fh)
    if not 1 <= version <= max_version:
        raise FormatError(f"unsupported format version {version}")
    return version


def write_u8(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<B", v))


def read_u8(fh: BinaryIO) -> int:
    return struct.unpack("<B", _read_exact(fh, 1))[0]


def write_u32(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<I", v))


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def write_u64(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<Q", v))


def read_u64(fh: BinaryIO) -> int:
    return struct.unpack("<Q", _read_exact(fh, 8))[0]


def write_f64(fh: BinaryIO, v: float) -> None:
    fh.write(struct.pack("<d", v))


def read_f64(fh: BinaryIO) -> float:
    return struct.unpack("<d", _read_exact(fh, 8))[0]


def write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO) -> str:
    n = read_u32(fh)
    return _read_exact(fh, n).decode("utf-8")


def write_f64_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_f64_array(fh: BinaryIO, count: int) -> np.ndarray:
    raw = _read_exact(fh, 8 * count)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def write_u32_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<u4").tobytes())


def read_u32_array(fh: BinaryIO, count: int) -> np.ndarray:
    raw = _read_exact(fh, 4 * count)
    return np.frombuffer(raw, dtype="<u4").astype(np.int64)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(raw)}")
    return raw

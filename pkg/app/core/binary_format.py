"""Little-endian container helpers shared by the .dsc/.scn/.cbk/.qix/.dec/.lra formats.

Every file is: 4-byte ASCII magic, u32 version, format-specific header fields,
then payload arrays.
"""
from pathlib import Path
from typing import Tuple
import hashlib
import logging
import struct

import numpy as np

from .errors import FormatError, InputError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class BinaryReader:
    """Sequential reader over a byte buffer that reports offsets in its errors"""

    def __init__(self, data: bytes, label: str):
        self.data = data
        self.label = label
        self.offset = 0

    @classmethod
    def from_path(cls, path: Path) -> "BinaryReader":
        path = Path(path)
        if not path.exists():
            raise InputError(f"File not found: {path}")
        return cls(path.read_bytes(), str(path))

    def header(self, magic: bytes, fields: str) -> Tuple:
        """Check magic and version, then unpack the remaining header fields"""
        found = self.unpack("4s")[0]
        if found != magic:
            raise FormatError(f"{self.label}: bad magic {found!r}, expected {magic!r}", 0)
        version = self.unpack("I")[0]
        if version != FORMAT_VERSION:
            raise FormatError(f"{self.label}: unsupported version {version}", 4)
        return self.unpack(fields) if fields else ()

    def unpack(self, fields: str) -> Tuple:
        fmt = "<" + fields
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise FormatError(f"{self.label}: truncated header", len(self.data))
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def raw(self, n_bytes: int) -> bytes:
        if self.offset + n_bytes > len(self.data):
            raise FormatError(
                f"{self.label}: truncated payload, need {n_bytes} bytes, "
                f"{len(self.data) - self.offset} left",
                len(self.data),
            )
        chunk = self.data[self.offset:self.offset + n_bytes]
        self.offset += n_bytes
        return chunk

    def array(self, dtype: str, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(dtype).itemsize
        chunk = self.raw(count * itemsize)
        return np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"{self.label}: {len(self.data) - self.offset} unexpected trailing bytes", self.offset
            )


def pack_header(magic: bytes, fields: str, *values) -> bytes:
    return struct.pack("<4sI" + fields, magic, FORMAT_VERSION, *values)


def f32_bytes(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def write_atomic(path: Path, payload: bytes) -> None:
    """Write through a temporary sibling so a failed write never leaves half a file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    logger.info(f"Wrote {len(payload)} bytes to {path}")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()

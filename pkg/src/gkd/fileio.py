"""Little-endian binary readers/writers and the file-format error taxonomy.

Both on-disk formats (model and dataset files) are built from the same
primitives: fixed-width unsigned integers, length-prefixed UTF-8 strings,
and raw numpy payloads. Writes go to a temp file in the target directory
followed by an atomic rename, so readers never observe partial files.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

__all__ = [
    "FileFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedFileError",
    "SparseIndexError",
    "DecodeError",
    "Writer",
    "Reader",
    "atomic_write",
]


class FileFormatError(Exception):
    """Base for every malformed-file condition."""


class BadMagicError(FileFormatError):
    pass


class UnsupportedVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class SparseIndexError(FileFormatError):
    """Sparse indices not strictly increasing or out of range."""


class DecodeError(FileFormatError):
    """Structurally valid reads that violate a format contract."""


class Writer:
    """Append-only little-endian byte builder."""

    def __init__(self):
        self._buf = bytearray()

    def u8(self, v: int) -> "Writer":
        return self._uint(v, 1)

    def u16(self, v: int) -> "Writer":
        return self._uint(v, 2)

    def u32(self, v: int) -> "Writer":
        return self._uint(v, 4)

    def u64(self, v: int) -> "Writer":
        return self._uint(v, 8)

    def _uint(self, v: int, width: int) -> "Writer":
        if not 0 <= v < 1 << (8 * width):
            raise ValueError(f"value {v} does not fit in u{8 * width}")
        self._buf += int(v).to_bytes(width, "little")
        return self

    def raw(self, data: bytes) -> "Writer":
        self._buf += data
        return self

    def utf8_u16(self, s: str) -> "Writer":
        b = s.encode("utf-8")
        return self.u16(len(b)).raw(b)

    def utf8_u32(self, s: str) -> "Writer":
        b = s.encode("utf-8")
        return self.u32(len(b)).raw(b)

    def array(self, arr: np.ndarray, dtype) -> "Writer":
        a = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
        self._buf += a.tobytes()
        return self

    def getvalue(self) -> bytes:
        return bytes(self._buf)


class Reader:
    """Cursor over an in-memory byte string; raises on any shortfall."""

    def __init__(self, data: bytes, context: str = "file"):
        self._data = data
        self._pos = 0
        self._context = context

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def take(self, n: int) -> bytes:
        if self.remaining < n:
            raise TruncatedFileError(
                f"{self._context}: needed {n} bytes at offset {self._pos}, "
                f"only {self.remaining} left")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "little")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "little")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "little")

    def utf8_u16(self) -> str:
        return self._utf8(self.u16())

    def utf8_u32(self) -> str:
        return self._utf8(self.u32())

    def _utf8(self, n: int) -> str:
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError(f"{self._context}: invalid UTF-8 string: {e}") from None

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.take(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype), copy=False)

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise BadMagicError(
                f"{self._context}: bad magic {got!r}, expected {magic!r}")

    def expect_version(self, supported: int) -> int:
        v = self.u32()
        if v != supported:
            raise UnsupportedVersionError(
                f"{self._context}: version {v} unsupported (expected {supported})")
        return v

    def expect_eof(self) -> None:
        if self.remaining:
            raise DecodeError(
                f"{self._context}: {self.remaining} trailing bytes after payload")


def atomic_write(path: str, data: bytes) -> None:
    """Write ``data`` to ``path`` via a same-directory temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise

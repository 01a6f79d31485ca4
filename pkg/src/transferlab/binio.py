"""Little-endian binary readers/writers shared by the dataset and checkpoint formats."""

import struct

import numpy as np


class FileFormatError(ValueError):
    """Base class for malformed artifact files."""


class BadMagicError(FileFormatError):
    pass


class VersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


def write_magic(fh, magic: bytes) -> None:
    assert len(magic) == 4
    fh.write(magic)


def write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


def write_u64(fh, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def write_f64(fh, value: float) -> None:
    fh.write(struct.pack("<d", value))


def write_f32_array(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class Reader:
    """Cursor over a byte buffer that raises TruncatedFileError on short reads."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise TruncatedFileError(
                f"need {n} bytes at offset {self._pos}, file has {len(self._data)}"
            )
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def expect_magic(self, magic: bytes) -> None:
        got = self._take(4)
        if got != magic:
            raise BadMagicError(f"expected magic {magic!r}, found {got!r}")

    def expect_version(self, version: int) -> None:
        got = self.u32()
        if got != version:
            raise VersionError(f"unsupported format version {got} (expected {version})")

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def f32_array(self, count: int) -> np.ndarray:
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<f4").copy()

    def at_end(self) -> bool:
        return self._pos == len(self._data)

    def remaining(self) -> int:
        return len(self._data) - self._pos

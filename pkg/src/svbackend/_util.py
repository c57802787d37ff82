"""Shared helpers for atomic file writes and strict binary parsing."""

import contextlib
import os
import struct
import tempfile


@contextlib.contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temp file in the target directory, rename on success.

    A failed write never leaves a partial file at `path`.
    """
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.remove(tmp)
        raise


class BinaryReader:
    """Cursor over a byte buffer; every under-read reports the byte offset."""

    def __init__(self, data: bytes, path: str = "<bytes>"):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(
                f"{self.path}: truncated at byte offset {self.pos} "
                f"(needed {n} more bytes, have {len(self.data) - self.pos})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise ValueError(
                f"{self.path}: bad magic {got!r} at byte offset "
                f"{self.pos - len(magic)} (expected {magic!r})"
            )

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise ValueError(
                f"{self.path}: {len(self.data) - self.pos} trailing bytes "
                f"at byte offset {self.pos}"
            )

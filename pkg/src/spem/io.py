"""File helpers: atomic writes and a bounds-checked binary reader."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temporary sibling and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


class ByteReader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("file is truncated", path=self.source, offset=self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def expect_magic(self, magic: bytes) -> None:
        if len(self.blob) < len(magic) or self.blob[:len(magic)] != magic:
            raise FormatError("bad magic bytes", path=self.source, expected=magic.decode())
        self.pos = len(magic)

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, count: int, dtype) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).astype(dt.newbyteorder("="))

    def expect_end(self) -> None:
        if self.pos != len(self.blob):
            raise FormatError("trailing bytes after payload", path=self.source, offset=self.pos)

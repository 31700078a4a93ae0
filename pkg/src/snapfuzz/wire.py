"""Little-endian length-prefixed binary helpers shared by the aux-state and bytecode codecs."""

from __future__ import annotations

import struct


class DecodeError(ValueError):
    """Raised on truncated or malformed binary input."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} at offset {offset}")
        self.offset = offset


class Writer:
    def __init__(self):
        self.buf = bytearray()

    def u8(self, v: int) -> Writer:
        self.buf += struct.pack("<B", v)
        return self

    def u16(self, v: int) -> Writer:
        self.buf += struct.pack("<H", v)
        return self

    def u32(self, v: int) -> Writer:
        self.buf += struct.pack("<I", v)
        return self

    def u64(self, v: int) -> Writer:
        self.buf += struct.pack("<Q", v)
        return self

    def blob(self, data: bytes) -> Writer:
        self.u32(len(data))
        self.buf += data
        return self

    def raw(self, data: bytes) -> Writer:
        self.buf += data
        return self

    def getvalue(self) -> bytes:
        return bytes(self.buf)


class Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError(f"truncated input: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def blob(self) -> bytes:
        return bytes(self._take(self.u32()))

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def expect_end(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes", self.pos)

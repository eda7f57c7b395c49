"""The subset of CBOR (RFC 8949) needed for bundles, beacons and frames.

Supported: unsigned and negative integers, byte and text strings (definite and
indefinite), arrays (definite and indefinite), ``true``/``false``/``null``.
Maps, tags and floats are rejected with :class:`StructureError`.

Encoding is deterministic: integers and lengths always use the shortest head.
"""

from __future__ import annotations

import struct

from .errors import SizeLimitError, StructureError, TruncatedError

UINT = 0
NEGINT = 1
BYTES = 2
TEXT = 3
ARRAY = 4
MAP = 5
TAG = 6
SIMPLE = 7

BREAK = 0xFF
INDEFINITE_ARRAY = 0x9F

MAX_ITEM_SIZE = 256 * 1024 * 1024
MAX_DEPTH = 32

FALSE, TRUE, NULL = 0xF4, 0xF5, 0xF6


def encode_head(major: int, value: int) -> bytes:
    if value < 0:
        raise ValueError("CBOR head argument must be non-negative")
    mt = major << 5
    if value < 24:
        return bytes((mt | value,))
    if value < 0x100:
        return bytes((mt | 24, value))
    if value < 0x10000:
        return bytes((mt | 25,)) + struct.pack(">H", value)
    if value < 0x100000000:
        return bytes((mt | 26,)) + struct.pack(">I", value)
    if value < 0x10000000000000000:
        return bytes((mt | 27,)) + struct.pack(">Q", value)
    raise ValueError("integer too large for CBOR")


def encode_uint(value: int) -> bytes:
    return encode_head(UINT, value)


def encode_bytes(data: bytes) -> bytes:
    return encode_head(BYTES, len(data)) + bytes(data)


def encode_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return encode_head(TEXT, len(raw)) + raw


def encode(obj) -> bytes:
    """Encode a nested structure of ints, bytes, str, bool, None and lists."""
    out = bytearray()
    _encode_into(obj, out)
    return bytes(out)


def _encode_into(obj, out: bytearray) -> None:
    if obj is True:
        out.append(TRUE)
    elif obj is False:
        out.append(FALSE)
    elif obj is None:
        out.append(NULL)
    elif isinstance(obj, int):
        if obj >= 0:
            out += encode_head(UINT, obj)
        else:
            out += encode_head(NEGINT, -1 - obj)
    elif isinstance(obj, (bytes, bytearray, memoryview)):
        out += encode_head(BYTES, len(obj))
        out += obj
    elif isinstance(obj, str):
        out += encode_text(obj)
    elif isinstance(obj, (list, tuple)):
        out += encode_head(ARRAY, len(obj))
        for item in obj:
            _encode_into(item, out)
    else:
        raise TypeError(f"cannot CBOR-encode {type(obj).__name__}")


def parse_head(data, offset: int = 0) -> tuple[int, int | None, int] | None:
    """Parse one item head from ``data`` at ``offset``.

    Returns ``(major, argument, head_length)`` where ``argument`` is ``None`` for
    indefinite-length items, or ``None`` if more bytes are needed. Used by stream
    readers to learn a frame's length before reading its body.
    """
    if offset >= len(data):
        return None
    initial = data[offset]
    major, info = initial >> 5, initial & 0x1F
    if info < 24:
        return major, info, 1
    if info == 31:
        if major in (UINT, NEGINT, TAG):
            raise StructureError(f"indefinite length not allowed for major type {major}")
        return major, None, 1
    if info > 27:
        raise StructureError(f"reserved additional information {info}")
    size = 1 << (info - 24)
    if offset + 1 + size > len(data):
        return None
    return major, int.from_bytes(data[offset + 1:offset + 1 + size], "big"), 1 + size


class Decoder:
    """A cursor over a CBOR byte sequence."""

    def __init__(self, data, offset: int = 0, max_size: int = MAX_ITEM_SIZE):
        self.data = memoryview(data).cast("B") if not isinstance(data, bytes) else data
        self.offset = offset
        self.max_size = max_size

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def at_end(self) -> bool:
        return self.offset >= len(self.data)

    def peek(self) -> int:
        if self.offset >= len(self.data):
            raise TruncatedError(f"unexpected end of input at offset {self.offset}")
        return self.data[self.offset]

    def head(self) -> tuple[int, int | None]:
        parsed = parse_head(self.data, self.offset)
        if parsed is None:
            raise TruncatedError(f"truncated item head at offset {self.offset}")
        major, arg, n = parsed
        self.offset += n
        return major, arg

    def _expect(self, want: int, what: str) -> int | None:
        start = self.offset
        major, arg = self.head()
        if major != want:
            self.offset = start
            raise StructureError(f"expected {what} at offset {start}, found major type {major}")
        return arg

    def uint(self) -> int:
        return self._expect(UINT, "unsigned integer")

    def _take(self, n: int) -> bytes:
        if n > self.max_size:
            raise SizeLimitError(f"item of {n} bytes exceeds limit of {self.max_size}")
        if n > self.remaining:
            raise TruncatedError(f"need {n} bytes at offset {self.offset}, have {self.remaining}")
        chunk = bytes(self.data[self.offset:self.offset + n])
        self.offset += n
        return chunk

    def _string(self, major: int, what: str) -> bytes:
        length = self._expect(major, what)
        if length is not None:
            return self._take(length)
        parts = []
        total = 0
        while True:
            if self.peek() == BREAK:
                self.offset += 1
                return b"".join(parts)
            chunk_len = self._expect(major, what + " chunk")
            if chunk_len is None:
                raise StructureError("nested indefinite-length string")
            parts.append(self._take(chunk_len))
            total += chunk_len
            if total > self.max_size:
                raise SizeLimitError(f"string exceeds limit of {self.max_size}")

    def bytestring(self) -> bytes:
        return self._string(BYTES, "byte string")

    def text(self) -> str:
        raw = self._string(TEXT, "text string")
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise StructureError(f"invalid UTF-8 in text string: {exc}") from None

    def array(self) -> int | None:
        """Consume an array head and return its length, ``None`` if indefinite."""
        return self._expect(ARRAY, "array")

    def at_break(self) -> bool:
        return self.peek() == BREAK

    def end_indefinite(self) -> None:
        if self.peek() != BREAK:
            raise StructureError(f"expected break at offset {self.offset}")
        self.offset += 1

    def boolean(self) -> bool:
        b = self.peek()
        if b not in (TRUE, FALSE):
            raise StructureError(f"expected boolean at offset {self.offset}")
        self.offset += 1
        return b == TRUE

    def item(self, depth: int = 0):
        """Decode any supported item into Python values."""
        if depth > MAX_DEPTH:
            raise StructureError("nesting too deep")
        start = self.offset
        if self.peek() in (TRUE, FALSE):
            return self.boolean()
        if self.peek() == NULL:
            self.offset += 1
            return None
        major, arg = self.head()
        if major == UINT:
            return arg
        if major == NEGINT:
            return -1 - arg
        if major in (BYTES, TEXT):
            self.offset = start
            return self.bytestring() if major == BYTES else self.text()
        if major == ARRAY:
            items = []
            if arg is None:
                while not self.at_break():
                    items.append(self.item(depth + 1))
                self.offset += 1
            else:
                if arg > self.remaining:
                    raise TruncatedError(f"array of {arg} items cannot fit in {self.remaining} bytes")
                for _ in range(arg):
                    items.append(self.item(depth + 1))
            return items
        raise StructureError(f"unsupported CBOR major type {major} at offset {start}")


def decode(data) -> object:
    """Decode exactly one item; trailing bytes are an error."""
    dec = Decoder(data)
    value = dec.item()
    if not dec.at_end():
        raise StructureError(f"{dec.remaining} trailing bytes after item")
    return value

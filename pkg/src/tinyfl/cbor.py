"""Minimal deterministic CBOR (RFC 8949) encoder and decoder.

Only the subset needed by the TinyFL message schemas is supported:
unsigned integers, floats, booleans, byte and text strings, arrays and
tags. Maps, negative integers and indefinite-length items are rejected.

The encoder is strict and follows an :class:`EncodingProfile`; the
decoder is liberal and accepts any legal head length.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Tuple, Union

UINT64_MAX = (1 << 64) - 1

# Major types
UNSIGNED_INT = 0
NEGATIVE_INT = 1
BYTE_STRING = 2
TEXT_STRING = 3
ARRAY = 4
MAP = 5
TAG = 6
SIMPLE = 7

FALSE_BYTE = 0xF4
TRUE_BYTE = 0xF5


class CborError(ValueError):
    """Base class for decode errors. ``code`` is a stable short identifier."""

    code = "cbor-error"

    def __init__(self, detail: str, offset: int | None = None):
        self.detail = detail
        self.offset = offset
        where = "" if offset is None else f" at offset {offset}"
        super().__init__(f"{self.code}: {detail}{where}")


class TruncatedInput(CborError):
    code = "truncated-input"


class UnsupportedItem(CborError):
    code = "unsupported-major-type"


class FloatWidth(enum.IntEnum):
    """IEEE 754 width; the value is the size in octets."""

    HALF = 2
    SINGLE = 4
    DOUBLE = 8

    @property
    def initial_byte(self) -> int:
        return _FLOAT_INITIAL[self]

    @property
    def struct_code(self) -> str:
        return _FLOAT_STRUCT[self]


_FLOAT_INITIAL = {FloatWidth.HALF: 0xF9, FloatWidth.SINGLE: 0xFA, FloatWidth.DOUBLE: 0xFB}
_FLOAT_STRUCT = {FloatWidth.HALF: "e", FloatWidth.SINGLE: "f", FloatWidth.DOUBLE: "d"}


class EncodingProfile(enum.Enum):
    """COMPACT is the best case (minimal widths), VERBOSE the worst case."""

    COMPACT = "compact"
    VERBOSE = "verbose"


COMPACT = EncodingProfile.COMPACT
VERBOSE = EncodingProfile.VERBOSE


@dataclass(frozen=True)
class Uint:
    value: int

    def __post_init__(self):
        if not 0 <= self.value <= UINT64_MAX:
            raise ValueError(f"unsigned integer out of range: {self.value}")


@dataclass(frozen=True)
class Float:
    value: float
    width: FloatWidth = FloatWidth.DOUBLE


@dataclass(frozen=True)
class Bool:
    value: bool


@dataclass(frozen=True)
class Bytes:
    value: bytes


@dataclass(frozen=True)
class Text:
    value: str


@dataclass(frozen=True)
class Array:
    items: Tuple["CborValue", ...]

    def __init__(self, items=()):
        object.__setattr__(self, "items", tuple(items))


@dataclass(frozen=True)
class Tagged:
    tag: int
    item: "CborValue"

    def __post_init__(self):
        if not 0 <= self.tag <= UINT64_MAX:
            raise ValueError(f"tag out of range: {self.tag}")


CborValue = Union[Uint, Float, Bool, Bytes, Text, Array, Tagged]


def head(major: int, arg: int, width: int | None = None) -> bytes:
    """Encode an item head. ``width`` forces the argument size in octets
    (0 means inline in the initial byte); None picks the shortest form."""
    if width is None:
        if arg < 24:
            width = 0
        elif arg < 0x100:
            width = 1
        elif arg < 0x10000:
            width = 2
        elif arg < 0x100000000:
            width = 4
        else:
            width = 8
    if width == 0:
        if arg >= 24:
            raise ValueError(f"argument {arg} does not fit in the initial byte")
        return bytes([(major << 5) | arg])
    ai = {1: 24, 2: 25, 4: 26, 8: 27}[width]
    return bytes([(major << 5) | ai]) + arg.to_bytes(width, "big")


def head_length(arg: int) -> int:
    """Octets used by a minimal head carrying ``arg``."""
    if arg < 24:
        return 1
    if arg < 0x100:
        return 2
    if arg < 0x10000:
        return 3
    if arg < 0x100000000:
        return 5
    return 9


_LE = {FloatWidth.HALF: struct.Struct("<e"), FloatWidth.SINGLE: struct.Struct("<f")}
_BE = {w: struct.Struct(">" + w.struct_code) for w in FloatWidth}
_NAN = {FloatWidth.HALF: b"\xf9\x7e\x00", FloatWidth.SINGLE: b"\xfa\x7f\xc0\x00\x00",
        FloatWidth.DOUBLE: b"\xfb\x7f\xf8\x00\x00\x00\x00\x00\x00"}


def fits_width(x: float, width: FloatWidth) -> bool:
    """True if ``x`` survives a round trip through ``width`` unchanged."""
    if width is FloatWidth.DOUBLE or math.isnan(x) or math.isinf(x):
        return True
    codec = _LE[width]
    try:
        return codec.unpack(codec.pack(x))[0] == x
    except OverflowError:
        return False


def min_float_width(x: float) -> FloatWidth:
    """Smallest IEEE 754 width that represents ``x`` exactly. NaN and
    infinities always fit in a half float."""
    if fits_width(x, FloatWidth.HALF):
        return FloatWidth.HALF
    if fits_width(x, FloatWidth.SINGLE):
        return FloatWidth.SINGLE
    return FloatWidth.DOUBLE


def encode_float(x: float, width: FloatWidth) -> bytes:
    if x != x:
        # canonical quiet NaN of the chosen width
        return _NAN[width]
    return bytes([width.initial_byte]) + _BE[width].pack(x)


def encode_value(v: CborValue, profile: EncodingProfile = COMPACT) -> bytes:
    """Encode ``v``. Under VERBOSE every unsigned integer item takes a
    9-octet head and every float is a double; length and tag heads are
    always minimal under both profiles."""
    out = bytearray()
    _encode(v, profile, out)
    return bytes(out)


def _encode(v: CborValue, profile: EncodingProfile, out: bytearray) -> None:
    if isinstance(v, Float):
        width = FloatWidth.DOUBLE if profile is VERBOSE else min_float_width(v.value)
        out += encode_float(v.value, width)
    elif isinstance(v, Uint):
        out += head(UNSIGNED_INT, v.value, 8 if profile is VERBOSE else None)
    elif isinstance(v, Bool):
        out.append(TRUE_BYTE if v.value else FALSE_BYTE)
    elif isinstance(v, Bytes):
        out += head(BYTE_STRING, len(v.value))
        out += v.value
    elif isinstance(v, Text):
        raw = v.value.encode("utf-8")
        out += head(TEXT_STRING, len(raw))
        out += raw
    elif isinstance(v, Array):
        out += head(ARRAY, len(v.items))
        for item in v.items:
            _encode(item, profile, out)
    elif isinstance(v, Tagged):
        out += head(TAG, v.tag)
        _encode(v.item, profile, out)
    else:
        raise TypeError(f"not a CBOR value: {v!r}")


def decode_value(buf: bytes, offset: int = 0) -> Tuple[CborValue, int]:
    """Decode one data item starting at ``offset``.

    Returns the value and the number of octets consumed.
    """
    value, end = _decode(memoryview(buf), offset)
    return value, end - offset


def decode_all(buf: bytes) -> CborValue:
    """Decode exactly one data item spanning all of ``buf``."""
    value, consumed = decode_value(buf)
    if consumed != len(buf):
        raise CborError(f"{len(buf) - consumed} trailing octets", consumed)
    return value


def _need(buf: memoryview, pos: int, n: int) -> None:
    if pos + n > len(buf):
        raise TruncatedInput(f"need {n} octets, {len(buf) - pos} available", pos)


def _read_head(buf: memoryview, pos: int) -> Tuple[int, int, int, int]:
    """Return (major, additional info, argument, next position)."""
    if pos >= len(buf):
        raise TruncatedInput(f"need 1 octets, {len(buf) - pos} available", pos)
    ib = buf[pos]
    ai = ib & 0x1F
    if ai < 24:
        return ib >> 5, ai, ai, pos + 1
    if ai <= 27:
        end = pos + 1 + (1 << (ai - 24))
        if end > len(buf):
            raise TruncatedInput(f"need {end - pos - 1} octets, {len(buf) - pos - 1} available", pos + 1)
        return ib >> 5, ai, int.from_bytes(buf[pos + 1:end], "big"), end
    raise UnsupportedItem(f"additional information {ai} (indefinite or reserved)", pos)


_FLOAT_BY_IB = {w.initial_byte: w for w in FloatWidth}


def _decode(buf: memoryview, pos: int) -> Tuple[CborValue, int]:
    start = pos
    if pos < len(buf) and buf[pos] in _FLOAT_BY_IB:
        # fast path: unpack floats straight from the buffer
        width = _FLOAT_BY_IB[buf[pos]]
        end = pos + 1 + width
        if end > len(buf):
            raise TruncatedInput(f"need {width} octets, {len(buf) - pos - 1} available", pos + 1)
        return Float(_BE[width].unpack_from(buf, pos + 1)[0], width), end
    major, ai, arg, pos = _read_head(buf, pos)
    if major == UNSIGNED_INT:
        return Uint(arg), pos
    if major == BYTE_STRING or major == TEXT_STRING:
        _need(buf, pos, arg)
        raw = bytes(buf[pos:pos + arg])
        if major == BYTE_STRING:
            return Bytes(raw), pos + arg
        try:
            return Text(raw.decode("utf-8")), pos + arg
        except UnicodeDecodeError as exc:
            raise CborError(f"invalid UTF-8 in text string: {exc.reason}", start) from None
    if major == ARRAY:
        if arg > len(buf) - pos:
            # every item needs at least one octet
            raise TruncatedInput(f"array of {arg} items", start)
        items = []
        for _ in range(arg):
            item, pos = _decode(buf, pos)
            items.append(item)
        return Array(items), pos
    if major == TAG:
        item, pos = _decode(buf, pos)
        return Tagged(arg, item), pos
    if major == SIMPLE:
        if ai == 20:
            return Bool(False), pos
        if ai == 21:
            return Bool(True), pos
        raise UnsupportedItem(f"simple value {arg}", start)
    raise UnsupportedItem(f"major type {major}", start)


def diagnostic(v: CborValue) -> str:
    """Extended diagnostic notation; floats carry their width indicator
    (_1 half, _2 single, _3 double)."""
    if isinstance(v, Uint):
        return str(v.value)
    if isinstance(v, Float):
        suffix = {FloatWidth.HALF: "_1", FloatWidth.SINGLE: "_2", FloatWidth.DOUBLE: "_3"}[v.width]
        x = v.value
        if math.isnan(x):
            text = "NaN"
        elif math.isinf(x):
            text = "Infinity" if x > 0 else "-Infinity"
        else:
            text = repr(x)
        return text + suffix
    if isinstance(v, Bool):
        return "true" if v.value else "false"
    if isinstance(v, Bytes):
        return f"h'{v.value.hex()}'"
    if isinstance(v, Text):
        escaped = v.value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, Array):
        return "[" + ", ".join(diagnostic(i) for i in v.items) + "]"
    if isinstance(v, Tagged):
        return f"{v.tag}({diagnostic(v.item)})"
    raise TypeError(f"not a CBOR value: {v!r}")


def same_value(a: CborValue, b: CborValue, *, widths: bool = True) -> bool:
    """Structural equality treating NaN as equal to NaN. With
    ``widths=False`` float widths are ignored."""
    if type(a) is not type(b):
        return False
    if isinstance(a, Float):
        if widths and a.width != b.width:
            return False
        if math.isnan(a.value) or math.isnan(b.value):
            return math.isnan(a.value) and math.isnan(b.value)
        return a.value == b.value and math.copysign(1, a.value) == math.copysign(1, b.value)
    if isinstance(a, Array):
        return len(a.items) == len(b.items) and all(
            same_value(x, y, widths=widths) for x, y in zip(a.items, b.items))
    if isinstance(a, Tagged):
        return a.tag == b.tag and same_value(a.item, b.item, widths=widths)
    return a == b

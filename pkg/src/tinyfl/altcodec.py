"""Minified JSON and Protobuf encodings of the TinyFL messages.

These exist for size comparison against CBOR. JSON mirrors the CBOR
array layout positionally. Protobuf follows this schema (proto3)::

    message ModelMetadata {
      double train_loss = 1;
      double val_loss = 2;
    }
    message GlobalModelUpdate {
      bytes model_identifier = 1;
      uint64 model_round = 2;
      repeated float model_params = 3 [packed = true];
      bool continue_training = 4;
    }
    message LocalDataSetUpdate {
      uint64 local_dataset_size = 1;
      ModelMetadata metadata = 2;
    }
    message LocalModelUpdate {
      bytes model_identifier = 1;
      uint64 model_round = 2;
      repeated float model_params = 3 [packed = true];
      ModelMetadata metadata = 4;
    }

Unlike stock proto3 serializers, scalar fields holding default values are
still written so that sizes depend only on varint widths.
"""

from __future__ import annotations

import json
import struct
import uuid as _uuid
from typing import Iterator, Tuple

import numpy as np

from .cbor import FloatWidth
from .messages import (HETEROGENEOUS, KINDS, GlobalModelUpdate, LocalDataSetUpdate,
                       LocalModelUpdate, Message, ModelIdentifier, ModelMetadata,
                       ModelParams, typed_array)

# Protobuf wire types
VARINT = 0
FIXED64 = 1
LENGTH_DELIMITED = 2
START_GROUP = 3
END_GROUP = 4
FIXED32 = 5


class DecodeError(ValueError):
    code = "parse-error"

    def __init__(self, detail: str, position: int):
        self.detail = detail
        self.position = position
        super().__init__(f"{self.code}: {detail} at position {position}")


def _kind(kind):
    return KINDS.get(kind, kind)


# -- JSON -------------------------------------------------------------------

def _json_tree(m: Message) -> list:
    if isinstance(m, LocalDataSetUpdate):
        tree = [m.local_dataset_size]
        if m.metadata is not None:
            tree += [m.metadata.train_loss, m.metadata.val_loss]
        return tree
    tree = [str(m.model_identifier), m.model_round, list(m.model_params.values)]
    if isinstance(m, GlobalModelUpdate):
        tree.append(m.continue_training)
    else:
        tree += [m.metadata.train_loss, m.metadata.val_loss]
    return tree


def json_encode(m: Message) -> str:
    """Minified positional JSON; floats use the shortest round-trip form."""
    return json.dumps(_json_tree(m), separators=(",", ":"))


def _json_number(v, name: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise DecodeError(f"{name}: expected number, got {type(v).__name__}", 0)
    return float(v)


def _json_uint(v, name: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise DecodeError(f"{name}: expected unsigned integer", 0)
    return v


def json_decode(text, kind) -> Message:
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DecodeError(exc.msg, exc.pos) from None
    cls = _kind(kind)
    if not isinstance(tree, list):
        raise DecodeError("expected top-level array", 0)
    if cls is LocalDataSetUpdate:
        if len(tree) not in (1, 3):
            raise DecodeError(f"expected 1 or 3 items, got {len(tree)}", 0)
        meta = None
        if len(tree) == 3:
            meta = ModelMetadata(_json_number(tree[1], "train_loss"), _json_number(tree[2], "val_loss"))
        return LocalDataSetUpdate(_json_uint(tree[0], "local_dataset_size"), meta)
    arity = 4 if cls is GlobalModelUpdate else 5
    if len(tree) != arity:
        raise DecodeError(f"expected {arity} items, got {len(tree)}", 0)
    if not isinstance(tree[0], str):
        raise DecodeError("model_identifier: expected string", 0)
    try:
        ident = ModelIdentifier(_uuid.UUID(tree[0]).bytes)
    except ValueError:
        raise DecodeError(f"model_identifier: bad UUID {tree[0]!r}", 0) from None
    rnd = _json_uint(tree[1], "model_round")
    if not isinstance(tree[2], list):
        raise DecodeError("model_params: expected array", 0)
    params = ModelParams([_json_number(v, "model_params") for v in tree[2]], HETEROGENEOUS)
    if cls is GlobalModelUpdate:
        if not isinstance(tree[3], bool):
            raise DecodeError("continue_training: expected boolean", 0)
        return GlobalModelUpdate(ident, rnd, params, tree[3])
    meta = ModelMetadata(_json_number(tree[3], "train_loss"), _json_number(tree[4], "val_loss"))
    return LocalModelUpdate(ident, rnd, params, meta)


# -- Protobuf wire format -----------------------------------------------------

def encode_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint must be non-negative")
    out = bytearray()
    while True:
        bits = value & 0x7F
        value >>= 7
        if value:
            out.append(0x80 | bits)
        else:
            out.append(bits)
            return bytes(out)


def varint_len(value: int) -> int:
    return max(1, (value.bit_length() + 6) // 7)


def decode_varint(buf: bytes, pos: int) -> Tuple[int, int]:
    result = shift = 0
    start = pos
    while True:
        if pos >= len(buf):
            raise DecodeError("truncated varint", start)
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift >= 70:
            raise DecodeError("varint too long", start)


def _key(field_number: int, wire_type: int) -> bytes:
    return encode_varint((field_number << 3) | wire_type)


def _len_field(field_number: int, payload: bytes) -> bytes:
    return _key(field_number, LENGTH_DELIMITED) + encode_varint(len(payload)) + payload


def quantize_f32(values) -> list:
    """Round values to binary32 as Protobuf ``float`` fields do."""
    with np.errstate(over="ignore"):
        return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64).tolist()


def _packed_floats(values) -> bytes:
    with np.errstate(over="ignore"):
        return np.asarray(values, dtype=np.float64).astype("<f4").tobytes()


def _pb_metadata(meta: ModelMetadata) -> bytes:
    return (_key(1, FIXED64) + struct.pack("<d", meta.train_loss)
            + _key(2, FIXED64) + struct.pack("<d", meta.val_loss))


def pb_encode(m: Message) -> bytes:
    if isinstance(m, LocalDataSetUpdate):
        out = _key(1, VARINT) + encode_varint(m.local_dataset_size)
        if m.metadata is not None:
            out += _len_field(2, _pb_metadata(m.metadata))
        return out
    out = (_len_field(1, bytes(m.model_identifier.uuid))
           + _key(2, VARINT) + encode_varint(m.model_round)
           + _len_field(3, _packed_floats(m.model_params.values)))
    if isinstance(m, GlobalModelUpdate):
        return out + _key(4, VARINT) + encode_varint(int(m.continue_training))
    return out + _len_field(4, _pb_metadata(m.metadata))


def iter_fields(buf: bytes) -> Iterator[Tuple[int, int, object, int]]:
    """Yield (field number, wire type, value, start offset). Varint
    values are ints; the rest are raw bytes."""
    pos = 0
    while pos < len(buf):
        start = pos
        key, pos = decode_varint(buf, pos)
        number, wire_type = key >> 3, key & 7
        if number == 0:
            raise DecodeError("field number 0", start)
        if wire_type == VARINT:
            value, pos = decode_varint(buf, pos)
        elif wire_type in (FIXED64, FIXED32):
            n = 8 if wire_type == FIXED64 else 4
            if pos + n > len(buf):
                raise DecodeError("truncated fixed-width field", start)
            value, pos = bytes(buf[pos:pos + n]), pos + n
        elif wire_type == LENGTH_DELIMITED:
            n, pos = decode_varint(buf, pos)
            if pos + n > len(buf):
                raise DecodeError("truncated length-delimited field", start)
            value, pos = bytes(buf[pos:pos + n]), pos + n
        else:
            raise DecodeError(f"unsupported wire type {wire_type}", start)
        yield number, wire_type, value, start


def _pb_metadata_decode(buf: bytes) -> ModelMetadata:
    losses = {1: 0.0, 2: 0.0}
    for number, wire_type, value, start in iter_fields(buf):
        if number in losses:
            if wire_type != FIXED64:
                raise DecodeError(f"metadata field {number}: expected fixed64", start)
            losses[number] = struct.unpack("<d", value)[0]
    return ModelMetadata(losses[1], losses[2])


def _expect(wire_type: int, want: int, name: str, start: int) -> None:
    if wire_type != want:
        raise DecodeError(f"{name}: wire type {wire_type}, expected {want}", start)


def pb_decode(buf: bytes, kind) -> Message:
    """Decode; unknown fields are skipped. Params come back as binary32."""
    cls = _kind(kind)
    if cls is LocalDataSetUpdate:
        size, meta = 0, None
        for number, wire_type, value, start in iter_fields(buf):
            if number == 1:
                _expect(wire_type, VARINT, "local_dataset_size", start)
                size = value
            elif number == 2:
                _expect(wire_type, LENGTH_DELIMITED, "metadata", start)
                meta = _pb_metadata_decode(value)
        return LocalDataSetUpdate(size, meta)

    ident, rnd, flag = bytes(16), 0, False
    params = bytearray()
    meta = ModelMetadata(0.0, 0.0)
    for number, wire_type, value, start in iter_fields(buf):
        if number == 1:
            _expect(wire_type, LENGTH_DELIMITED, "model_identifier", start)
            if len(value) != 16:
                raise DecodeError("model_identifier: expected 16 octets", start)
            ident = value
        elif number == 2:
            _expect(wire_type, VARINT, "model_round", start)
            rnd = value
        elif number == 3:
            # packed, or the unpacked repeated form
            if wire_type == LENGTH_DELIMITED:
                if len(value) % 4:
                    raise DecodeError("model_params: packed length not a multiple of 4", start)
                params += value
            else:
                _expect(wire_type, FIXED32, "model_params", start)
                params += value
        elif number == 4 and cls is GlobalModelUpdate:
            _expect(wire_type, VARINT, "continue_training", start)
            flag = bool(value)
        elif number == 4:
            _expect(wire_type, LENGTH_DELIMITED, "metadata", start)
            meta = _pb_metadata_decode(value)
    values = np.frombuffer(bytes(params), dtype="<f4").astype(np.float64).tolist()
    model_params = ModelParams(values, typed_array(FloatWidth.SINGLE))
    if cls is GlobalModelUpdate:
        return GlobalModelUpdate(ModelIdentifier(ident), rnd, model_params, flag)
    return LocalModelUpdate(ModelIdentifier(ident), rnd, model_params, meta)

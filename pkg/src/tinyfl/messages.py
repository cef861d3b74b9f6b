"""The three TinyFL messages and their CBOR mappings.

CDDL (with the typed-array tags of RFC 8746, little-endian forms)::

    FL_Global_Model_Update = [
      fl-model-identifier,
      fl-model-round,
      fl-model-params,
      fl-continue-training : bool
    ]
    FL_Local_DataSet_Update = [
      fl-local-dataset-size : uint,
      ? fl-model-metadata,
    ]
    FL_Local_Model_Update = [
      fl-model-identifier,
      fl-model-round,
      fl-model-params,
      fl-model-metadata,
    ]

    fl-model-identifier = #6.37(bstr)
    fl-model-round = uint
    fl-model-params /= [* float]
    fl-model-params /= ta-float16le   ; #6.84(bstr)
    fl-model-params /= ta-float32le   ; #6.85(bstr)
    fl-model-params /= ta-float64le   ; #6.86(bstr)
    fl-model-metadata = (
      fl-local-model-train-loss : float,
      fl-local-model-val-loss : float,
    )

The metadata group is spliced into the enclosing array.
"""

from __future__ import annotations

import math
import uuid as _uuid
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from . import cbor
from .cbor import (COMPACT, VERBOSE, Array, Bool, Bytes, EncodingProfile, Float,
                   FloatWidth, Tagged, Uint)

UUID_TAG = 37
TYPED_ARRAY_TAGS = {FloatWidth.HALF: 84, FloatWidth.SINGLE: 85, FloatWidth.DOUBLE: 86}
TYPED_ARRAY_WIDTHS = {tag: width for width, tag in TYPED_ARRAY_TAGS.items()}
TYPED_ARRAY_NAMES = {FloatWidth.HALF: "ta-float16le", FloatWidth.SINGLE: "ta-float32le",
                     FloatWidth.DOUBLE: "ta-float64le"}
_NP_DTYPES = {FloatWidth.HALF: "<f2", FloatWidth.SINGLE: "<f4", FloatWidth.DOUBLE: "<f8"}


class SchemaMismatch(ValueError):
    """A decoded item does not match the message schema."""

    code = "schema-mismatch"

    def __init__(self, field_name: str, detail: str):
        self.field = field_name
        self.detail = detail
        super().__init__(f"{self.code}: {field_name}: {detail}")


@dataclass(frozen=True)
class ModelIdentifier:
    uuid: bytes

    def __post_init__(self):
        if len(self.uuid) != 16:
            raise ValueError(f"model identifier must be 16 octets, got {len(self.uuid)}")

    @classmethod
    def parse(cls, text: str) -> "ModelIdentifier":
        """Accept 32 hex digits or the hyphenated UUID form."""
        return cls(_uuid.UUID(hex=text.strip()).bytes)

    def __str__(self):
        return str(_uuid.UUID(bytes=bytes(self.uuid)))


@dataclass(frozen=True)
class ParamsEncoding:
    """``width`` None means a heterogeneous CBOR array of floats,
    otherwise a little-endian typed array of that width."""

    width: Optional[FloatWidth] = None

    @property
    def is_typed(self) -> bool:
        return self.width is not None

    def __str__(self):
        return "array" if self.width is None else TYPED_ARRAY_NAMES[self.width]


HETEROGENEOUS = ParamsEncoding()


def typed_array(width: FloatWidth) -> ParamsEncoding:
    return ParamsEncoding(FloatWidth(width))


@dataclass(frozen=True)
class ModelParams:
    """Model parameters. ``encoding`` None lets the profile decide; it
    is excluded from equality so decoded messages compare by value."""

    values: Tuple[float, ...]
    encoding: Optional[ParamsEncoding] = field(default=None, compare=False)

    def __init__(self, values: Sequence[float] = (), encoding: Optional[ParamsEncoding] = None):
        object.__setattr__(self, "values", tuple(float(v) for v in values))
        object.__setattr__(self, "encoding", encoding)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class ModelMetadata:
    train_loss: float
    val_loss: float


@dataclass(frozen=True)
class GlobalModelUpdate:
    model_identifier: ModelIdentifier
    model_round: int
    model_params: ModelParams
    continue_training: bool = True


@dataclass(frozen=True)
class LocalDataSetUpdate:
    local_dataset_size: int
    metadata: Optional[ModelMetadata] = None


@dataclass(frozen=True)
class LocalModelUpdate:
    model_identifier: ModelIdentifier
    model_round: int
    model_params: ModelParams
    metadata: ModelMetadata


Message = Union[GlobalModelUpdate, LocalDataSetUpdate, LocalModelUpdate]

MESSAGE_NAMES = {
    GlobalModelUpdate: "FL_Global_Model_Update",
    LocalDataSetUpdate: "FL_Local_DataSet_Update",
    LocalModelUpdate: "FL_Local_Model_Update",
}
KINDS = {"global": GlobalModelUpdate, "dataset": LocalDataSetUpdate, "local": LocalModelUpdate}


def array_min_width(values: Sequence[float]) -> FloatWidth:
    """Smallest width at which every value round-trips (HALF if empty)."""
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    with np.errstate(over="ignore"):
        if np.array_equal(finite.astype(np.float16).astype(np.float64), finite):
            return FloatWidth.HALF
        if np.array_equal(finite.astype(np.float32).astype(np.float64), finite):
            return FloatWidth.SINGLE
    return FloatWidth.DOUBLE


# below this length the per-value struct check beats numpy's call overhead
_SMALL = 64


def per_value_widths(values: Sequence[float]) -> np.ndarray:
    """Minimal width of each value, in octets."""
    if len(values) < _SMALL:
        return np.array([int(cbor.min_float_width(v)) for v in values], dtype=np.int64)
    arr = np.asarray(values, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        half = arr.astype(np.float16).astype(np.float64) == arr
        single = arr.astype(np.float32).astype(np.float64) == arr
    half |= ~np.isfinite(arr)
    return np.where(half, 2, np.where(single, 4, 8))


def _compact_sizes(values: Sequence[float]) -> Tuple[FloatWidth, int, int]:
    n = len(values)
    widths = per_value_widths(values)
    width = FloatWidth(int(widths.max())) if n else FloatWidth.HALF
    typed = 2 + cbor.head_length(width * n) + width * n
    hetero = cbor.head_length(n) + n + int(widths.sum())
    return width, typed, hetero


def params_sizes(values: Sequence[float]) -> Tuple[int, int]:
    """Compact encoded sizes of (typed array, heterogeneous array)."""
    return _compact_sizes(values)[1:]


def choose_params_encoding(values: Sequence[float], profile: EncodingProfile) -> ParamsEncoding:
    """VERBOSE always uses a heterogeneous array of doubles. COMPACT uses a
    typed array at the widest per-value minimal width, unless the plain
    array of minimal-width floats is strictly shorter (empty lists, one
    element, or a few wide values among many narrow ones)."""
    if profile is VERBOSE:
        return HETEROGENEOUS
    width, typed, hetero = _compact_sizes(values)
    return HETEROGENEOUS if hetero < typed else typed_array(width)


def _params_to_cbor(params: ModelParams, profile: EncodingProfile) -> cbor.CborValue:
    encoding = params.encoding
    if encoding is None:
        encoding = choose_params_encoding(params.values, profile)
    elif encoding.is_typed and array_min_width(params.values) > encoding.width:
        raise ValueError(f"parameters do not round-trip at {TYPED_ARRAY_NAMES[encoding.width]}")
    if not encoding.is_typed:
        return Array(Float(v) for v in params.values)
    raw = np.asarray(params.values, dtype=_NP_DTYPES[encoding.width]).tobytes()
    return Tagged(TYPED_ARRAY_TAGS[encoding.width], Bytes(raw))


def _identifier_to_cbor(ident: ModelIdentifier) -> cbor.CborValue:
    return Tagged(UUID_TAG, Bytes(bytes(ident.uuid)))


def _metadata_items(meta: ModelMetadata) -> list:
    return [Float(meta.train_loss), Float(meta.val_loss)]


def message_to_cbor(m: Message, profile: EncodingProfile = COMPACT) -> cbor.CborValue:
    if isinstance(m, GlobalModelUpdate):
        return Array([
            _identifier_to_cbor(m.model_identifier),
            Uint(m.model_round),
            _params_to_cbor(m.model_params, profile),
            Bool(m.continue_training),
        ])
    if isinstance(m, LocalDataSetUpdate):
        items = [Uint(m.local_dataset_size)]
        if m.metadata is not None:
            items += _metadata_items(m.metadata)
        return Array(items)
    if isinstance(m, LocalModelUpdate):
        return Array([
            _identifier_to_cbor(m.model_identifier),
            Uint(m.model_round),
            _params_to_cbor(m.model_params, profile),
            *_metadata_items(m.metadata),
        ])
    raise TypeError(f"not a TinyFL message: {type(m).__name__}")


def encode(m: Message, profile: EncodingProfile = COMPACT) -> bytes:
    return cbor.encode_value(message_to_cbor(m, profile), profile)


def encode_global(m: GlobalModelUpdate, profile: EncodingProfile = COMPACT) -> bytes:
    return encode(m, profile)


def encode_dataset_update(m: LocalDataSetUpdate, profile: EncodingProfile = COMPACT) -> bytes:
    return encode(m, profile)


def encode_local_model(m: LocalModelUpdate, profile: EncodingProfile = COMPACT) -> bytes:
    return encode(m, profile)


# -- decoding ---------------------------------------------------------------

def _parse_root(buf: bytes, name: str, arities: Tuple[int, ...], field_for_arity) -> tuple:
    value = cbor.decode_all(buf)
    if not isinstance(value, Array):
        raise SchemaMismatch(name, f"expected array, got {type(value).__name__}")
    n = len(value.items)
    if n not in arities:
        raise SchemaMismatch(field_for_arity(n), f"expected {' or '.join(map(str, arities))} items, got {n}")
    return value.items


def _parse_identifier(item) -> ModelIdentifier:
    name = "fl-model-identifier"
    if not isinstance(item, Tagged) or item.tag != UUID_TAG:
        raise SchemaMismatch(name, f"expected tag {UUID_TAG}")
    if not isinstance(item.item, Bytes) or len(item.item.value) != 16:
        raise SchemaMismatch(name, "expected 16-octet byte string")
    return ModelIdentifier(item.item.value)


def _parse_uint(item, name: str) -> int:
    if not isinstance(item, Uint):
        raise SchemaMismatch(name, f"expected uint, got {type(item).__name__}")
    return item.value


def _parse_float(item, name: str) -> float:
    if not isinstance(item, Float):
        raise SchemaMismatch(name, f"expected float, got {type(item).__name__}")
    return item.value


def _parse_params(item) -> ModelParams:
    name = "fl-model-params"
    if isinstance(item, Array):
        values = []
        for i, elem in enumerate(item.items):
            if not isinstance(elem, Float):
                raise SchemaMismatch(name, f"element {i} is {type(elem).__name__}, expected float")
            values.append(elem.value)
        return ModelParams(values, HETEROGENEOUS)
    if isinstance(item, Tagged):
        width = TYPED_ARRAY_WIDTHS.get(item.tag)
        if width is None:
            raise SchemaMismatch(name, f"unsupported tag {item.tag}")
        if not isinstance(item.item, Bytes):
            raise SchemaMismatch(name, "typed array content must be a byte string")
        raw = item.item.value
        if len(raw) % width:
            raise SchemaMismatch(name, f"byte string length {len(raw)} not a multiple of {int(width)}")
        values = np.frombuffer(raw, dtype=_NP_DTYPES[width]).astype(np.float64).tolist()
        return ModelParams(values, typed_array(width))
    raise SchemaMismatch(name, f"expected array or typed array, got {type(item).__name__}")


def _parse_metadata(items) -> ModelMetadata:
    train = _parse_float(items[0], "fl-local-model-train-loss")
    val = _parse_float(items[1], "fl-local-model-val-loss")
    return ModelMetadata(train, val)


def decode_global(buf: bytes) -> GlobalModelUpdate:
    items = _parse_root(buf, "FL_Global_Model_Update", (4,), lambda n: "fl-continue-training"
                        if n == 3 else "FL_Global_Model_Update")
    flag = items[3]
    if not isinstance(flag, Bool):
        raise SchemaMismatch("fl-continue-training", f"expected bool, got {type(flag).__name__}")
    return GlobalModelUpdate(
        _parse_identifier(items[0]),
        _parse_uint(items[1], "fl-model-round"),
        _parse_params(items[2]),
        flag.value,
    )


def decode_dataset_update(buf: bytes) -> LocalDataSetUpdate:
    items = _parse_root(buf, "FL_Local_DataSet_Update", (1, 3), lambda n: "fl-model-metadata"
                        if n == 2 else "FL_Local_DataSet_Update")
    size = _parse_uint(items[0], "fl-local-dataset-size")
    meta = _parse_metadata(items[1:]) if len(items) == 3 else None
    return LocalDataSetUpdate(size, meta)


def decode_local_model(buf: bytes) -> LocalModelUpdate:
    items = _parse_root(buf, "FL_Local_Model_Update", (5,), lambda n: "fl-model-metadata"
                        if n < 5 else "FL_Local_Model_Update")
    return LocalModelUpdate(
        _parse_identifier(items[0]),
        _parse_uint(items[1], "fl-model-round"),
        _parse_params(items[2]),
        _parse_metadata(items[3:5]),
    )


DECODERS = {
    GlobalModelUpdate: decode_global,
    LocalDataSetUpdate: decode_dataset_update,
    LocalModelUpdate: decode_local_model,
}


def decode(buf: bytes, kind=None) -> Message:
    """Decode a message. Without ``kind`` the type is inferred from the
    top-level array arity (4 global, 5 local, 1 or 3 dataset)."""
    if kind is not None:
        return DECODERS[KINDS.get(kind, kind)](buf)
    value = cbor.decode_all(buf)
    if not isinstance(value, Array):
        raise SchemaMismatch("message", f"expected array, got {type(value).__name__}")
    n = len(value.items)
    if n == 4:
        return decode_global(buf)
    if n == 5:
        return decode_local_model(buf)
    if n in (1, 3):
        return decode_dataset_update(buf)
    raise SchemaMismatch("message", f"no message type has {n} items")


# -- diagnostics ------------------------------------------------------------

def _fmt_float(x: float) -> str:
    return repr(float(x))


def _fmt_params(p: ModelParams, limit: int = 8) -> str:
    shown = ", ".join(_fmt_float(v) for v in p.values[:limit])
    more = f", ... ({len(p.values)} values)" if len(p.values) > limit else ""
    return f"{p.encoding or 'unspecified'} [{shown}{more}]"


def describe(m: Message) -> str:
    """One ``<cddl-name>: <value>`` line per field."""
    lines = []
    if isinstance(m, LocalDataSetUpdate):
        lines.append(f"fl-local-dataset-size: {m.local_dataset_size}")
        meta = m.metadata
    else:
        lines.append(f"fl-model-identifier: {m.model_identifier}")
        lines.append(f"fl-model-round: {m.model_round}")
        lines.append(f"fl-model-params: {_fmt_params(m.model_params)}")
        meta = getattr(m, "metadata", None)
    if meta is not None:
        lines.append(f"fl-local-model-train-loss: {_fmt_float(meta.train_loss)}")
        lines.append(f"fl-local-model-val-loss: {_fmt_float(meta.val_loss)}")
    if isinstance(m, GlobalModelUpdate):
        lines.append(f"fl-continue-training: {'true' if m.continue_training else 'false'}")
    return "\n".join(lines)


def values_equal(a: Sequence[float], b: Sequence[float]) -> bool:
    """Element-wise equality that treats NaN as equal to NaN."""
    return len(a) == len(b) and all(
        x == y or (math.isnan(x) and math.isnan(y)) for x, y in zip(a, b))

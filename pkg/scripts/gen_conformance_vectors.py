"""Generate tests/data/cbor_vectors.txt, cross-checked against cbor2.

Half of the vectors are encoded by cbor2 (canonical mode) and decoded by
tinyfl; the other half are encoded by tinyfl under a random profile and
decoded by cbor2. Both sides must agree on every value before a vector
is written. Each line: ``<hex> <diagnostic notation>``.

Requires the ``dev`` extra (cbor2). Run once; the output is committed.
"""

import math
import random
import sys
import uuid
from pathlib import Path

import cbor2

from tinyfl import cbor
from tinyfl.cbor import (Array, Bool, Bytes, Float, FloatWidth, Tagged, Text, Uint,
                         min_float_width)

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "cbor_vectors.txt"
COUNT = 1000
TAGS = (37, 84, 85, 86)

UINT_BANDS = [(0, 23), (24, 255), (256, 65535), (65536, 2**32 - 1), (2**32, 2**64 - 1)]


def rand_float(rng):
    pick = rng.random()
    if pick < 0.2:
        return rng.choice([0.0, -0.0, 1.0, -2.5, 0.5, 65504.0, float("inf"), float("-inf"),
                           float("nan"), 5.960464477539063e-08, 1e-300])
    if pick < 0.5:
        return float(rng.randint(-2048, 2048)) / rng.choice([1, 2, 4, 1024])
    if pick < 0.75:
        import struct
        return struct.unpack("<f", struct.pack("<f", rng.uniform(-1e6, 1e6)))[0]
    return rng.uniform(-1e10, 1e10)


def rand_value(rng, depth=0):
    kinds = ["uint", "float", "bool", "bytes", "text"]
    if depth < 3:
        kinds += ["array", "tag"]
    kind = rng.choice(kinds)
    if kind == "uint":
        lo, hi = rng.choice(UINT_BANDS)
        return Uint(rng.randint(lo, hi))
    if kind == "float":
        x = rand_float(rng)
        return Float(x, min_float_width(x))
    if kind == "bool":
        return Bool(rng.random() < 0.5)
    if kind == "bytes":
        return Bytes(rng.randbytes(rng.choice([0, 1, 5, 16, 23, 24, 40, 300])))
    if kind == "text":
        n = rng.choice([0, 3, 23, 24, 30])
        return Text("".join(rng.choice("abcxyzé中\"\\ 01") for _ in range(n)))
    if kind == "array":
        return Array(rand_value(rng, depth + 1) for _ in range(rng.choice([0, 1, 2, 4, 24])))
    tag = rng.choice(TAGS)
    if tag == 37:
        return Tagged(37, Bytes(rng.randbytes(16)))
    width = {84: 2, 85: 4, 86: 8}[tag]
    return Tagged(tag, Bytes(rng.randbytes(width * rng.randint(0, 6))))


def to_native(v):
    """tinyfl value -> the Python object cbor2 uses for it."""
    if isinstance(v, (Uint, Bool, Bytes, Text)):
        return v.value
    if isinstance(v, Float):
        return v.value
    if isinstance(v, Array):
        return [to_native(i) for i in v.items]
    if v.tag == 37:
        return uuid.UUID(bytes=v.item.value)
    return cbor2.CBORTag(v.tag, to_native(v.item))


def same_native(a, b):
    if isinstance(a, float) and isinstance(b, float):
        if math.isnan(a) or math.isnan(b):
            return math.isnan(a) and math.isnan(b)
        return a == b and math.copysign(1, a) == math.copysign(1, b)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(same_native(x, y) for x, y in zip(a, b))
    if isinstance(a, cbor2.CBORTag) and isinstance(b, cbor2.CBORTag):
        return a.tag == b.tag and same_native(a.value, b.value)
    return type(a) is type(b) and a == b


def main(seed=20231017):
    rng = random.Random(seed)
    lines = []
    while len(lines) < COUNT:
        v = rand_value(rng)
        if len(lines) % 2 == 0:
            data = cbor2.dumps(to_native(v), canonical=True)
        else:
            profile = rng.choice([cbor.COMPACT, cbor.VERBOSE])
            data = cbor.encode_value(v, profile)
        decoded, consumed = cbor.decode_value(data)
        assert consumed == len(data)
        theirs = cbor2.loads(data)
        if not same_native(to_native(decoded), theirs):
            sys.exit(f"disagreement on {data.hex()}: {theirs!r} vs {decoded!r}")
        if not cbor.same_value(decoded, v, widths=False):
            sys.exit(f"value changed on {data.hex()}")
        lines.append(f"{data.hex()} {cbor.diagnostic(decoded)}")
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} vectors to {OUT}")


if __name__ == "__main__":
    main()

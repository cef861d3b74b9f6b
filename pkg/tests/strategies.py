"""Hypothesis strategies and plain random generators shared by the tests."""

import math
import random
import struct

from hypothesis import strategies as st

from tinyfl import cbor
from tinyfl.cbor import Array, Bool, Bytes, Float, FloatWidth, Tagged, Text, Uint
from tinyfl.messages import (GlobalModelUpdate, LocalDataSetUpdate, LocalModelUpdate,
                             ModelIdentifier, ModelMetadata, ModelParams)

UINT64_MAX = 2**64 - 1

uints = st.integers(min_value=0, max_value=UINT64_MAX)
finite = st.floats(allow_nan=False, allow_infinity=False)
half_exact = st.floats(width=16, allow_nan=False, allow_infinity=False)
single_exact = st.floats(width=32, allow_nan=False, allow_infinity=False)
any_float = st.floats()

scalars = st.one_of(
    uints.map(Uint),
    any_float.map(lambda x: Float(x, cbor.min_float_width(x))),
    st.booleans().map(Bool),
    st.binary(max_size=40).map(Bytes),
    st.text(max_size=30).map(Text),
    st.binary(min_size=16, max_size=16).map(lambda b: Tagged(37, Bytes(b))),
)
cbor_values = st.recursive(
    scalars,
    lambda children: st.one_of(
        st.lists(children, max_size=6).map(Array),
        st.tuples(st.sampled_from([84, 85, 86]), children).map(lambda t: Tagged(*t)),
    ),
    max_leaves=25,
)

identifiers = st.binary(min_size=16, max_size=16).map(ModelIdentifier)
metadata = st.builds(ModelMetadata, finite, finite)
param_lists = st.lists(st.one_of(half_exact, single_exact, finite), max_size=12)
params = param_lists.map(ModelParams)

global_updates = st.builds(GlobalModelUpdate, identifiers, uints, params, st.booleans())
dataset_updates = st.builds(LocalDataSetUpdate, uints, st.none() | metadata)
local_updates = st.builds(LocalModelUpdate, identifiers, uints, params, metadata)
any_message = st.one_of(global_updates, dataset_updates, local_updates)


# plain random generators for the bulk round-trip suites

def rand_uint(rng: random.Random) -> int:
    bits = rng.choice([4, 8, 16, 32, 64])
    return rng.getrandbits(bits)


def rand_finite(rng: random.Random) -> float:
    pick = rng.random()
    if pick < 0.3:
        return float(rng.randint(-1024, 1024)) / rng.choice([1, 2, 8, 256])
    if pick < 0.6:
        return struct.unpack("<f", struct.pack("<f", rng.uniform(-1e4, 1e4)))[0]
    if pick < 0.9:
        return rng.uniform(-1.0, 1.0)
    while True:
        x = struct.unpack("<d", rng.getrandbits(64).to_bytes(8, "little"))[0]
        if math.isfinite(x):
            return x


def rand_params(rng: random.Random) -> ModelParams:
    n = rng.randint(0, 16)
    return ModelParams([rand_finite(rng) for _ in range(n)])


def rand_single_params(rng: random.Random) -> ModelParams:
    """Values inside binary32 range so Protobuf quantization stays finite."""
    n = rng.randint(0, 16)
    return ModelParams([rng.uniform(-1e6, 1e6) for _ in range(n)])


def rand_metadata(rng: random.Random) -> ModelMetadata:
    return ModelMetadata(rand_finite(rng), rand_finite(rng))


def rand_global(rng, single=False) -> GlobalModelUpdate:
    p = rand_single_params(rng) if single else rand_params(rng)
    return GlobalModelUpdate(ModelIdentifier(rng.randbytes(16)), rand_uint(rng), p, rng.random() < 0.5)


def rand_dataset(rng, single=False) -> LocalDataSetUpdate:
    meta = rand_metadata(rng) if rng.random() < 0.8 else None
    return LocalDataSetUpdate(rand_uint(rng), meta)


def rand_local(rng, single=False) -> LocalModelUpdate:
    p = rand_single_params(rng) if single else rand_params(rng)
    return LocalModelUpdate(ModelIdentifier(rng.randbytes(16)), rand_uint(rng), p, rand_metadata(rng))


GENERATORS = {"global": rand_global, "dataset": rand_dataset, "local": rand_local}

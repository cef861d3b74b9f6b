"""Exit criteria. Each test carries a ``criterion`` marker; the pass/fail
line for every criterion is printed in the pytest terminal summary."""

import csv
import io
import json
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tinyfl import altcodec, cbor, flsim, messages
from tinyfl.benchmark import cbor_json_ratio, frame_count, run_table2
from tinyfl.cbor import COMPACT, VERBOSE, Bytes, Text, Uint, decode_value, encode_value
from tinyfl.cli import main
from tinyfl.flsim import OrchestrationConfig, Simulation, mse_grad, mse_loss
from tinyfl.messages import LocalDataSetUpdate, ModelMetadata

from strategies import GENERATORS, finite, uints

VECTORS = Path(__file__).parent / "data" / "cbor_vectors.txt"

# message, model size -> (CBOR best, CBOR worst, Protobuf, JSON), as printed in the paper
TABLE1 = {
    ("FL_Local_DataSet_Update", None): (8, 28, 22, 11),
    ("FL_Global_Model_Update", 4): (33, 67, 40, 65),
    ("FL_Global_Model_Update", 1000): (2027, 9033, 4025, 4049),
    ("FL_Global_Model_Update", 10000): (20025, 90033, 40026, 40049),
    ("FL_Local_Model_Update", 4): (38, 84, 58, 68),
    ("FL_Local_Model_Update", 1000): (2032, 9050, 4043, 4052),
    ("FL_Local_Model_Update", 10000): (20032, 90050, 40044, 40052),
}
COLUMNS = (("cbor", "compact"), ("cbor", "verbose"), ("pb", ""), ("json", ""))
# the one cell where layout arithmetic gives 20027
TOLERANCE = {("FL_Global_Model_Update", 10000, "cbor", "compact"): 2}

TABLE2 = {  # message -> (CBOR, Protobuf)
    "FL_Global_Model_Update": (177733, 177730),
    "FL_Local_Model_Update": (177738, 177748),
}


@pytest.mark.criterion("AC1 Table 1 reproduced (all cells; +/-2 on Global/10000/CBOR-Best), < 1 s")
def test_ac1_table1(capsys):
    start = time.perf_counter()
    code = main(["bench", "--table", "1", "--format", "csv"])
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    got = {(r["message"], int(r["model_size"]) if r["model_size"] else None, r["codec"], r["profile"]):
           int(r["bytes"]) for r in rows}
    checked = 0
    for (message, size), cells in TABLE1.items():
        for (codec, profile), expected in zip(COLUMNS, cells):
            tol = TOLERANCE.get((message, size, codec, profile), 0)
            assert abs(got[(message, size, codec, profile)] - expected) <= tol, (message, size, codec)
            checked += 1
    assert checked == len(rows) == 28
    assert got[("FL_Global_Model_Update", 10000, "cbor", "compact")] == 20027
    # compact CBOR never exceeds minified JSON
    for message, size in TABLE1:
        assert got[(message, size, "cbor", "compact")] <= got[(message, size, "json", "")]
    assert elapsed < 1.0


@pytest.mark.criterion("AC2 Table 2: CBOR 177733/177738, Protobuf 177730/177748, CBOR/JSON < 0.25, < 1 s")
def test_ac2_table2():
    start = time.perf_counter()
    report = run_table2(seed=7)
    elapsed = time.perf_counter() - start
    for message, (cbor_size, pb_size) in TABLE2.items():
        assert report.cell(message, "cbor", "compact", 44426).bytes == cbor_size
        assert report.cell(message, "pb", "", 44426).bytes == pb_size
        assert cbor_json_ratio(report, message) < 0.25
    assert elapsed < 1.0


@pytest.mark.criterion("AC3 dataset update always fits one 127-octet frame")
@settings(max_examples=2000, deadline=None)
@given(uints, st.none() | st.tuples(finite, finite), st.sampled_from([COMPACT, VERBOSE]))
def test_ac3_dataset_single_frame(size, losses, profile):
    meta = ModelMetadata(*losses) if losses else None
    data = messages.encode(LocalDataSetUpdate(size, meta), profile)
    assert len(data) <= 28 <= 127
    assert frame_count(len(data)) == 1


def _round_trip_suite(n=10000, seed=1234):
    rng = random.Random(seed)
    compact_le_verbose = True
    for kind, gen in GENERATORS.items():
        for _ in range(n):
            m = gen(rng)
            c, v = messages.encode(m, COMPACT), messages.encode(m, VERBOSE)
            assert messages.decode(c, kind) == m
            assert messages.decode(v, kind) == m
            compact_le_verbose &= len(c) <= len(v)
            assert altcodec.json_decode(altcodec.json_encode(m), kind) == m
            ms = gen(rng, single=True) if kind != "dataset" else m
            back = altcodec.pb_decode(altcodec.pb_encode(ms), kind)
            if kind == "dataset":
                assert back == ms
            else:
                assert back.model_params.values == tuple(altcodec.quantize_f32(ms.model_params.values))
                assert back.model_identifier == ms.model_identifier
                assert back.model_round == ms.model_round
                assert getattr(back, "metadata", None) == getattr(ms, "metadata", None)
                assert getattr(back, "continue_training", None) == getattr(ms, "continue_training", None)
    return compact_le_verbose


@pytest.mark.criterion("AC4 10 000 random instances per message type per codec round-trip, < 10 s")
def test_ac4_round_trips():
    start = time.perf_counter()
    _round_trip_suite()
    assert time.perf_counter() - start < 10.0


def _band(n):
    return 1 if n < 24 else 2 if n < 256 else 3 if n < 65536 else 5 if n < 2**32 else 9


@pytest.mark.criterion("AC5 compact heads minimal over 10 000 values in all five bands; compact <= verbose")
def test_ac5_canonical_heads():
    rng = random.Random(99)
    bands = [(0, 23), (24, 255), (256, 65535), (65536, 2**32 - 1), (2**32, 2**64 - 1)]
    for i in range(10000):
        lo, hi = bands[i % 5]
        n = rng.randint(lo, hi)
        assert len(encode_value(Uint(n), COMPACT)) == _band(n)
        assert cbor.head_length(n) == _band(n)
        assert len(cbor.head(cbor.BYTE_STRING, n)) == _band(n)
    for i in range(2000):
        lo, hi = bands[i % 3]
        n = rng.randint(lo, min(hi, 70000))
        assert len(encode_value(Bytes(bytes(n)), COMPACT)) == _band(n) + n
        assert len(encode_value(Text("a" * n), COMPACT)) == _band(n) + n
    assert _round_trip_suite(n=2000, seed=5)


@pytest.mark.criterion("AC6 1 000 committed conformance vectors decode identically")
def test_ac6_conformance_vectors():
    lines = VECTORS.read_text().splitlines()
    assert len(lines) == 1000
    for line in lines:
        hexdata, diag = line.split(" ", 1)
        data = bytes.fromhex(hexdata)
        value, consumed = decode_value(data)
        assert consumed == len(data)
        assert cbor.diagnostic(value) == diag


def _check_simulation(cfg):
    sim = Simulation(cfg)
    reports = sim.run()
    for r in reports:
        trace = [t for t in sim.trace if t["index"] == r.index]
        halts = [t for t in trace if t["kind"] == "halt"]
        assert r.bytes_down == cfg.num_clients * r.global_size + sum(t["bytes"] for t in halts)
        if r.status != "ok":
            continue
        assert abs(sum(r.weights) - 1.0) <= 1e-12
        globals_ = [messages.decode_global(bytes.fromhex(t["hex"])) for t in trace if t["kind"] == "global"]
        ident, rnd = globals_[0].model_identifier, globals_[0].model_round
        inputs = []
        for t in trace:
            if t["kind"] == "local" and t["delivered"]:
                update = messages.decode_local_model(bytes.fromhex(t["hex"]))
                if t["client"] not in r.echo_mismatches:
                    assert update.model_identifier == ident and update.model_round == rnd
                    inputs.append(update.model_params.values)
        stack = np.array(inputs)
        agg = np.array(r.aggregated)
        assert np.all(agg >= stack.min(axis=0)) and np.all(agg <= stack.max(axis=0))
    return flsim.report_json(cfg, reports)


@pytest.mark.criterion("AC7 simulation invariants for seeds 1..10, 4-16 clients, 1-5 rounds, < 30 s")
def test_ac7_simulation_invariants():
    start = time.perf_counter()
    for seed in range(1, 11):
        cfg = OrchestrationConfig(num_clients=4 + (seed * 5) % 13, rounds=1 + seed % 5,
                                  min_fraction=0.5, param_count=[4, 100, 1000][seed % 3],
                                  seed=seed, profile=[COMPACT, VERBOSE][seed % 2])
        assert _check_simulation(cfg) == _check_simulation(cfg)
    assert time.perf_counter() - start < 30.0


@pytest.mark.criterion("AC8 gradient vs finite differences, monotone clean loss, halt rule stops training")
def test_ac8_learner():
    rng = np.random.default_rng(8)
    for _ in range(20):
        x, y, w = rng.normal(size=(25, 8)), rng.normal(size=25), rng.normal(size=8)
        numeric = np.zeros(8)
        for i in range(8):
            e = np.zeros(8)
            e[i] = 1e-6
            numeric[i] = (mse_loss(w + e, x, y) - mse_loss(w - e, x, y)) / 2e-6
        rel = np.linalg.norm(mse_grad(w, x, y) - numeric) / np.linalg.norm(numeric)
        assert rel < 1e-6

    w_true = rng.normal(size=8)
    x = rng.normal(size=(50, 8)) / math.sqrt(8)
    y = x @ w_true
    client = flsim.ClientState(0, x[:40], y[:40], x[40:], y[40:], np.zeros(8))
    client = flsim.start_training(client, np.zeros(8))
    losses = [client.train_loss]
    for _ in range(25):
        client = flsim.train_epoch(client, 0.1, 8)
        losses.append(client.train_loss)
    assert all(b <= a for a, b in zip(losses, losses[1:]))

    assert flsim.check_stop(flsim.ClientState(0, x, y, x, y, w_true, train_loss=0.2, val_loss=0.1))
    halted = flsim.ClientState(0, x, y, x, y, np.zeros(8), halted=True)
    assert flsim.train_epoch(halted, 0.1, 8).model.tolist() == [0.0] * 8

    cfg = OrchestrationConfig(num_clients=8, rounds=3, seed=1, local_epochs=6, min_dataset_size=20)
    sim = Simulation(cfg)
    sim.run()
    halts = [t for t in sim.trace if t["kind"] == "halt"]
    assert halts
    for h in halts:
        after = sim.trace[sim.trace.index(h) + 1:]
        assert not [t for t in after if t["index"] == h["index"] and t["client"] == h["client"]
                    and t["kind"] == "dataset"]

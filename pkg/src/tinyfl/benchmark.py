"""Message size benchmark: CBOR (compact/verbose) vs Protobuf vs JSON.

Every size in a report is the length of real encoder output. Expected
sizes ship in ``data/expected_sizes.csv``; a blank tolerance marks a
value-dependent cell that is reported but not checked.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import List, Optional

import numpy as np

from . import altcodec, messages
from .cbor import COMPACT, VERBOSE, EncodingProfile
from .messages import (GlobalModelUpdate, LocalDataSetUpdate, LocalModelUpdate,
                       ModelIdentifier, ModelMetadata, ModelParams)

FRAME_BUDGET = 127
BLOCK_SIZE = 64
TABLE1_MODEL_SIZES = (4, 1000, 10000)
LENET_PARAM_COUNT = 44426

BENCH_UUID = ModelIdentifier(bytes.fromhex("6f1c2a3e5b7d4c8e9f0a1b2c3d4e5f60"))
BENCH_ROUND = 1

CODECS = (("cbor", "compact"), ("cbor", "verbose"), ("pb", ""), ("json", ""))


def frame_count(payload_octets: int, frame_budget: int = FRAME_BUDGET,
                block_size: int = BLOCK_SIZE) -> int:
    """Link transmissions needed for a payload: one if it fits the frame
    budget, otherwise one per block of a blockwise transfer."""
    if block_size <= 0:
        raise ValueError("invalid-config: block_size must be positive")
    if block_size > frame_budget:
        raise ValueError("invalid-config: block_size exceeds frame_budget")
    if payload_octets < 0:
        raise ValueError("payload size must be non-negative")
    if payload_octets <= frame_budget:
        return 1
    return math.ceil(payload_octets / block_size)


@dataclass(frozen=True)
class SyntheticModel:
    param_count: int
    fill_value: float = 1.0

    def params(self) -> ModelParams:
        return ModelParams([self.fill_value] * self.param_count)


@dataclass(frozen=True)
class LeNetStandIn:
    """Random binary32 weights with the parameter count implied by the
    LeNet-5 message sizes. Losses are half-float exact."""

    seed: int = 0
    param_count: int = LENET_PARAM_COUNT
    train_loss: float = 0.5
    val_loss: float = 0.25

    def values(self) -> list:
        rng = np.random.default_rng(self.seed)
        weights = rng.uniform(-1.0, 1.0, self.param_count).astype(np.float32)
        return weights.astype(np.float64).tolist()

    def params(self) -> ModelParams:
        return ModelParams(self.values())


@dataclass
class SizeRow:
    message: str
    model_size: Optional[int]
    codec: str
    profile: str
    bytes: int
    frames: int
    expected: Optional[int] = None
    tolerance: Optional[int] = None

    @property
    def checked(self) -> bool:
        return self.expected is not None and self.tolerance is not None

    @property
    def ok(self) -> bool:
        return not self.checked or abs(self.bytes - self.expected) <= self.tolerance


@dataclass
class SizeReport:
    table: int
    rows: List[SizeRow] = field(default_factory=list)

    def mismatches(self) -> List[SizeRow]:
        return [r for r in self.rows if not r.ok]

    @property
    def ok(self) -> bool:
        return not self.mismatches()

    def cell(self, message: str, codec: str, profile: str = "",
             model_size: Optional[int] = None) -> SizeRow:
        for r in self.rows:
            if (r.message, r.codec, r.profile, r.model_size) == (message, codec, profile, model_size):
                return r
        raise KeyError((message, model_size, codec, profile))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["message", "model_size", "codec", "profile", "bytes", "frames"])
        for r in self.rows:
            w.writerow([r.message, "" if r.model_size is None else r.model_size,
                        r.codec, r.profile, r.bytes, r.frames])
        return buf.getvalue()

    def to_text(self) -> str:
        return _table1_text(self) if self.table == 1 else _table2_text(self)

    def diff(self) -> str:
        lines = []
        for r in self.mismatches():
            lines.append(f"{r.message} {r.model_size or '-'} {r.codec} {r.profile or '-'}: "
                         f"got {r.bytes}, expected {r.expected} (+/-{r.tolerance})")
        return "\n".join(lines)


def load_expected() -> dict:
    """Map (table, message, model_size, codec, profile) -> (bytes, tolerance)."""
    text = resources.files("tinyfl").joinpath("data/expected_sizes.csv").read_text()
    out = {}
    for rec in csv.DictReader(io.StringIO(text)):
        size = int(rec["model_size"]) if rec["model_size"] else None
        tol = int(rec["tolerance"]) if rec["tolerance"] else None
        key = (int(rec["table"]), rec["message"], size, rec["codec"], rec["profile"])
        out[key] = (int(rec["bytes"]), tol)
    return out


def encode_with(m, codec: str, profile: str = "") -> bytes:
    if codec == "cbor":
        return messages.encode(m, EncodingProfile(profile or "compact"))
    if codec == "pb":
        return altcodec.pb_encode(m)
    if codec == "json":
        return altcodec.json_encode(m).encode("utf-8")
    raise ValueError(f"unknown codec {codec!r}")


def _add(report: SizeReport, expected: dict, m, model_size, codecs) -> None:
    name = messages.MESSAGE_NAMES[type(m)]
    for codec, profile in codecs:
        n = len(encode_with(m, codec, profile))
        exp, tol = expected.get((report.table, name, model_size, codec, profile), (None, None))
        report.rows.append(SizeRow(name, model_size, codec, profile, n, frame_count(n), exp, tol))


def run_table1() -> SizeReport:
    expected = load_expected()
    report = SizeReport(1)
    losses = ModelMetadata(1.0, 1.0)
    _add(report, expected, LocalDataSetUpdate(1, losses), None, CODECS)
    for n in TABLE1_MODEL_SIZES:
        params = SyntheticModel(n).params()
        _add(report, expected, GlobalModelUpdate(BENCH_UUID, BENCH_ROUND, params, True), n, CODECS)
    for n in TABLE1_MODEL_SIZES:
        params = SyntheticModel(n).params()
        _add(report, expected, LocalModelUpdate(BENCH_UUID, BENCH_ROUND, params, losses), n, CODECS)
    return report


def run_table2(seed: int = 0) -> SizeReport:
    expected = load_expected()
    report = SizeReport(2)
    lenet = LeNetStandIn(seed)
    params = lenet.params()
    codecs = (("cbor", "compact"), ("pb", ""), ("json", ""))
    losses = ModelMetadata(lenet.train_loss, lenet.val_loss)
    _add(report, expected, GlobalModelUpdate(BENCH_UUID, BENCH_ROUND, params, True),
         lenet.param_count, codecs)
    _add(report, expected, LocalModelUpdate(BENCH_UUID, BENCH_ROUND, params, losses),
         lenet.param_count, codecs)
    return report


def cbor_json_ratio(report: SizeReport, message: str) -> float:
    rows = {r.codec: r for r in report.rows if r.message == message and r.profile in ("", "compact")}
    return rows["cbor"].bytes / rows["json"].bytes


def _fmt(n: int) -> str:
    return f"{n} B"


def _table1_text(report: SizeReport) -> str:
    header = ["Message", "Model Size", "CBOR Best", "CBOR Worst", "Protobuf", "JSON"]
    order = [("cbor", "compact"), ("cbor", "verbose"), ("pb", ""), ("json", "")]
    body = []
    keys = []
    for r in report.rows:
        k = (r.message, r.model_size)
        if k not in keys:
            keys.append(k)
    for message, size in keys:
        cells = [_fmt(report.cell(message, c, p, size).bytes) for c, p in order]
        body.append([message, "" if size is None else str(size)] + cells)
    return _align(header, body, report)


def _table2_text(report: SizeReport) -> str:
    header = ["Message", "CBOR", "ProtoBuf", "JSON", "CBOR/JSON"]
    body = []
    for message in ("FL_Global_Model_Update", "FL_Local_Model_Update"):
        size = LENET_PARAM_COUNT
        cells = [_fmt(report.cell(message, c, p, size).bytes)
                 for c, p in (("cbor", "compact"), ("pb", ""), ("json", ""))]
        body.append([message] + cells + [f"{cbor_json_ratio(report, message):.3f}"])
    return _align(header, body, report)


def _align(header, body, report) -> str:
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = []
    for row in [header] + body:
        parts = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(parts))
    lines.insert(1, "  ".join("-" * w for w in widths))
    status = "all checked cells match" if report.ok else f"{len(report.mismatches())} mismatching cells"
    lines.append("")
    lines.append(f"Table {report.table}: {status}")
    return "\n".join(lines)

"""Command-line interface: ``tinyfl encode|decode|bench|simulate``.

Exit codes:
  0  success
  2  invalid arguments or configuration
  3  unreadable input file
  4  malformed message (truncated input, schema mismatch, parse error)
  5  benchmark cells differ from the expected sizes
  6  simulation: insufficient clients in every round
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import altcodec, benchmark, flsim, messages
from .cbor import CborError, EncodingProfile
from .messages import (GlobalModelUpdate, LocalDataSetUpdate, LocalModelUpdate,
                       ModelIdentifier, ModelMetadata, ModelParams)

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_MALFORMED = 4
EXIT_MISMATCH = 5
EXIT_INSUFFICIENT = 6

RAW_SUFFIXES = {".f32", ".bin", ".raw"}
EXTENSIONS = {"cbor": "cbor", "json": "json", "pb": "pb"}


class InputError(Exception):
    pass


def read_params(path: str) -> list:
    """Text files hold one decimal per line; ``.f32``/``.bin``/``.raw``
    files hold little-endian binary32 values."""
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    if p.suffix.lower() in RAW_SUFFIXES:
        if len(data) % 4:
            raise InputError(f"{path}: length {len(data)} is not a multiple of 4")
        return np.frombuffer(data, dtype="<f4").astype(np.float64).tolist()
    try:
        lines = data.decode("utf-8").split()
        return [float(tok) for tok in lines]
    except (UnicodeDecodeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _build_message(args, parser):
    if args.kind == "dataset":
        if args.size is None:
            parser.error("--size is required for --kind dataset")
        meta = None
        if (args.train_loss is None) != (args.val_loss is None):
            parser.error("--train-loss and --val-loss must be given together")
        if args.train_loss is not None:
            meta = ModelMetadata(args.train_loss, args.val_loss)
        return LocalDataSetUpdate(args.size, meta)

    if args.uuid is None:
        parser.error(f"--uuid is required for --kind {args.kind}")
    if args.params is None:
        parser.error(f"--params is required for --kind {args.kind}")
    try:
        ident = ModelIdentifier.parse(args.uuid)
    except ValueError:
        parser.error(f"invalid --uuid {args.uuid!r}")
    params = ModelParams(read_params(args.params))
    if args.kind == "global":
        return GlobalModelUpdate(ident, args.round, params, args.continue_training)
    if args.train_loss is None or args.val_loss is None:
        parser.error("--train-loss and --val-loss are required for --kind local")
    return LocalModelUpdate(ident, args.round, params, ModelMetadata(args.train_loss, args.val_loss))


def cmd_encode(args, parser) -> int:
    if args.profile is not None and args.codec != "cbor":
        parser.error("--profile applies to --codec cbor only")
    m = _build_message(args, parser)
    data = benchmark.encode_with(m, args.codec, args.profile or "compact")
    out = args.output or f"{args.kind}.{EXTENSIONS[args.codec]}"
    Path(out).write_bytes(data)
    print(f"{len(data)} {benchmark.frame_count(len(data))}")
    return 0


def decode_bytes(data: bytes, codec: str, kind=None):
    if codec == "cbor":
        return messages.decode(data, kind)
    if codec == "json":
        if kind is None:
            kind = _json_kind(data)
        return altcodec.json_decode(data, kind)
    return altcodec.pb_decode(data, kind)


def _json_kind(data: bytes) -> str:
    try:
        tree = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise altcodec.DecodeError(str(exc), getattr(exc, "pos", 0)) from None
    if isinstance(tree, list) and len(tree) == 4:
        return "global"
    if isinstance(tree, list) and len(tree) == 5:
        return "local"
    return "dataset"


def cmd_decode(args, parser) -> int:
    if args.codec == "pb" and args.kind is None:
        parser.error("--kind is required for --codec pb")
    try:
        data = Path(args.file).read_bytes()
    except OSError as exc:
        print(f"error: cannot read {args.file}: {exc.strerror}", file=sys.stderr)
        return EXIT_INPUT
    try:
        m = decode_bytes(data, args.codec, args.kind)
    except (CborError, messages.SchemaMismatch, altcodec.DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    print(f"message: {messages.MESSAGE_NAMES[type(m)]}")
    print(messages.describe(m))
    return 0


def cmd_bench(args, parser) -> int:
    report = benchmark.run_table1() if args.table == 1 else benchmark.run_table2(args.seed)
    if args.format == "csv":
        sys.stdout.write(report.to_csv())
    else:
        print(report.to_text())
    if not report.ok:
        print(report.diff(), file=sys.stderr)
        return EXIT_MISMATCH
    return 0


SIM_FLAGS = {
    "clients": "num_clients",
    "min_fraction": "min_fraction",
    "rounds": "rounds",
    "min_dataset_size": "min_dataset_size",
    "params": "param_count",
    "seed": "seed",
    "profile": "profile",
    "epochs": "local_epochs",
    "learning_rate": "learning_rate",
    "batch_size": "batch_size",
    "drop_rate": "drop_rate",
    "multicast": "multicast",
}


def cmd_simulate(args, parser) -> int:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            print(f"error: cannot read {args.config}: {exc.strerror}", file=sys.stderr)
            return EXIT_INPUT
        except ValueError as exc:
            parser.error(f"invalid config file: {exc}")
        if not isinstance(base, dict):
            parser.error("config file must hold a JSON object")
    for flag, key in SIM_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            base[key] = value
    try:
        cfg = flsim.OrchestrationConfig.from_dict(base).validate()
    except flsim.ConfigError as exc:
        parser.error(str(exc))

    sim = flsim.Simulation(cfg)
    rounds = sim.run()
    for r in rounds:
        print(f"round {r.index}: down {r.bytes_down}B/{r.frames_down}f "
              f"up {r.bytes_up}B/{r.frames_up}f selected {len(r.selected)} halted {len(r.halted)}")
    Path(args.output).write_text(flsim.report_json(cfg, rounds))
    if args.trace:
        Path(args.trace).write_text("".join(
            f"{t['index']} {t['direction']} {t['kind']} {t['client']} "
            f"{'delivered' if t['delivered'] else 'dropped'} {t['hex']}\n" for t in sim.trace))
    if rounds and all(r.status == flsim.InsufficientClients.code for r in rounds):
        print("error: insufficient-clients in every round", file=sys.stderr)
        return EXIT_INSUFFICIENT
    return 0


def _bool_flag(parser, name, dest, help):
    parser.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinyfl", description="TinyFL message tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="encode one message and print '<bytes> <frames>'")
    enc.add_argument("--kind", required=True, choices=["global", "dataset", "local"])
    enc.add_argument("--codec", required=True, choices=["cbor", "json", "pb"])
    enc.add_argument("--profile", choices=["compact", "verbose"],
                     help="CBOR encoding profile (default compact)")
    enc.add_argument("--uuid", help="model identifier, 32 hex digits or hyphenated")
    enc.add_argument("--round", type=int, default=0, help="model round (default 0)")
    enc.add_argument("--params", help="parameter file (text, or .f32/.bin/.raw binary32)")
    enc.add_argument("--continue", dest="continue_training", action="store_true",
                     help="set continue-training (global only)")
    enc.add_argument("--size", type=int, help="local dataset size (dataset only)")
    enc.add_argument("--train-loss", type=float)
    enc.add_argument("--val-loss", type=float)
    enc.add_argument("--output", "-o", help="output file (default <kind>.<codec>)")
    enc.set_defaults(func=cmd_encode, parser=enc)

    dec = sub.add_parser("decode", help="print the fields of an encoded message")
    dec.add_argument("--codec", required=True, choices=["cbor", "json", "pb"])
    dec.add_argument("--kind", choices=["global", "dataset", "local"],
                     help="message type (inferred for cbor and json)")
    dec.add_argument("file")
    dec.set_defaults(func=cmd_decode, parser=dec)

    bench = sub.add_parser("bench", help="reproduce the message size tables")
    bench.add_argument("--table", type=int, required=True, choices=[1, 2])
    bench.add_argument("--format", choices=["csv", "text"], default="text")
    bench.add_argument("--seed", type=int, default=0, help="seed for the table 2 model")
    bench.set_defaults(func=cmd_bench, parser=bench)

    sim = sub.add_parser("simulate", help="run the FL round simulator")
    sim.add_argument("--config", help="JSON config (the report's 'config' block)")
    sim.add_argument("--clients", type=int)
    sim.add_argument("--min-fraction", type=float)
    sim.add_argument("--rounds", type=int)
    sim.add_argument("--min-dataset-size", type=int)
    sim.add_argument("--params", type=int, help="model parameter count")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--profile", choices=["compact", "verbose"])
    sim.add_argument("--epochs", type=int)
    sim.add_argument("--learning-rate", type=float)
    sim.add_argument("--batch-size", type=int)
    sim.add_argument("--drop-rate", type=float)
    _bool_flag(sim, "multicast", "multicast", "count the global model once per round")
    sim.add_argument("--output", "-o", default="report.json")
    sim.add_argument("--trace", help="write a per-message hex trace")
    sim.set_defaults(func=cmd_simulate, parser=sim)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, args.parser)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

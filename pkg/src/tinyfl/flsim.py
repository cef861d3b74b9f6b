"""Deterministic federated-learning round simulator.

A server and a set of clients exchange the three TinyFL messages over a
simulated constrained link. Every message is encoded and decoded with
the real codecs; the link only counts octets and frames (and can drop
messages when ``drop_rate`` > 0).

Per round:

1. the server POSTs a ``GlobalModelUpdate`` (continue_training true) to
   every client and registers an observe request right after delivery;
2. clients train epoch by epoch; once ``samples_seen`` reaches the
   threshold each finished epoch triggers a ``LocalDataSetUpdate``
   notification;
3. the server halts a client whose validation loss drops below its
   training loss by sending the global model with continue_training
   false;
4. as soon as enough distinct clients have notified, the earliest
   notifiers are selected and asked for their ``LocalModelUpdate``;
5. echoed identifier and round are verified, the accepted models are
   averaged (FedAvg) and the round number advances.

Client-side timing comes from a per-client processing speed, so the
notification arrival order is a property of the seeded scenario.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import messages
from .benchmark import BLOCK_SIZE, FRAME_BUDGET, frame_count
from .cbor import COMPACT, EncodingProfile
from .messages import (GlobalModelUpdate, LocalDataSetUpdate, LocalModelUpdate,
                       ModelIdentifier, ModelMetadata, ModelParams)

DOWN = "down"
UP = "up"


class SimulationError(Exception):
    code = "simulation-error"


class InsufficientClients(SimulationError):
    code = "insufficient-clients"


class ConfigError(ValueError):
    code = "invalid-config"


@dataclass
class OrchestrationConfig:
    num_clients: int = 4
    min_fraction: float = 0.5
    rounds: int = 3
    min_dataset_size: int = 64
    param_count: int = 4
    seed: int = 0
    profile: EncodingProfile = COMPACT
    local_epochs: int = 3
    learning_rate: float = 0.1
    batch_size: int = 8
    min_samples: int = 20
    max_samples: int = 100
    noise: float = 0.2
    multicast: bool = False
    drop_rate: float = 0.0
    frame_budget: int = FRAME_BUDGET
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if not isinstance(self.profile, EncodingProfile):
            self.profile = EncodingProfile(self.profile)

    @property
    def required_clients(self) -> int:
        return math.ceil(self.min_fraction * self.num_clients)

    def validate(self) -> "OrchestrationConfig":
        problems = []
        if self.num_clients < 1:
            problems.append("num_clients must be >= 1")
        if not 0 < self.min_fraction <= 1:
            problems.append("min_fraction must be in (0, 1]")
        if self.rounds < 0:
            problems.append("rounds must be >= 0")
        if self.min_dataset_size < 0:
            problems.append("min_dataset_size must be >= 0")
        if self.param_count < 0:
            problems.append("param_count must be >= 0")
        if self.local_epochs < 1:
            problems.append("local_epochs must be >= 1")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be positive")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 5 <= self.min_samples <= self.max_samples:
            problems.append("need 5 <= min_samples <= max_samples")
        if self.noise < 0:
            problems.append("noise must be >= 0")
        if not 0 <= self.drop_rate < 1:
            problems.append("drop_rate must be in [0, 1)")
        if not 0 < self.block_size <= self.frame_budget:
            problems.append("need 0 < block_size <= frame_budget")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile"] = self.profile.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OrchestrationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


# -- local learner ------------------------------------------------------------

def mse_loss(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    r = x @ w - y
    return float(np.mean(r * r))


def mse_grad(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if len(y) == 0:
        return np.zeros_like(w)
    return 2.0 / len(y) * (x.T @ (x @ w - y))


@dataclass
class ClientState:
    id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    model: np.ndarray
    speed: float = 1.0
    samples_seen: int = 0
    train_loss: float = math.nan
    val_loss: float = math.nan
    halted: bool = False
    # identity of the last global model received; echoed back to the server
    model_identifier: Optional[ModelIdentifier] = None
    model_round: Optional[int] = None

    @property
    def dataset_size(self) -> int:
        return len(self.y_train) + len(self.y_val)

    def evaluate(self) -> "ClientState":
        return replace(self, train_loss=mse_loss(self.model, self.x_train, self.y_train),
                       val_loss=mse_loss(self.model, self.x_val, self.y_val))


def start_training(client: ClientState, global_model: Sequence[float]) -> ClientState:
    """Reset the client to the global model and evaluate it."""
    model = np.array(global_model, dtype=np.float64)
    return replace(client, model=model, samples_seen=0, halted=False).evaluate()


def train_epoch(client: ClientState, lr: float, batch_size: Optional[int] = None) -> ClientState:
    """One pass of sequential mini-batch gradient descent on the training
    set. Halted clients are returned unchanged."""
    if client.halted:
        return client
    n = len(client.y_train)
    step = n if not batch_size else batch_size
    w = client.model.copy()
    for lo in range(0, n, step):
        xb, yb = client.x_train[lo:lo + step], client.y_train[lo:lo + step]
        w -= lr * mse_grad(w, xb, yb)
    return replace(client, model=w, samples_seen=client.samples_seen + n).evaluate()


def local_train(client: ClientState, global_model: Sequence[float], epochs: int, lr: float,
                batch_size: Optional[int] = None) -> ClientState:
    client = start_training(client, global_model)
    for _ in range(epochs):
        client = train_epoch(client, lr, batch_size)
    return client


def check_stop(client: ClientState) -> bool:
    """The halt rule: validation loss strictly below training loss."""
    return client.val_loss < client.train_loss


# -- server side ---------------------------------------------------------------

def select_clients(arrivals: Sequence[int], cfg: OrchestrationConfig) -> List[int]:
    """First ``required_clients`` distinct ids in notification order.
    Callers order simultaneous arrivals by ascending id."""
    seen: List[int] = []
    for cid in arrivals:
        if cid not in seen:
            seen.append(cid)
    need = cfg.required_clients
    if len(seen) < need:
        raise InsufficientClients(f"{len(seen)} eligible clients, {need} required")
    return seen[:need]


def aggregation_weights(sizes: Sequence[int]) -> List[float]:
    if not sizes:
        raise ValueError("empty-input: no models to aggregate")
    if any(n <= 0 for n in sizes):
        raise ValueError("dataset sizes must be positive")
    total = sum(sizes)
    return [n / total for n in sizes]


def fedavg(models: Sequence[Sequence[float]], sizes: Sequence[int]) -> np.ndarray:
    """Dataset-size weighted average of parameter vectors."""
    if not models:
        raise ValueError("empty-input: no models to aggregate")
    if len(models) != len(sizes):
        raise ValueError("dimension-mismatch: one size per model required")
    stack = np.array([np.asarray(m, dtype=np.float64) for m in models]) \
        if len({len(m) for m in models}) == 1 else None
    if stack is None:
        raise ValueError("dimension-mismatch: model vectors differ in length")
    weights = np.asarray(aggregation_weights(sizes))
    avg = weights @ stack
    # keep the convex-combination bound under rounding
    return np.clip(avg, stack.min(axis=0), stack.max(axis=0))


def model_checksum(model: Sequence[float]) -> str:
    return hashlib.sha256(np.asarray(model, dtype="<f8").tobytes()).hexdigest()[:16]


# -- link ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrafficCounters:
    bytes_down: int = 0
    frames_down: int = 0
    bytes_up: int = 0
    frames_up: int = 0


def transport_deliver(payload: bytes, counters: TrafficCounters, direction: str = DOWN,
                      frame_budget: int = FRAME_BUDGET,
                      block_size: int = BLOCK_SIZE) -> TrafficCounters:
    n = len(payload)
    frames = frame_count(n, frame_budget, block_size)
    if direction == DOWN:
        return replace(counters, bytes_down=counters.bytes_down + n,
                       frames_down=counters.frames_down + frames)
    if direction == UP:
        return replace(counters, bytes_up=counters.bytes_up + n,
                       frames_up=counters.frames_up + frames)
    raise ValueError(f"unknown direction {direction!r}")


@dataclass
class RoundReport:
    index: int
    round: int
    status: str = "ok"
    bytes_down: int = 0
    frames_down: int = 0
    bytes_up: int = 0
    frames_up: int = 0
    global_size: int = 0
    message_counts: Dict[str, int] = field(default_factory=dict)
    clients: List[dict] = field(default_factory=list)
    notifications: List[int] = field(default_factory=list)
    selected: List[int] = field(default_factory=list)
    weights: List[float] = field(default_factory=list)
    echo_mismatches: List[int] = field(default_factory=list)
    aggregated: List[float] = field(default_factory=list)
    checksum: str = ""

    @property
    def halted(self) -> List[int]:
        return [c["id"] for c in self.clients if c["halted"]]

    def to_dict(self) -> dict:
        return asdict(self)


class Simulation:
    """Owns all simulation state and the single seeded generator."""

    def __init__(self, cfg: OrchestrationConfig):
        self.cfg = cfg.validate()
        self.rng = np.random.default_rng(cfg.seed)
        p = cfg.param_count
        self.true_weights = self.rng.normal(size=p)
        self.clients = [self._make_client(i) for i in range(cfg.num_clients)]
        self.model_identifier = ModelIdentifier(self.rng.bytes(16))
        self.round = 1
        self.global_model = self.rng.normal(scale=0.1, size=p)
        self.trace: List[dict] = []

    def _make_client(self, cid: int) -> ClientState:
        cfg = self.cfg
        n = int(self.rng.integers(cfg.min_samples, cfg.max_samples + 1))
        # unit expected squared norm keeps the step size stable for any width
        x = self.rng.normal(size=(n, cfg.param_count)) / math.sqrt(max(cfg.param_count, 1))
        noise = self.rng.uniform(0.0, cfg.noise)
        y = x @ self.true_weights + noise * self.rng.normal(size=n)
        n_train = int(round(0.8 * n))
        return ClientState(
            id=cid, x_train=x[:n_train], y_train=y[:n_train], x_val=x[n_train:],
            y_val=y[n_train:], model=np.zeros(cfg.param_count),
            speed=float(self.rng.uniform(0.5, 2.0)))

    # transport
    def _send(self, report: RoundReport, direction: str, kind: str, cid: int,
              payload: bytes, counted: bool = True) -> bool:
        if counted:
            c = transport_deliver(payload, TrafficCounters(report.bytes_down, report.frames_down,
                                                           report.bytes_up, report.frames_up),
                                  direction, self.cfg.frame_budget, self.cfg.block_size)
            report.bytes_down, report.frames_down = c.bytes_down, c.frames_down
            report.bytes_up, report.frames_up = c.bytes_up, c.frames_up
            report.message_counts[kind] = report.message_counts.get(kind, 0) + 1
        delivered = not (self.cfg.drop_rate and self.rng.random() < self.cfg.drop_rate)
        self.trace.append({"index": report.index, "direction": direction, "kind": kind,
                           "client": cid, "bytes": len(payload), "counted": counted,
                           "delivered": delivered, "hex": payload.hex()})
        return delivered

    def _encode(self, m) -> bytes:
        data = messages.encode(m, self.cfg.profile)
        # every message must survive the round trip before it is used
        if messages.decode(data, type(m)) != m:
            raise SimulationError(f"{type(m).__name__} did not survive encode/decode")
        return data

    def make_local_update(self, client: ClientState) -> LocalModelUpdate:
        return LocalModelUpdate(client.model_identifier, client.model_round,
                                ModelParams(client.model.tolist()),
                                ModelMetadata(client.train_loss, client.val_loss))

    def _deliver_global(self, report: RoundReport, cid: int, data: bytes, counted: bool,
                        kind: str = "global") -> bool:
        if not self._send(report, DOWN, kind, cid, data, counted):
            return False
        m = messages.decode_global(data)
        client = self.clients[cid]
        client = replace(client, model_identifier=m.model_identifier, model_round=m.model_round)
        if m.continue_training:
            client = start_training(client, m.model_params.values)
        else:
            # inference-only: stop training, keep the local model for collection
            client = replace(client, halted=True)
        self.clients[cid] = client
        return True

    def run_round(self, index: int) -> RoundReport:
        cfg = self.cfg
        report = RoundReport(index=index, round=self.round)
        params = ModelParams(self.global_model.tolist())
        global_msg = GlobalModelUpdate(self.model_identifier, self.round, params, True)
        data = self._encode(global_msg)
        report.global_size = len(data)

        events = []
        for cid in range(cfg.num_clients):
            counted = not cfg.multicast or cid == 0
            # a client that missed the model has nothing to train this round
            if self._deliver_global(report, cid, data, counted):
                client = self.clients[cid]
                heapq.heappush(events, (client.y_train.size / client.speed, cid, 1))

        arrivals: List[int] = []
        sizes: Dict[int, int] = {}
        selected: List[int] = []
        while events:
            t, cid, epoch = heapq.heappop(events)
            client = self.clients[cid]
            if client.halted:
                continue
            client = train_epoch(client, cfg.learning_rate, cfg.batch_size)
            self.clients[cid] = client
            if epoch < cfg.local_epochs:
                heapq.heappush(events, (t + client.y_train.size / client.speed, cid, epoch + 1))
            if client.samples_seen < cfg.min_dataset_size:
                continue
            note = LocalDataSetUpdate(client.samples_seen,
                                      ModelMetadata(client.train_loss, client.val_loss))
            note_data = self._encode(note)
            if not self._send(report, UP, "dataset", cid, note_data):
                continue
            note = messages.decode_dataset_update(note_data)
            report.notifications.append(cid)
            arrivals.append(cid)
            sizes[cid] = note.local_dataset_size
            if note.metadata.val_loss < note.metadata.train_loss:
                halt = replace(global_msg, continue_training=False)
                self._deliver_global(report, cid, self._encode(halt), True, kind="halt")
            if len(set(arrivals)) >= cfg.required_clients:
                selected = select_clients(arrivals, cfg)
                break

        if not selected:
            report.status = InsufficientClients.code
            self._finish(report)
            return report
        report.selected = selected

        models, weights_n = [], []
        for cid in selected:
            client = self.clients[cid]
            reply = self._encode(self.make_local_update(client))
            if not self._send(report, UP, "local", cid, reply):
                continue
            update = messages.decode_local_model(reply)
            if (update.model_identifier != self.model_identifier
                    or update.model_round != self.round):
                report.echo_mismatches.append(cid)
                continue
            models.append(update.model_params.values)
            weights_n.append(sizes[cid])

        if not models:
            report.status = "no-valid-updates"
            self._finish(report)
            return report
        report.weights = aggregation_weights(weights_n)
        self.global_model = fedavg(models, weights_n)
        self.round += 1
        self._finish(report)
        return report

    def _finish(self, report: RoundReport) -> None:
        report.clients = [{
            "id": c.id,
            "dataset_size": c.dataset_size,
            "samples_seen": c.samples_seen,
            "train_loss": None if math.isnan(c.train_loss) else c.train_loss,
            "val_loss": None if math.isnan(c.val_loss) else c.val_loss,
            "halted": c.halted,
        } for c in self.clients]
        report.aggregated = self.global_model.tolist()
        report.checksum = model_checksum(self.global_model)

    def run(self) -> List[RoundReport]:
        return [self.run_round(i) for i in range(1, self.cfg.rounds + 1)]


def run_simulation(cfg: OrchestrationConfig) -> List[RoundReport]:
    return Simulation(cfg).run()


NOTES = {
    "global_accounting": "unicast: one GlobalModelUpdate per client per round unless multicast",
    "halt_messages": "halted clients receive the round's global model with continue_training=false;"
                     " counted in bytes_down as 'halt'",
    "halt_scope": "halting lasts for the rest of the round; every client receives the next global model",
    "payload_only": "only message payloads are counted; CoAP requests and headers are not modelled",
    "observe": "observe registration follows model delivery; threshold is carried out of band",
}


def report_document(cfg: OrchestrationConfig, rounds: List[RoundReport]) -> dict:
    return {"config": cfg.to_dict(), "rounds": [r.to_dict() for r in rounds], "notes": NOTES}


def report_json(cfg: OrchestrationConfig, rounds: List[RoundReport]) -> str:
    return json.dumps(report_document(cfg, rounds), indent=2, sort_keys=True) + "\n"

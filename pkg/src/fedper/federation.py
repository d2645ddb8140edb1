"""Federated averaging with optional personalization of the dense head.

The server only ever holds the shared block. In the personalized regime each
client keeps its local block, and every transfer across the client/server
boundary is logged as a :class:`Message` so a run can be audited afterwards.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import nn
from .errors import AveragingError, NoParticipantsError, RejectedInputError
from .protocol import LossHistory, early_stop

REGIMES = ("RND", "BCDL", "CDL", "LDL", "FDL", "PFDL")
UP, DOWN = "client->server", "server->client"
SHARED, SCALAR = "shared_params", "metrics_scalar"


@dataclass(frozen=True)
class FederationConfig:
    client_fraction: float = 1.0  # C
    local_epochs: int = 1  # E
    batch_size: int = 32  # B
    finetune_epochs: int = 1  # F
    lr: float = 1e-4  # eta
    finetune_decay: float = 0.1  # alpha
    rounds_per_step: int = 1
    regime: str = "PFDL"
    seed: int = 0
    patience: int = 5

    def __post_init__(self):
        if not 0 < self.client_fraction <= 1:
            raise RejectedInputError(f"C must be in (0, 1], got {self.client_fraction}")
        if self.local_epochs < 1 or self.batch_size < 1 or self.rounds_per_step < 1:
            raise RejectedInputError("E, B and rounds_per_step must be >= 1")
        if self.finetune_epochs < 0:
            raise RejectedInputError("F must be >= 0")
        if not self.lr > 0:
            raise RejectedInputError("learning rate must be positive")
        if not 0 < self.finetune_decay <= 1:
            raise RejectedInputError("alpha must be in (0, 1]")
        if self.regime not in REGIMES:
            raise RejectedInputError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")

    def clients_per_round(self, n_clients: int) -> int:
        # rounding guards against C*K landing a hair above an integer
        return max(math.ceil(round(self.client_fraction * n_clients, 9)), 1)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise RejectedInputError("inputs and labels differ in length")

    def __len__(self):
        return len(self.y)

    @staticmethod
    def concat(parts) -> "Dataset | None":
        parts = [p for p in parts if p is not None and len(p)]
        if not parts:
            return None
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


@dataclass(frozen=True)
class Message:
    direction: str
    round: int
    client_id: str
    payload_kind: str
    payload_len: int
    payload: bytes = field(repr=False, default=b"")


def params_hash(vec: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(vec, dtype=np.float64).tobytes()).hexdigest()


# -- local training ----------------------------------------------------------


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _val_loss(model, flat, val, start):
    return nn.loss(model, flat, val.x, val.y, training=False, start=start)


def train_epochs(model, flat, data: Dataset, epochs: int, batch_size: int, lr: float,
                 rng: np.random.Generator, val: Dataset | None = None,
                 patience: int = 5, start: int = 0):
    """Minibatch SGD for up to ``epochs`` epochs with early stopping on ``val``.

    ``data.x`` enters the network at layer ``start``. Returns the final flat
    vector and a list of ``(train_loss, val_loss)`` per epoch run.
    """
    history = LossHistory()
    log = []
    for _ in range(epochs):
        losses, sizes = [], []
        for idx in epoch_batches(len(data), batch_size, rng):
            flat, value = nn.train_step(model, flat, data.x[idx], data.y[idx], lr, start)
            losses.append(value)
            sizes.append(len(idx))
        train_loss = float(np.dot(losses, sizes) / sum(sizes))
        val_loss = _val_loss(model, flat, val, start) if val is not None and len(val) else float("nan")
        log.append((train_loss, val_loss))
        if val is not None and len(val):
            history.append(val_loss)
            if early_stop(history, patience):
                break
    return flat, log


class UpdateResult(NamedTuple):
    w_g: np.ndarray
    w_l: np.ndarray
    history: list


def client_update(model, w_g, w_l, data: Dataset | None, epochs: int, batch_size: int, lr: float,
                  rng: np.random.Generator, val: Dataset | None = None, patience: int = 5):
    """Train every layer of ``{w_g, w_l}`` on the client's data.

    Returns ``None`` (the client is skipped) when it holds no data.
    """
    if data is None or len(data) == 0:
        return None
    k = len(w_g)
    theta = np.concatenate([w_g, w_l])
    theta, history = train_epochs(model, theta, data, epochs, batch_size, lr, rng, val, patience)
    return UpdateResult(theta[:k].copy(), theta[k:].copy(), history)


def client_fine_tune(model, w_g, w_l, data: Dataset | None, epochs: int, batch_size: int, lr: float,
                     alpha: float, rng: np.random.Generator, val: Dataset | None = None,
                     patience: int = 5):
    """Train only the local layers at rate ``alpha * lr`` through a frozen ``w_g``.

    The frozen stage runs in inference mode, so its activations are computed
    once up front. ``w_g`` is never written.
    """
    if data is None or len(data) == 0:
        return None
    if not alpha * lr > 0:
        raise RejectedInputError("alpha * lr must be positive")
    if len(w_g) != model.n_shared:
        raise RejectedInputError(f"w_g has {len(w_g)} entries, model shares {model.n_shared}")
    if epochs == 0:
        return UpdateResult(w_g, w_l.copy(), [])
    theta = np.concatenate([w_g, w_l])
    b = model.boundary
    feats = Dataset(nn.features(model, theta, data.x, b), data.y)
    vfeats = Dataset(nn.features(model, theta, val.x, b), val.y) if val is not None and len(val) else None
    theta, history = train_epochs(model, theta, feats, epochs, batch_size, alpha * lr, rng, vfeats,
                                  patience, start=b)
    return UpdateResult(w_g, theta[len(w_g):].copy(), history)


# -- aggregation -------------------------------------------------------------

_SPLIT = 134217729.0  # 2**27 + 1, Veltkamp splitter for float64


def _two_product(a: np.ndarray, b: float):
    """Error-free product: ``a * b == hi + lo`` exactly."""
    hi = a * b
    ca = _SPLIT * a
    a_hi = ca - (ca - a)
    a_lo = a - a_hi
    cb = _SPLIT * b
    b_hi = cb - (cb - b)
    b_lo = b - b_hi
    lo = ((a_hi * b_hi - hi) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo
    return hi, lo


def federated_average(contributions) -> np.ndarray:
    """Weighted mean ``sum(n_k * w_k) / sum(n_k)``.

    Each product is split error-free and the parts are summed with
    ``math.fsum``; the quotient then gets one correction from the exact
    residual. The result is independent of contribution order, bit for bit,
    and identical contributions average back to themselves.
    """
    contributions = list(contributions)
    if not contributions:
        raise AveragingError("no contributions to average")
    vecs = [np.asarray(w, dtype=np.float64) for _, w in contributions]
    weights = [float(n) for n, _ in contributions]
    d = vecs[0].shape
    if any(v.shape != d for v in vecs) or len(d) != 1:
        raise RejectedInputError("contributions differ in length")
    total = math.fsum(weights)
    if not total > 0:
        raise AveragingError("total weight must be positive")
    if len(vecs) == 1:
        return vecs[0].copy()
    parts = []
    for w, v in zip(weights, vecs):
        hi, lo = _two_product(v, w)
        parts += [hi, lo]
    stacked = np.stack(parts, axis=1)
    sums = np.fromiter((math.fsum(row) for row in stacked), dtype=np.float64, count=d[0])
    q = sums / total
    # one correction with the exact residual sum(n_k w_k) - q * total
    qh, ql = _two_product(q, total)
    stacked = np.concatenate([stacked, -qh[:, None], -ql[:, None]], axis=1)
    resid = np.fromiter((math.fsum(row) for row in stacked), dtype=np.float64, count=d[0])
    return q + resid / total


# -- server loop -------------------------------------------------------------


@dataclass
class ClientState:
    k: int
    client_id: str
    w_g: np.ndarray  # last shared block received from the server
    w_l: np.ndarray  # private block, never uploaded in PFDL
    rng: np.random.Generator
    train: Dataset | None = None
    val: Dataset | None = None
    version: int = 0
    message_log: list = field(default_factory=list)
    local_snapshots: list = field(default_factory=list)
    freeze_checks: list = field(default_factory=list)

    @property
    def n_k(self) -> int:
        return 0 if self.train is None else len(self.train)

    def theta(self) -> np.ndarray:
        return np.concatenate([self.w_g, self.w_l])


@dataclass
class RoundRecord:
    t: int
    selected: tuple
    n_messages: int
    n_shared_transfers: int
    payload_bytes: int
    losses: list  # (epoch, split, loss)


@dataclass
class ServerState:
    w_g: np.ndarray
    t: int = 0
    version: int = 0
    history: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)


def _send(client: ClientState, direction: str, t: int, kind: str, vec: np.ndarray, extra: bytes = b""):
    payload = np.ascontiguousarray(vec, dtype=np.float64).tobytes() + extra
    msg = Message(direction, t, client.client_id, kind, len(payload) // 8, payload)
    client.message_log.append(msg)
    return msg


def sync_client(client: ClientState, server: ServerState, t: int | None = None):
    """Download the current shared block if the client's copy is stale."""
    if client.version == server.version:
        return None
    client.w_g = server.w_g.copy()
    client.version = server.version
    return _send(client, DOWN, server.t if t is None else t, SHARED, client.w_g)


def _weighted_epoch_losses(histories, offset=0):
    rows = []
    depth = max((len(h) for _, h in histories), default=0)
    for e in range(depth):
        for split, col in (("train", 0), ("val", 1)):
            pairs = [(n, h[e][col]) for n, h in histories if len(h) > e and not math.isnan(h[e][col])]
            if pairs:
                total = sum(n for n, _ in pairs)
                rows.append((offset + e + 1, split, math.fsum(n * v for n, v in pairs) / total))
    return rows


def run_round(model, server: ServerState, clients, cfg: FederationConfig, rng: np.random.Generator,
              shared_len: int | None = None, personalize: bool | None = None,
              inject_fault: bool = False) -> ServerState:
    """One communication round over ``clients``.

    ``shared_len`` is the length of the exchanged prefix of theta: the whole
    vector for FDL, the pre-boundary block for PFDL. ``personalize`` runs
    ClientFineTuning after averaging (defaults to ``cfg.regime == "PFDL"``).
    ``inject_fault`` appends one client's local block to its upload, as a
    test hook for the audit.
    """
    shared_len = len(server.w_g) if shared_len is None else shared_len
    personalize = cfg.regime == "PFDL" if personalize is None else personalize
    clients = list(clients)
    if not clients:
        raise NoParticipantsError("no clients available for the round")
    m = cfg.clients_per_round(len(clients))
    chosen = sorted(rng.choice(len(clients), size=m, replace=False).tolist())
    selected = [clients[i] for i in chosen]
    t = server.t + 1
    msgs = []
    contributions = []
    histories = []
    for c in selected:
        if c.n_k == 0:
            continue
        down = sync_client(c, server, t)
        if down is not None:
            msgs.append(down)
        res = client_update(model, c.w_g, c.w_l, c.train, cfg.local_epochs, cfg.batch_size, cfg.lr,
                            c.rng, c.val, cfg.patience)
        c.w_l = res.w_l
        if len(c.w_l):
            c.local_snapshots.append(c.w_l.tobytes())
        extra = b""
        if inject_fault:
            extra = c.w_l.tobytes()
            inject_fault = False
        msgs.append(_send(c, UP, t, SHARED, res.w_g, extra))
        msgs.append(_send(c, UP, t, SCALAR, np.array([float(c.n_k)])))
        contributions.append((c.n_k, res.w_g))
        histories.append((c.n_k, res.history))
    if not contributions:
        raise NoParticipantsError(f"round {t}: every selected client was skipped")

    w_g = federated_average(contributions)
    server = replace(server, w_g=w_g, t=t, version=server.version + 1,
                     history=list(server.history), snapshots=list(server.snapshots))
    server.snapshots.append(w_g.tobytes())

    ft_histories = []
    for c in selected:
        if c.n_k == 0:
            continue
        msgs.append(sync_client(c, server, t))
        if personalize and cfg.finetune_epochs > 0:
            before = params_hash(c.w_g)
            res = client_fine_tune(model, c.w_g, c.w_l, c.train, cfg.finetune_epochs, cfg.batch_size,
                                   cfg.lr, cfg.finetune_decay, c.rng, c.val, cfg.patience)
            c.freeze_checks.append((before, params_hash(c.w_g), params_hash(res.w_g)))
            c.w_l = res.w_l
            if len(c.w_l):
                c.local_snapshots.append(c.w_l.tobytes())
            ft_histories.append((c.n_k, res.history))

    losses = _weighted_epoch_losses(histories)
    losses += _weighted_epoch_losses(ft_histories, offset=max((len(h) for _, h in histories), default=0))
    shared = [x for x in msgs if x.payload_kind == SHARED]
    server.history.append(RoundRecord(
        t, tuple(c.client_id for c in selected), len(msgs), len(shared),
        sum(len(x.payload) for x in msgs), losses))
    return server


# -- audit -------------------------------------------------------------------


@dataclass
class AuditReport:
    regime: str
    violations: int
    messages: int
    payload_bytes: int
    full_theta_shared: bool
    details: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def summary(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        mode = "full theta shared (expected for regime)" if self.full_theta_shared else "shared block only"
        return (f"{status} regime={self.regime} violations={self.violations} "
                f"messages={self.messages} bytes={self.payload_bytes} mode={mode}")


def audit_confidentiality(clients, regime: str, shared_len: int, server: ServerState | None = None) -> AuditReport:
    """Check that no client's local block ever crossed to the server.

    For PFDL every upload must be either the shared block (exactly
    ``shared_len`` values) or a one-value scalar, and no recorded local-block
    snapshot may occur anywhere in an uploaded payload or in any stored server
    state. FDL shares the whole vector by design and is reported as such.
    """
    clients = list(clients)
    messages = [m for c in clients for m in c.message_log]
    report = AuditReport(regime, 0, len(messages), sum(len(m.payload) for m in messages),
                         full_theta_shared=regime == "FDL")
    if regime != "PFDL":
        return report
    snapshots = [s for c in clients for s in c.local_snapshots if s]
    for m in messages:
        if m.direction != UP:
            continue
        problem = None
        if m.payload_kind not in (SHARED, SCALAR):
            problem = f"unexpected payload kind {m.payload_kind}"
        elif m.payload_kind == SHARED and m.payload_len != shared_len:
            problem = f"shared payload has {m.payload_len} values, expected {shared_len}"
        elif m.payload_kind == SCALAR and m.payload_len != 1:
            problem = f"scalar payload has {m.payload_len} values"
        elif any(s in m.payload for s in snapshots):
            problem = "payload contains a local-block snapshot"
        if problem:
            report.violations += 1
            report.details.append(f"round {m.round} client {m.client_id}: {problem}")
    for i, state in enumerate(server.snapshots if server is not None else []):
        if any(s in state for s in snapshots):
            report.violations += 1
            report.details.append(f"server state after round {i + 1} contains a local-block snapshot")
    return report

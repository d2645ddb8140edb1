"""The six training regimes driven through the rolling session protocol.

RND is an untrained seeded init. BCDL is centrally pretrained on the
held-out cohort and then frozen. CDL, LDL, FDL and PFDL all start from the
BCDL parameters and adapt at every train step of the schedule.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cohort import Client, Cohort
from .errors import RejectedInputError
from .federation import (
    ClientState, Dataset, FederationConfig, ServerState, audit_confidentiality, run_round,
    sync_client, train_epochs, _weighted_epoch_losses,
)
from .metrics import evaluate
from .preprocess import augment, balanced_sample, center_crop, crop_size, histogram_equalize
from .protocol import build_schedule

log = logging.getLogger(__name__)

ADAPTIVE = ("CDL", "LDL", "FDL", "PFDL")


@dataclass(frozen=True)
class ModelConfig:
    filters: tuple = (32, 32, 64)
    kernel: int = 5
    pool: str = "each"
    dense_units: int = 128
    local: str = "dense"
    dtype: str = "float64"

    def build(self, input_size: int) -> nn.Model:
        return nn.pain_cnn(input_size, tuple(self.filters), self.kernel, self.pool,
                           self.dense_units, self.local, self.dtype)


@dataclass(frozen=True)
class ProtocolConfig:
    n_per_class: int = 200
    max_epochs: int = 10  # cap per train step for CDL / LDL
    pretrain_epochs: int = 20
    balanced_test: bool = False
    threshold: float = 0.5
    augment: bool = True

    def __post_init__(self):
        if self.n_per_class < 1 or self.max_epochs < 1 or self.pretrain_epochs < 1:
            raise RejectedInputError("n_per_class, max_epochs and pretrain_epochs must be >= 1")


# -- data preparation --------------------------------------------------------


@dataclass
class PreparedSession:
    index: int
    train: Dataset
    val: Dataset
    test: Dataset
    train_ids: frozenset
    test_ids: frozenset
    degenerate: bool


@dataclass
class PreparedClient:
    client_id: str
    sessions: dict

    @property
    def session_indices(self) -> list[int]:
        return sorted(self.sessions)

    def train_set(self, indices) -> Dataset | None:
        return Dataset.concat(self.sessions[i].train for i in sorted(indices))

    def train_ids(self, indices) -> frozenset:
        return frozenset().union(*(self.sessions[i].train_ids for i in indices))


def session_rng(seed: int, client_id: str, session_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 5, zlib.crc32(client_id.encode()), session_index])


def prepare_client(client: Client, proto: ProtocolConfig, seed: int, crop: int | None = None) -> PreparedClient:
    """Equalize, augment, crop and balance every session of one client."""
    out = {}
    for s in client.sessions:
        rng = session_rng(seed, client.client_id, s.session_index)
        size = crop or crop_size(s.images.shape[1])
        eq = [histogram_equalize(img) for img in s.images]
        cropped = np.stack([center_crop(img, size) for img in eq]).astype(float) / 255.0
        labels = s.labels
        src = np.arange(len(s))
        if proto.augment:
            pool = np.stack([v for img in eq for v in augment(img, rng, size)]) / 255.0
            pool_labels = np.repeat(labels, 4)
            pool_src = np.repeat(src, 4)
        else:
            pool, pool_labels, pool_src = cropped, labels, src
        tr = balanced_sample(pool_labels, rng, proto.n_per_class)
        va = balanced_sample(labels, rng, proto.n_per_class)
        if proto.balanced_test:
            te_idx = balanced_sample(labels, rng, proto.n_per_class).indices
        else:
            te_idx = src
        ident = lambda idx: frozenset((client.client_id, s.session_index, int(i)) for i in idx)  # noqa: E731
        out[s.session_index] = PreparedSession(
            index=s.session_index,
            train=Dataset(pool[tr.indices][..., None], tr.labels),
            val=Dataset(cropped[va.indices][..., None], va.labels),
            test=Dataset(cropped[te_idx][..., None], labels[te_idx]),
            train_ids=ident(pool_src[tr.indices]),
            test_ids=ident(te_idx),
            degenerate=tr.degenerate,
        )
    return PreparedClient(client.client_id, out)


# -- pretraining -------------------------------------------------------------


def pretrain(model, clients, theta0, fed: FederationConfig, proto: ProtocolConfig, seed: int):
    """Central BCDL training; each client's last session is held out for validation."""
    train_parts, val_parts = [], []
    for c in clients:
        idx = c.session_indices
        if len(idx) > 1:
            val_parts.append(c.sessions[idx[-1]].val)
            idx = idx[:-1]
        train_parts.append(c.train_set(idx))
    data = Dataset.concat(train_parts)
    val = Dataset.concat(val_parts)
    rng = np.random.default_rng([seed, 13])
    return train_epochs(model, theta0, data, proto.pretrain_epochs, fed.batch_size, fed.lr, rng, val,
                        fed.patience)


# -- regimes -----------------------------------------------------------------


@dataclass
class RegimeResult:
    regime: str
    seed: int
    rows: list = field(default_factory=list)
    predictions: dict = field(default_factory=dict)  # (step, client) -> scores
    loss_rows: list = field(default_factory=list)
    audit: object = None
    rounds: list = field(default_factory=list)
    freeze_checks: list = field(default_factory=list)
    leaks: list = field(default_factory=list)  # (step, client, overlap)
    clients: list = field(default_factory=list)
    server: ServerState | None = None


def run_regime(regime: str, model, clients, fed: FederationConfig, proto: ProtocolConfig,
               theta_rnd, theta_pre, seed: int, inject_fault: bool = False,
               shared_len: int | None = None) -> RegimeResult:
    """Drive one regime through the session schedule of the test ``clients``.

    ``shared_len`` overrides how much of theta the federated regimes exchange
    (default: everything for FDL, the pre-boundary block for PFDL).
    """
    if not clients:
        raise RejectedInputError("empty test cohort")
    if regime not in ("RND", "BCDL") + ADAPTIVE:
        raise RejectedInputError(f"unknown regime {regime!r}")
    by_id = {c.client_id: c for c in clients}
    schedule = build_schedule(clients)
    result = RegimeResult(regime, seed)
    trained_ids: set = set()

    theta_global = (theta_rnd if regime == "RND" else theta_pre).copy()
    theta_local = {c.client_id: theta_pre.copy() for c in clients}
    # streams do not depend on the regime, so regimes see the same shuffles
    local_rngs = {c.client_id: np.random.default_rng([seed, 31, i]) for i, c in enumerate(clients)}
    central_rng = np.random.default_rng([seed, 21])
    select_rng = np.random.default_rng([seed, 41])

    states: dict[str, ClientState] = {}
    server = None
    if regime in ("FDL", "PFDL"):
        if shared_len is None:
            shared_len = model.n_params if regime == "FDL" else model.n_shared
        server = ServerState(w_g=theta_pre[:shared_len].copy())
        for i, c in enumerate(clients):
            states[c.client_id] = ClientState(
                k=i, client_id=c.client_id, w_g=theta_pre[:shared_len].copy(),
                w_l=theta_pre[shared_len:].copy(), rng=local_rngs[c.client_id])

    def theta_for(cid: str) -> np.ndarray:
        if regime in ("RND", "BCDL", "CDL"):
            return theta_global
        if regime == "LDL":
            return theta_local[cid]
        st = states[cid]
        sync_client(st, server)
        return st.theta()

    for step in schedule:
        if step.kind == "test":
            for cid, a in step.assignments.items():
                sess = by_id[cid].sessions[a.test_session]
                scores = nn.forward(model, theta_for(cid), sess.test.x)
                result.predictions[(step.step_index, cid)] = scores
                overlap = len(sess.test_ids & trained_ids)
                result.leaks.append((step.step_index, cid, overlap))
                m = evaluate(scores, sess.test.y, proto.threshold)
                result.rows.append({
                    "regime": regime, "subject": cid, "session": a.test_session,
                    "acc": m["acc"], "f1": m["f1"], "pr_auc": m["pr_auc"],
                    "n_test": len(sess.test), "seed": seed,
                })
            continue

        if regime in ("RND", "BCDL"):
            continue
        train = {cid: by_id[cid].train_set(a.train_sessions) for cid, a in step.assignments.items()}
        val = {cid: by_id[cid].sessions[a.val_session].val for cid, a in step.assignments.items()}
        for cid, a in step.assignments.items():
            trained_ids |= by_id[cid].train_ids(a.train_sessions)

        if regime == "CDL":
            data = Dataset.concat(train[c] for c in step.assignments)
            vdata = Dataset.concat(val[c] for c in step.assignments)
            theta_global, hist = train_epochs(model, theta_global, data, proto.max_epochs, fed.batch_size,
                                              fed.lr, central_rng, vdata, fed.patience)
            rows = _weighted_epoch_losses([(len(data), hist)])
        elif regime == "LDL":
            hists = []
            for cid in step.assignments:
                theta_local[cid], hist = train_epochs(model, theta_local[cid], train[cid], proto.max_epochs,
                                                      fed.batch_size, fed.lr, local_rngs[cid], val[cid],
                                                      fed.patience)
                hists.append((len(train[cid]), hist))
            rows = _weighted_epoch_losses(hists)
        else:
            for cid, st in states.items():
                st.train = train.get(cid)
                st.val = val.get(cid)
            eligible = [states[cid] for cid in step.assignments]
            rows = []
            for _ in range(fed.rounds_per_step):
                server = run_round(model, server, eligible, fed, select_rng, shared_len,
                                   personalize=regime == "PFDL", inject_fault=inject_fault)
                inject_fault = False
                offset = max((r[0] for r in rows), default=0)
                rows += [(offset + e, split, v) for e, split, v in server.history[-1].losses]
            result.rounds = list(server.history)
        result.loss_rows += [(regime, seed, step.step_index, e, split, v) for e, split, v in rows]

    if states:
        result.clients = list(states.values())
        result.server = server
        result.audit = audit_confidentiality(result.clients, regime, shared_len, server)
        result.freeze_checks = [chk for st in result.clients for chk in st.freeze_checks]
    return result


# -- one seed ----------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    regimes: dict
    pretrain_loss_rows: list
    n_params: int
    n_shared: int


def run_seed(cohort: Cohort, seed: int, regimes, fed: FederationConfig, proto: ProtocolConfig,
             model_cfg: ModelConfig, inject_fault: bool = False) -> SeedResult:
    """Prepare data, pretrain once, then run every requested regime."""
    if not cohort.test:
        raise RejectedInputError("empty test cohort")
    size = cohort.test[0].sessions[0].images.shape[1]
    crop = crop_size(size)
    model = model_cfg.build(crop)
    test = [prepare_client(c, proto, seed, crop) for c in cohort.test]
    theta_rnd = nn.init_params(model, np.random.default_rng([seed, 3]))
    pre_rows = []
    theta_pre = theta_rnd
    if any(r != "RND" for r in regimes):
        pre = [prepare_client(c, proto, seed, crop) for c in cohort.pretrain]
        theta_pre, hist = pretrain(model, pre, theta_rnd, fed, proto, seed)
        pre_rows = [("BCDL", seed, 0, e, split, v) for e, split, v in _weighted_epoch_losses([(1, hist)])]
    out = {}
    for r in regimes:
        log.info("seed %d: regime %s", seed, r)
        out[r] = run_regime(r, model, test, fed, proto, theta_rnd, theta_pre, seed,
                            inject_fault=inject_fault and r == "PFDL")
    return SeedResult(seed, out, pre_rows, model.n_params, model.n_shared)


def first_step_identical(result: SeedResult) -> bool:
    """Whether every adaptive regime's first-step predictions equal BCDL's bitwise."""
    base = result.regimes.get("BCDL")
    if base is None:
        return True
    first = min(k[0] for k in base.predictions)
    for name in ADAPTIVE:
        r = result.regimes.get(name)
        if r is None:
            continue
        for key, scores in base.predictions.items():
            if key[0] == first and not np.array_equal(scores, r.predictions[key]):
                return False
    return True


"""Federated orchestration: broadcast, local training, compressed uplink,
server aggregation and the dense FedAvg baseline.

Two modes share the same local-training machinery:

* ``pfl``    -- shared backbone aggregated from compressed periodic uplinks
               (error feedback + Top-K + 8-bit quantization), personalized
               heads kept local; optional EMA shadow for evaluation.
* ``fedavg`` -- single global model (backbone + one shared single-layer
               head), dense float32-accounted upload every round.

Clients resynchronize to the broadcast backbone only at sync rounds
(t mod R == 0); between syncs they keep training from their local state
without communicating.  A literal every-round resync is available behind
``resync_every_round`` for comparison.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import compression as comp
from . import metrics as met
from . import nn

log = logging.getLogger(__name__)


class AggregationError(ValueError):
    """Mismatched update lengths at the server."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss during a client's local epochs."""


MODES = ("pfl", "fedavg")
MODE_ALIASES = {"epfl": "pfl"}


@dataclass
class RunConfig:
    mode: str = "pfl"
    rounds: int = 40
    local_epochs: int = 2
    sync_period: int = 5
    sparsity: float = 0.01
    client_fraction: float = 1.0
    ema: bool = True
    ema_beta: float = 0.99
    # ablation toggles
    split_head: bool = True
    periodic_sync: bool = True
    topk: bool = True
    quantization: bool = True
    # variants / options
    resync_every_round: bool = False
    size_weighted: bool = False
    precision: str = "double"  # "double" or "single"
    # local training
    batch_size: int = 64
    lr: float = 1e-3
    huber_delta: float = 1.0
    seed: int = 0
    # architecture
    hidden1: int = 256
    hidden2: int = 256
    latent: int = 512
    head: str = "two-layer"
    head_hidden: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.sync_period < 1:
            raise ValueError("sync_period must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError("client_fraction must be in (0, 1]")
        if not 0.0 <= self.ema_beta <= 1.0:
            raise ValueError("ema_beta must be in [0, 1]")
        if not 0.0 < self.sparsity <= 1.0:
            raise ValueError("sparsity must be in (0, 1]")
        if self.precision not in ("double", "single"):
            raise ValueError("precision must be 'double' or 'single'")


@dataclass
class RoundEntry:
    round: int
    bundle: met.MetricBundle
    cum_bytes: int
    n_payloads: int
    nnz_total: int
    wall_ms: float


@dataclass
class ClientState:
    client_id: int
    backbone: nn.BackboneParams
    head: nn.HeadParams
    residual: np.ndarray
    adam: nn.AdamState
    rng: np.random.Generator
    dataset: object
    ref: np.ndarray | None = None  # flat params at the last synchronization


@dataclass
class RunResult:
    config: RunConfig
    history: list
    global_flat: np.ndarray
    heads: list  # per-client HeadParams (pfl) or [shared head] (fedavg)
    dims: nn.ModelDims
    upload_len: int
    k: int

    @property
    def final(self) -> RoundEntry:
        return self.history[-1]


def sample_clients(n_clients, fraction, rng) -> np.ndarray:
    """Uniform without replacement, size max(1, round(fraction * N))."""
    size = max(1, int(round(fraction * n_clients)))
    return np.sort(rng.choice(n_clients, size=size, replace=False))


def aggregate(flat_global, updates, weights=None) -> np.ndarray:
    """theta + (weighted) mean of decoded updates; identity on an empty set."""
    if not updates:
        return flat_global.copy()
    for u in updates:
        if u.shape != flat_global.shape:
            raise AggregationError(
                f"update length {u.size} != model length {flat_global.size}")
    if weights is None:
        mean = np.mean(np.stack(updates), axis=0)
    else:
        w = np.asarray(weights, dtype=float)
        mean = np.tensordot(w / w.sum(), np.stack(updates), axes=1)
    return flat_global + mean


def ema_update(shadow, theta, beta) -> np.ndarray:
    return beta * shadow + (1.0 - beta) * theta


def _model_dims(partition, cfg: RunConfig) -> nn.ModelDims:
    return nn.ModelDims(
        in_dim=2 + partition.n_features, n_outputs=partition.n_bs,
        hidden1=cfg.hidden1, hidden2=cfg.hidden2, latent=cfg.latent,
        head=cfg.head, head_hidden=cfg.head_hidden, dropout=cfg.dropout)


def _flatten_state(state: ClientState, include_head: bool) -> np.ndarray:
    flat = nn.flatten_backbone(state.backbone)
    if include_head:
        flat = np.concatenate([flat, nn.flatten_head(state.head)])
    return flat


def _set_from_flat(state: ClientState, flat, dims, include_head: bool):
    lb = nn.backbone_size(dims)
    state.backbone = nn.unflatten_backbone(flat[:lb], dims)
    if include_head:
        state.head = nn.unflatten_head(flat[lb:], dims)


def local_train(state: ClientState, cfg: RunConfig, dims: nn.ModelDims):
    """E epochs of seeded minibatch Adam on (backbone, head) with Huber loss."""
    x, y = state.dataset.x_train, state.dataset.y_train
    n = x.shape[0]
    lb = nn.backbone_size(dims)
    for _ in range(cfg.local_epochs):
        order = state.rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            z, bcache = nn.backbone_forward(state.backbone, xb, training=True)
            pred, hcache = nn.head_forward(state.head, z, training=True,
                                           rng=state.rng)
            loss = nn.huber_loss(pred, yb, cfg.huber_delta)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"client {state.client_id}: non-finite loss")
            seed = nn.huber_grad(pred, yb, cfg.huber_delta)
            bg, hg = nn.backward(state.backbone, state.head, bcache, hcache,
                                 seed)
            flat_p = np.concatenate([nn.flatten_backbone(state.backbone),
                                     nn.flatten_head(state.head)])
            flat_g = np.concatenate([nn.flatten_backbone(bg),
                                     nn.flatten_head(hg)])
            flat_p = nn.adam_step(state.adam, flat_p, flat_g, lr=cfg.lr)
            state.backbone = nn.unflatten_backbone(flat_p[:lb], dims)
            state.head = nn.unflatten_head(flat_p[lb:], dims)


def evaluate(partition, backbone_flat, heads, dims, uplink_bytes=0):
    """Per-client test pass, denormalized to dB; heads may be per-client or
    a single shared head (broadcast to all clients)."""
    backbone = nn.unflatten_backbone(backbone_flat, dims)
    residuals = []
    for i, ds in enumerate(partition.clients):
        head = heads[i] if len(heads) > 1 else heads[0]
        z, _ = nn.backbone_forward(backbone, ds.x_test, training=False)
        pred, _ = nn.head_forward(head, z, training=False)
        res_db = (np.atleast_2d(pred) - ds.y_test) * ds.label_std
        residuals.append(res_db)
    return met.bundle(residuals, uplink_mb=uplink_bytes / 1e6)


def run_training(partition, cfg: RunConfig) -> RunResult:
    """Run the full T-round loop; fully deterministic under cfg.seed."""
    if cfg.mode == "fedavg":
        return _run_fedavg(partition, cfg)
    return _run_pfl(partition, cfg)


def _init_rngs(cfg):
    return {
        "backbone": np.random.default_rng([cfg.seed, 1]),
        "shared_head": np.random.default_rng([cfg.seed, 2]),
        "sample": np.random.default_rng([cfg.seed, 4]),
    }


def _client_rng(cfg, cid):
    return np.random.default_rng([cfg.seed, 3, cid])


def _cast(x, cfg):
    return x.astype(np.float32) if cfg.precision == "single" else x


def _run_pfl(partition, cfg: RunConfig) -> RunResult:
    dims = _model_dims(partition, cfg)
    include_head = not cfg.split_head
    rngs = _init_rngs(cfg)
    lb = nn.backbone_size(dims)
    lh = nn.head_size(dims)
    upload_len = lb + (lh if include_head else 0)
    r_eff = cfg.sync_period if cfg.periodic_sync else 1
    k = upload_len if not cfg.topk else max(1, int(round(cfg.sparsity * upload_len)))

    global_flat = nn.flatten_backbone(nn.init_backbone(dims, rngs["backbone"]))
    shared_head_flat = None
    if include_head:
        shared_head_flat = nn.flatten_head(nn.init_head(dims, rngs["shared_head"]))
        global_flat = np.concatenate([global_flat, shared_head_flat])
    global_flat = _cast(global_flat, cfg)

    states = []
    for ds in partition.clients:
        if include_head:
            head = nn.unflatten_head(global_flat[lb:], dims)
        else:
            head = nn.init_head(dims, _client_rng(cfg, 1000 + ds.client_id))
        states.append(ClientState(
            client_id=ds.client_id,
            backbone=nn.unflatten_backbone(global_flat[:lb], dims),
            head=head,
            residual=np.zeros(upload_len),
            adam=nn.adam_init(lb + lh),
            rng=_client_rng(cfg, ds.client_id),
            dataset=ds))

    shadow = global_flat.copy()
    cum_bytes = 0
    nnz_total = 0
    n_payloads = 0
    history = []

    def snapshot(round_no, wall_ms):
        eval_flat = shadow if cfg.ema else global_flat
        if include_head:
            heads = [nn.unflatten_head(eval_flat[lb:], dims)]
        else:
            heads = [st.head for st in states]
        b = evaluate(partition, eval_flat[:lb], heads, dims, cum_bytes)
        history.append(RoundEntry(round_no, b, cum_bytes, n_payloads,
                                  nnz_total, wall_ms))

    snapshot(0, 0.0)
    t0 = time.perf_counter()
    for t in range(cfg.rounds):
        participants = sample_clients(len(states), cfg.client_fraction,
                                      rngs["sample"])
        sync = (t % r_eff == 0)
        updates, weights = [], []
        for cid in participants:
            st = states[cid]
            if sync or cfg.resync_every_round:
                _set_from_flat(st, global_flat, dims, include_head)
                st.ref = global_flat.copy()
            try:
                local_train(st, cfg, dims)
            except TrainingDiverged as exc:
                log.warning("round %d: %s; client skipped", t, exc)
                continue
            if not sync:
                continue
            delta = _flatten_state(st, include_head) - st.ref
            u = comp.accumulate(delta, st.residual)
            sparse = comp.top_k(u, k)
            st.residual = comp.residual_update(u, sparse)
            if cfg.quantization:
                payload = comp.encode(comp.quantize(sparse, st.client_id, t))
                cum_bytes += len(payload)
                q = comp.decode(payload)
                nnz_total += q.nnz
                updates.append(comp.dequantize(q))
            else:
                nnz = int(np.count_nonzero(sparse))
                cum_bytes += comp.sparse_float_bytes(nnz)
                nnz_total += nnz
                updates.append(sparse)
            n_payloads += 1
            weights.append(st.dataset.n_train)
        if updates:
            global_flat = aggregate(global_flat, updates,
                                    weights if cfg.size_weighted else None)
        shadow = ema_update(shadow, global_flat, cfg.ema_beta) if cfg.ema \
            else global_flat.copy()
        snapshot(t + 1, (time.perf_counter() - t0) * 1000.0)

    heads = [st.head for st in states] if not include_head \
        else [nn.unflatten_head(global_flat[lb:], dims)]
    return RunResult(cfg, history, global_flat, heads, dims, upload_len, k)


def _run_fedavg(partition, cfg: RunConfig) -> RunResult:
    """Dense baseline: one global model, full float32-accounted upload."""
    cfg = replace(cfg, head="single")
    dims = _model_dims(partition, cfg)
    rngs = _init_rngs(cfg)
    lb = nn.backbone_size(dims)
    lh = nn.head_size(dims)
    l_full = lb + lh
    global_flat = np.concatenate([
        nn.flatten_backbone(nn.init_backbone(dims, rngs["backbone"])),
        nn.flatten_head(nn.init_head(dims, rngs["shared_head"]))])
    global_flat = _cast(global_flat, cfg)

    states = [ClientState(
        client_id=ds.client_id,
        backbone=nn.unflatten_backbone(global_flat[:lb], dims),
        head=nn.unflatten_head(global_flat[lb:], dims),
        residual=np.zeros(0),
        adam=nn.adam_init(l_full),
        rng=_client_rng(cfg, ds.client_id),
        dataset=ds) for ds in partition.clients]

    cum_bytes = 0
    n_payloads = 0
    history = []

    def snapshot(round_no, wall_ms):
        heads = [nn.unflatten_head(global_flat[lb:], dims)]
        b = evaluate(partition, global_flat[:lb], heads, dims, cum_bytes)
        history.append(RoundEntry(round_no, b, cum_bytes, n_payloads, 0,
                                  wall_ms))

    snapshot(0, 0.0)
    t0 = time.perf_counter()
    for t in range(cfg.rounds):
        participants = sample_clients(len(states), cfg.client_fraction,
                                      rngs["sample"])
        updates, weights = [], []
        for cid in participants:
            st = states[cid]
            _set_from_flat(st, global_flat, dims, include_head=True)
            st.ref = global_flat.copy()
            try:
                local_train(st, cfg, dims)
            except TrainingDiverged as exc:
                log.warning("round %d: %s; client skipped", t, exc)
                continue
            updates.append(_flatten_state(st, include_head=True) - st.ref)
            cum_bytes += comp.dense_bytes(l_full)
            n_payloads += 1
            weights.append(st.dataset.n_train)
        if updates:
            global_flat = aggregate(global_flat, updates,
                                    weights if cfg.size_weighted else None)
        snapshot(t + 1, (time.perf_counter() - t0) * 1000.0)

    return RunResult(cfg, history,  global_flat,
                     [nn.unflatten_head(global_flat[lb:], dims)],
                     dims, l_full, l_full)


# ---------------------------------------------------------------------------
# Round log export.
# ---------------------------------------------------------------------------

def write_roundlog(result: RunResult, scenario: str, path):
    m = result.dims.n_outputs
    header = ["round", "scenario", "mode", "rmse_micro", "rmse_macro",
              "mae_macro"] + [f"rmse_bs_{i+1}" for i in range(m)] \
        + ["cum_uplink_mb", "wall_ms"]
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for e in result.history:
            b = e.bundle
            vals = [str(e.round), scenario, result.config.mode,
                    repr(b.rmse_micro), repr(b.rmse_macro), repr(b.mae_macro)]
            vals += [repr(float(v)) for v in b.per_bs_rmse]
            vals += [repr(e.cum_bytes / 1e6), f"{e.wall_ms:.1f}"]
            f.write(",".join(vals) + "\n")


def read_roundlog(path):
    """Round log rows as dicts keyed by the documented header."""
    with open(path) as f:
        header = f.readline().strip().split(",")
        rows = []
        for line in f:
            if line.strip():
                rows.append(dict(zip(header, line.strip().split(","))))
    return header, rows

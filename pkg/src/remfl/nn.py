"""Minimal dense network engine for the split backbone/head model.

Everything is plain numpy in double precision: a three-layer MLP backbone
(bias -> SiLU -> LayerNorm per layer, normalization applied after the
activation) producing a latent vector, plus a per-client head that is either
a single linear layer or a small two-layer MLP with inverted dropout.
Gradients are hand-written reverse mode; the optimizer is Adam with bias
correction operating on flattened parameter vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DimensionError(ValueError):
    """Shape contract violation between parameters and inputs."""


class ParameterError(ValueError):
    """Invalid hyperparameter (e.g. non-positive Huber delta)."""


@dataclass(frozen=True)
class ModelDims:
    """Architecture description shared by init, forward and flatten code."""

    in_dim: int
    n_outputs: int
    hidden1: int = 256
    hidden2: int = 256
    latent: int = 512
    head: str = "two-layer"  # "single" or "two-layer"
    head_hidden: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.head not in ("single", "two-layer"):
            raise ParameterError(f"unknown head variant {self.head!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout rate must be in [0, 1)")


@dataclass
class BackboneParams:
    """Three-layer backbone: weights, biases and LayerNorm affine per layer."""

    weights: list  # [W1 (h1,in), W2 (h2,h1), W3 (latent,h2)]
    biases: list
    gains: list
    shifts: list

    def copy(self):
        return BackboneParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [g.copy() for g in self.gains],
            [s.copy() for s in self.shifts],
        )


@dataclass
class HeadParams:
    """Per-client output head mapping the latent vector to M signal values."""

    variant: str
    w_out: np.ndarray | None = None
    b_out: np.ndarray | None = None
    w1: np.ndarray | None = None
    b1: np.ndarray | None = None
    w2: np.ndarray | None = None
    b2: np.ndarray | None = None
    dropout: float = 0.0

    def copy(self):
        c = lambda a: None if a is None else a.copy()
        return HeadParams(self.variant, c(self.w_out), c(self.b_out),
                          c(self.w1), c(self.b1), c(self.w2), c(self.b2),
                          self.dropout)


def silu(x):
    """Elementwise x * sigmoid(x)."""
    x = np.asarray(x, dtype=float)
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def layer_norm(x, gain, shift, eps=LN_EPS):
    """Normalize each row to zero mean / unit population variance, then affine."""
    x = np.asarray(x, dtype=float)
    gain = np.asarray(gain, dtype=float)
    shift = np.asarray(shift, dtype=float)
    if eps <= 0:
        raise ParameterError("layer_norm eps must be > 0")
    if x.shape[-1] != gain.shape[-1] or gain.shape != shift.shape:
        raise DimensionError(
            f"layer_norm length mismatch: x {x.shape[-1]}, gain {gain.shape}, shift {shift.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    return gain * y + shift


def init_backbone(dims: ModelDims, rng: np.random.Generator) -> BackboneParams:
    """Kaiming-uniform weights, zero biases, identity LayerNorm affine."""
    widths = [dims.hidden1, dims.hidden2, dims.latent]
    fan_ins = [dims.in_dim, dims.hidden1, dims.hidden2]
    weights, biases, gains, shifts = [], [], [], []
    for out_w, fan_in in zip(widths, fan_ins):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(out_w, fan_in)))
        biases.append(np.zeros(out_w))
        gains.append(np.ones(out_w))
        shifts.append(np.zeros(out_w))
    return BackboneParams(weights, biases, gains, shifts)


def init_head(dims: ModelDims, rng: np.random.Generator) -> HeadParams:
    if dims.head == "single":
        bound = math.sqrt(6.0 / dims.latent)
        return HeadParams(
            "single",
            w_out=rng.uniform(-bound, bound, size=(dims.n_outputs, dims.latent)),
            b_out=np.zeros(dims.n_outputs),
        )
    b1 = math.sqrt(6.0 / dims.latent)
    b2 = math.sqrt(6.0 / dims.head_hidden)
    return HeadParams(
        "two-layer",
        w1=rng.uniform(-b1, b1, size=(dims.head_hidden, dims.latent)),
        b1=np.zeros(dims.head_hidden),
        w2=rng.uniform(-b2, b2, size=(dims.n_outputs, dims.head_hidden)),
        b2=np.zeros(dims.n_outputs),
        dropout=dims.dropout,
    )


def backbone_forward(params: BackboneParams, x, training=False):
    """Forward pass; returns (latent, cache) with cache keeping pre-activations.

    Accepts a single sample (1-D) or a batch of rows (2-D).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != params.weights[0].shape[1]:
        raise DimensionError(
            f"input width {xb.shape[1]} != expected {params.weights[0].shape[1]}")
    layers = []
    cur = xb
    for w, b, g, s in zip(params.weights, params.biases, params.gains, params.shifts):
        a = cur @ w.T + b
        h = silu(a)
        mu = h.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(h.var(axis=-1, keepdims=True) + LN_EPS)
        y = (h - mu) * inv_std
        out = g * y + s
        layers.append((cur, a, y, inv_std))
        cur = out
    z = cur[0] if single else cur
    return z, {"layers": layers, "single": single}


def backbone_backward(params: BackboneParams, cache, dz):
    """Reverse pass through the backbone; returns (grads, dL/dx)."""
    dout = np.atleast_2d(np.asarray(dz, dtype=float))
    gw, gb, gg, gs = [], [], [], []
    for (x_in, a, y, inv_std), w, g in zip(
            reversed(cache["layers"]), reversed(params.weights), reversed(params.gains)):
        gg.append((dout * y).sum(axis=0))
        gs.append(dout.sum(axis=0))
        dy = dout * g
        dh = (dy - dy.mean(axis=-1, keepdims=True)
              - y * (dy * y).mean(axis=-1, keepdims=True)) * inv_std
        da = dh * silu_grad(a)
        gw.append(da.T @ x_in)
        gb.append(da.sum(axis=0))
        dout = da @ w
    grads = BackboneParams(gw[::-1], gb[::-1], gg[::-1], gs[::-1])
    return grads, dout


def head_forward(params: HeadParams, z, training=False, rng=None):
    """Head pass; dropout is inverted-scaled at train time, identity at eval."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    if params.variant == "single":
        if zb.shape[1] != params.w_out.shape[1]:
            raise DimensionError("latent width mismatch for single head")
        pred = zb @ params.w_out.T + params.b_out
        cache = {"z": zb, "single": single}
    else:
        if zb.shape[1] != params.w1.shape[1]:
            raise DimensionError("latent width mismatch for two-layer head")
        mask = None
        zd = zb
        if training and params.dropout > 0.0:
            if rng is None:
                raise ParameterError("training dropout requires an rng")
            keep = 1.0 - params.dropout
            mask = (rng.random(zb.shape) < keep) / keep
            zd = zb * mask
        a1 = zd @ params.w1.T + params.b1
        h1 = silu(a1)
        pred = h1 @ params.w2.T + params.b2
        cache = {"zd": zd, "mask": mask, "a1": a1, "h1": h1, "single": single}
    return (pred[0] if single else pred), cache


def head_backward(params: HeadParams, cache, dpred):
    """Returns (head grads, dL/dz)."""
    dp = np.atleast_2d(np.asarray(dpred, dtype=float))
    if params.variant == "single":
        grads = HeadParams("single", w_out=dp.T @ cache["z"], b_out=dp.sum(axis=0))
        return grads, dp @ params.w_out
    dh1 = dp @ params.w2
    gw2 = dp.T @ cache["h1"]
    gb2 = dp.sum(axis=0)
    da1 = dh1 * silu_grad(cache["a1"])
    gw1 = da1.T @ cache["zd"]
    gb1 = da1.sum(axis=0)
    dz = da1 @ params.w1
    if cache["mask"] is not None:
        dz = dz * cache["mask"]
    grads = HeadParams("two-layer", w1=gw1, b1=gb1, w2=gw2, b2=gb2,
                       dropout=params.dropout)
    return grads, dz


def backward(backbone: BackboneParams, head: HeadParams, bcache, hcache, dpred):
    """Full reverse pass from a loss-gradient seed on the predictions."""
    head_grads, dz = head_backward(head, hcache, dpred)
    backbone_grads, _ = backbone_backward(backbone, bcache, dz)
    return backbone_grads, head_grads


def huber_loss(pred, target, delta=1.0):
    """Mean Huber loss over every residual (robust to outliers)."""
    if delta <= 0:
        raise ParameterError("huber delta must be > 0")
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    r = pred - target
    a = np.abs(r)
    per = np.where(a <= delta, 0.5 * r * r, delta * a - 0.5 * delta * delta)
    return float(per.mean())


def huber_grad(pred, target, delta=1.0):
    """d(mean Huber)/d(pred); the seed fed into backward()."""
    if delta <= 0:
        raise ParameterError("huber delta must be > 0")
    r = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return np.clip(r, -delta, delta) / r.size


# ---------------------------------------------------------------------------
# Flattened views.  The canonical ordering is frozen because flat indices
# cross the wire: per backbone layer W, b, gain, shift (row-major), layers in
# order; head appended (single: w_out, b_out; two-layer: w1, b1, w2, b2).
# ---------------------------------------------------------------------------

def _backbone_arrays(p: BackboneParams):
    out = []
    for i in range(len(p.weights)):
        out.extend([p.weights[i], p.biases[i], p.gains[i], p.shifts[i]])
    return out


def _head_arrays(p: HeadParams):
    if p.variant == "single":
        return [p.w_out, p.b_out]
    return [p.w1, p.b1, p.w2, p.b2]


def flatten_backbone(p: BackboneParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _backbone_arrays(p)])


def flatten_head(p: HeadParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _head_arrays(p)])


def backbone_size(dims: ModelDims) -> int:
    widths = [dims.hidden1, dims.hidden2, dims.latent]
    fan_ins = [dims.in_dim, dims.hidden1, dims.hidden2]
    return sum(w * f + 3 * w for w, f in zip(widths, fan_ins))


def head_size(dims: ModelDims) -> int:
    if dims.head == "single":
        return dims.n_outputs * dims.latent + dims.n_outputs
    return (dims.head_hidden * dims.latent + dims.head_hidden
            + dims.n_outputs * dims.head_hidden + dims.n_outputs)


def unflatten_backbone(flat: np.ndarray, dims: ModelDims) -> BackboneParams:
    if flat.size != backbone_size(dims):
        raise DimensionError(
            f"flat length {flat.size} != backbone size {backbone_size(dims)}")
    widths = [dims.hidden1, dims.hidden2, dims.latent]
    fan_ins = [dims.in_dim, dims.hidden1, dims.hidden2]
    pos = 0
    weights, biases, gains, shifts = [], [], [], []
    for w, f in zip(widths, fan_ins):
        weights.append(flat[pos:pos + w * f].reshape(w, f).copy()); pos += w * f
        biases.append(flat[pos:pos + w].copy()); pos += w
        gains.append(flat[pos:pos + w].copy()); pos += w
        shifts.append(flat[pos:pos + w].copy()); pos += w
    return BackboneParams(weights, biases, gains, shifts)


def unflatten_head(flat: np.ndarray, dims: ModelDims) -> HeadParams:
    if flat.size != head_size(dims):
        raise DimensionError(
            f"flat length {flat.size} != head size {head_size(dims)}")
    pos = 0
    if dims.head == "single":
        m, l = dims.n_outputs, dims.latent
        w_out = flat[pos:pos + m * l].reshape(m, l).copy(); pos += m * l
        b_out = flat[pos:pos + m].copy()
        return HeadParams("single", w_out=w_out, b_out=b_out)
    h, l, m = dims.head_hidden, dims.latent, dims.n_outputs
    w1 = flat[pos:pos + h * l].reshape(h, l).copy(); pos += h * l
    b1 = flat[pos:pos + h].copy(); pos += h
    w2 = flat[pos:pos + m * h].reshape(m, h).copy(); pos += m * h
    b2 = flat[pos:pos + m].copy()
    return HeadParams("two-layer", w1=w1, b1=b1, w2=w2, b2=b2,
                      dropout=dims.dropout)


# ---------------------------------------------------------------------------
# Adam over flat vectors.
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_init(n: int) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              lr=1e-3, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One bias-corrected Adam update; mutates state, returns new params."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError("adam: params/grads/state shape mismatch")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    mhat = state.m / (1.0 - beta1 ** state.step)
    vhat = state.v / (1.0 - beta2 ** state.step)
    return params - lr * mhat / (np.sqrt(vhat) + eps)

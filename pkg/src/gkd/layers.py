"""Differentiable layers: batch normalization, LSTM, softmax, cross-entropy.

Convolution and linear layers live in ``autodiff``; this module adds the
stateful and loss layers. Recurrent steps and losses are fused records
(one tape entry each) with hand-written backward passes, which keeps tapes
short for long videos.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import (Tensor, _maybe_record, relu, reshape, slice_rows,
                       stable_sigmoid)

__all__ = [
    "BatchNormState",
    "batchnorm3d",
    "LstmState",
    "lstm_step",
    "lstm_forward",
    "softmax",
    "cross_entropy",
    "cross_entropy_mean",
    "relu",
]


class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    ``gamma`` and ``beta`` are learnable; the running mean and variance are
    plain arrays updated in place during train-mode forward passes and are
    the only statistics consulted in eval mode.
    """

    def __init__(self, num_features: int, momentum: float = 0.1,
                 epsilon: float = 1e-5, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {momentum}")
        if epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon

    @property
    def num_features(self) -> int:
        return self.gamma.size


def batchnorm3d(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize each channel of a (C,T,H,W) or (N,C,T,H,W) volume.

    Train mode normalizes with batch statistics over every axis except the
    channel axis, then folds the unbiased batch variance into the running
    statistics. Eval mode normalizes with the running statistics only.
    """
    batched = x.ndim == 5
    if not batched and x.ndim != 4:
        raise ValueError(f"batchnorm3d input must be 4-D or 5-D, got {x.shape}")
    xb = x.data if batched else x.data[None]
    c = xb.shape[1]
    if c != state.num_features:
        raise ValueError(f"input has {c} channels, state has {state.num_features}")
    axes = (0, 2, 3, 4)
    count = xb.size // c
    eps = state.epsilon
    cshape = (1, c, 1, 1, 1)
    gamma, beta = state.gamma, state.beta

    if training:
        if count < 2:
            raise ValueError("train-mode batch normalization needs at least "
                             "2 elements per channel")
        mean = xb.mean(axis=axes)
        var = xb.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xb - mean.reshape(cshape)) * inv_std.reshape(cshape)
        m = state.momentum
        unbiased = var * (count / (count - 1))
        state.running_mean += m * (mean.astype(state.running_mean.dtype) - state.running_mean)
        state.running_var += m * (unbiased.astype(state.running_var.dtype) - state.running_var)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var.astype(xb.dtype) + eps)
        xhat = (xb - state.running_mean.reshape(cshape).astype(xb.dtype)) * inv_std.reshape(cshape)

    y = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
    out = Tensor(y if batched else y[0])

    def bwd(gouts, need):
        g = gouts[0] if batched else gouts[0][None]
        ggamma = (g * xhat).sum(axis=axes) if need[1] else None
        gbeta = g.sum(axis=axes) if need[2] else None
        gx = None
        if need[0]:
            gxhat = g * gamma.data.reshape(cshape)
            if training:
                gx = (gxhat
                      - gxhat.mean(axis=axes).reshape(cshape)
                      - xhat * (gxhat * xhat).mean(axis=axes).reshape(cshape))
                gx *= inv_std.reshape(cshape)
            else:
                gx = gxhat * inv_std.reshape(cshape)
            if not batched:
                gx = gx[0]
        return gx, ggamma, gbeta

    _maybe_record((out,), (x, gamma, beta), bwd)
    return out


class LstmState:
    """Recurrent carry: hidden and cell vectors of equal length."""

    __slots__ = ("hidden", "cell")

    def __init__(self, hidden: Tensor, cell: Tensor):
        if hidden.shape != cell.shape or hidden.ndim != 1:
            raise ValueError(
                f"hidden {hidden.shape} and cell {cell.shape} must be equal-length vectors")
        self.hidden = hidden
        self.cell = cell

    @classmethod
    def zeros(cls, units: int, dtype=np.float32) -> "LstmState":
        return cls(Tensor(np.zeros(units, dtype=dtype)),
                   Tensor(np.zeros(units, dtype=dtype)))


def lstm_step(x: Tensor, state: LstmState, w_x: Tensor, w_h: Tensor,
              bias: Tensor) -> tuple[Tensor, LstmState]:
    """One recurrent cell update; returns (output, next state).

    Gate pre-activations are packed in rows of ``w_x`` (4H, I), ``w_h``
    (4H, H) and ``bias`` (4H,) in the order input, forget, candidate,
    output. Input and forget and output gates squash through sigmoid, the
    candidate through tanh; the new cell is ``f*cell + i*g`` and the output
    equals the new hidden state ``o*tanh(cell')``.
    """
    h_prev, c_prev = state.hidden, state.cell
    units = h_prev.size
    if x.ndim != 1 or w_x.shape != (4 * units, x.size) or w_h.shape != (4 * units, units) \
            or bias.shape != (4 * units,):
        raise ValueError(
            f"inconsistent lstm shapes: x={x.shape} w_x={w_x.shape} "
            f"w_h={w_h.shape} bias={bias.shape} units={units}")

    pre = w_x.data @ x.data + w_h.data @ h_prev.data + bias.data
    i = stable_sigmoid(pre[:units])
    f = stable_sigmoid(pre[units:2 * units])
    g = np.tanh(pre[2 * units:3 * units])
    o = stable_sigmoid(pre[3 * units:])
    c_new = f * c_prev.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    out_h = Tensor(h_new)
    out_c = Tensor(c_new)

    def bwd(gouts, need):
        gh, gc = gouts
        dc = np.zeros_like(c_new) if gc is None else gc.copy()
        if gh is not None:
            dc += gh * o * (1.0 - tc * tc)
        do = gh * tc if gh is not None else np.zeros_like(o)
        di = dc * g
        df = dc * c_prev.data
        dg = dc * i
        dpre = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ])
        gx = dpre @ w_x.data if need[0] else None
        ghp = dpre @ w_h.data if need[1] else None
        gcp = dc * f if need[2] else None
        gwx = np.outer(dpre, x.data) if need[3] else None
        gwh = np.outer(dpre, h_prev.data) if need[4] else None
        gb = dpre if need[5] else None
        return gx, ghp, gcp, gwx, gwh, gb

    _maybe_record((out_h, out_c), (x, h_prev, c_prev, w_x, w_h, bias), bwd)
    return out_h, LstmState(out_h, out_c)


def lstm_forward(xs: Tensor | Sequence[Tensor], w_x: Tensor, w_h: Tensor,
                 bias: Tensor, state: LstmState | None = None) -> LstmState:
    """Run the cell across a sequence; returns the final state.

    ``xs`` is either a (T, I) tensor or a sequence of (I,) tensors,
    consumed in order from a zero initial state unless one is given.
    """
    if isinstance(xs, Tensor):
        if xs.ndim != 2:
            raise ValueError(f"sequence tensor must be (T, I), got {xs.shape}")
        steps = [reshape(slice_rows(xs, t, t + 1), (xs.shape[1],))
                 for t in range(xs.shape[0])]
    else:
        steps = list(xs)
    if not steps:
        raise ValueError("lstm_forward needs at least one step")
    if state is None:
        state = LstmState.zeros(w_h.shape[1], dtype=w_h.dtype)
    for x_t in steps:
        _, state = lstm_step(x_t, state, w_x, w_h, bias)
    return state


def softmax(z: Tensor) -> Tensor:
    """Normalized exponentials along the last axis, max-subtracted."""
    zd = z.data
    shifted = zd - zd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(gouts, need):
        g = gouts[0]
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    _maybe_record((out,), (z,), bwd)
    return out


LOG_FLOOR = 1e-12


def _check_distribution(t: np.ndarray, c: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (c,):
        raise ValueError(f"target distribution shape {t.shape} must be ({c},)")
    if abs(t.sum() - 1.0) > 1e-6:
        raise ValueError(f"target distribution sums to {t.sum():.8f}, expected 1")
    return t


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits).

    ``target`` is a class index or a distribution over the classes. Log
    probabilities are floored at 1e-12 so an exactly-zero probability
    cannot produce an infinite loss.
    """
    if logits.ndim != 1:
        raise ValueError(f"logits must be a vector, got shape {logits.shape}")
    c = logits.size
    zd = logits.data.astype(np.float64)
    e = np.exp(zd - zd.max())
    p = e / e.sum()
    logp = np.log(np.maximum(p, LOG_FLOOR))

    if isinstance(target, (int, np.integer)):
        idx = int(target)
        if not 0 <= idx < c:
            raise IndexError(f"class index {idx} out of range for {c} classes")
        loss = -logp[idx]
        tvec = None
    else:
        tvec = _check_distribution(target, c)
        loss = -(tvec * logp).sum()

    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def bwd(gouts, need):
        grad = p.copy()
        if tvec is None:
            grad[idx] -= 1.0
        else:
            grad -= tvec
        return ((gouts[0] * grad).astype(logits.dtype),)

    _maybe_record((out,), (logits,), bwd)
    return out


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over a (B, c) batch of logits.

    ``targets`` is an integer index array of length B or a (B, c)
    distribution matrix (rows summing to 1 within 1e-6).
    """
    if logits.ndim != 2:
        raise ValueError(f"batched logits must be (B, c), got {logits.shape}")
    b, c = logits.shape
    zd = logits.data.astype(np.float64)
    e = np.exp(zd - zd.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    logp = np.log(np.maximum(p, LOG_FLOOR))

    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape != (b,):
            raise ValueError(f"need {b} target indices, got shape {targets.shape}")
        idx = targets.astype(np.int64)
        if idx.min() < 0 or idx.max() >= c:
            raise IndexError(f"class index out of range for {c} classes")
        loss = -logp[np.arange(b), idx].mean()
        tmat = None
    elif targets.shape == (b, c):
        tmat = targets.astype(np.float64)
        sums = tmat.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("target distribution rows must sum to 1")
        loss = -(tmat * logp).sum(axis=1).mean()
    else:
        raise ValueError(f"targets shape {targets.shape} incompatible with logits {logits.shape}")

    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def bwd(gouts, need):
        grad = p.copy()
        if tmat is None:
            grad[np.arange(b), idx] -= 1.0
        else:
            grad -= tmat
        grad *= gouts[0] / b
        return (grad.astype(logits.dtype),)

    _maybe_record((out,), (logits,), bwd)
    return out

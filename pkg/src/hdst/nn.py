"""LSTM cells and sequence runners on top of the autodiff tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .optim import ParamStore, uniform_init

__all__ = ["LSTMParams", "init_lstm", "lstm_params", "lstm_cell", "lstm_sequence"]


@dataclass(frozen=True)
class LSTMParams:
    """Gate weights with layout [input, forget, cell, output] along columns."""

    wx: Tensor  # (in_dim, 4*hidden)
    wh: Tensor  # (hidden, 4*hidden)
    b: Tensor  # (1, 4*hidden)

    @property
    def hidden_dim(self) -> int:
        return self.wh.shape[0]


def init_lstm(store: ParamStore, prefix: str, in_dim: int, hidden: int, rng: np.random.Generator) -> LSTMParams:
    wx = store.add(f"{prefix}.wx", uniform_init(rng, (in_dim, 4 * hidden), dtype=store.dtype))
    wh = store.add(f"{prefix}.wh", uniform_init(rng, (hidden, 4 * hidden), dtype=store.dtype))
    bias = np.zeros((1, 4 * hidden), dtype=store.dtype)
    bias[0, hidden:2 * hidden] = 1.0  # forget gate starts open
    b = store.add(f"{prefix}.b", bias)
    return LSTMParams(wx=wx, wh=wh, b=b)


def lstm_params(store: ParamStore, prefix: str) -> LSTMParams:
    return LSTMParams(wx=store[f"{prefix}.wx"], wh=store[f"{prefix}.wh"], b=store[f"{prefix}.b"])


def _gates(z: Tensor, hidden: int, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    hc = ag.lstm_gates(z, c_prev)
    return ag.slice_cols(hc, 0, hidden), ag.slice_cols(hc, hidden, 2 * hidden)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LSTMParams) -> tuple[Tensor, Tensor]:
    """One step; x is (batch, in_dim), states are (batch, hidden)."""
    z = ag.add(ag.add(ag.matmul(x, p.wx), ag.matmul(h_prev, p.wh)), p.b)
    return _gates(z, p.hidden_dim, c_prev)


def lstm_sequence(
    xs: Tensor,
    p: LSTMParams,
    h0: Tensor | None = None,
    c0: Tensor | None = None,
    reverse: bool = False,
) -> tuple[Tensor, Tensor, Tensor]:
    """Run a sequence (n_steps, in_dim) through the cell as one tape node.

    Returns the per-step hidden states stacked as (n_steps, hidden) in the
    original sequence order plus the final (h, c) of the run direction.
    The whole scan is a single node with a hand-rolled backward pass, so
    the tape stays flat no matter how long the sequence is.
    """
    n = xs.shape[0]
    hidden = p.hidden_dim
    dtype = xs.dtype
    if h0 is None:
        h0 = ag.constant(np.zeros((1, hidden), dtype=dtype))
    if c0 is None:
        c0 = ag.constant(np.zeros((1, hidden), dtype=dtype))
    wx, wh, b = p.wx, p.wh, p.b

    pos = np.arange(n - 1, -1, -1) if reverse else np.arange(n)
    xw = xs.data @ wx.data + b.data
    gi = np.empty((n, hidden), dtype=dtype)
    gf = np.empty((n, hidden), dtype=dtype)
    gg = np.empty((n, hidden), dtype=dtype)
    go = np.empty((n, hidden), dtype=dtype)
    tc = np.empty((n, hidden), dtype=dtype)
    h_prev = np.empty((n, hidden), dtype=dtype)
    c_prev = np.empty((n, hidden), dtype=dtype)
    out = np.empty((n, hidden), dtype=dtype)
    h = h0.data[0]
    c = c0.data[0]
    for k in range(n):
        t = pos[k]
        z = xw[t] + h @ wh.data
        i = ag._sigmoid_stable(z[:hidden])
        f = ag._sigmoid_stable(z[hidden:2 * hidden])
        g = np.tanh(z[2 * hidden:3 * hidden])
        o = ag._sigmoid_stable(z[3 * hidden:])
        h_prev[k] = h
        c_prev[k] = c
        c = f * c + i * g
        t_c = np.tanh(c)
        h = o * t_c
        gi[k], gf[k], gg[k], go[k], tc[k] = i, f, g, o, t_c
        out[t] = h
    packed = np.concatenate([out, h.reshape(1, -1), c.reshape(1, -1)], axis=0)

    def bwd(grad):
        g_out = grad[:n]
        dh = grad[n].copy()
        dc = grad[n + 1].copy()
        dz = np.empty((n, 4 * hidden), dtype=dtype)
        for k in range(n - 1, -1, -1):
            dh = dh + g_out[pos[k]]
            dc = dc + dh * go[k] * (1.0 - tc[k] * tc[k])
            dz[k, :hidden] = dc * gg[k] * gi[k] * (1.0 - gi[k])
            dz[k, hidden:2 * hidden] = dc * c_prev[k] * gf[k] * (1.0 - gf[k])
            dz[k, 2 * hidden:3 * hidden] = dc * gi[k] * (1.0 - gg[k] * gg[k])
            dz[k, 3 * hidden:] = dh * tc[k] * go[k] * (1.0 - go[k])
            dh = dz[k] @ wh.data.T
            dc = dc * gf[k]
        xs_proc = xs.data[pos]
        dxs = np.zeros_like(xs.data)
        dxs[pos] = dz @ wx.data.T
        dwx = xs_proc.T @ dz
        dwh = h_prev.T @ dz
        db = dz.sum(axis=0, keepdims=True)
        return dxs, dwx, dwh, db, dh.reshape(1, -1), dc.reshape(1, -1)

    packed_t = ag._node(packed, (xs, wx, wh, b, h0, c0), bwd)
    hs = ag.slice_rows(packed_t, 0, n)
    h_last = ag.slice_rows(packed_t, n, n + 1)
    c_last = ag.slice_rows(packed_t, n + 1, n + 2)
    return hs, h_last, c_last

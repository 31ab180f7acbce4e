"""LSTM cell, stacked layers with time unrolling, and the linearly
time-weighted output aggregation.

Gate pre-activations are packed as one [*, 4H] block in the fixed order
input, forget, cell-candidate, output. Backward paths accumulate into the
shared cell parameters so the unrolled network collects summed gradients
over all time steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import Array, Parameter, dropout_backward, dropout_forward, sigmoid


@dataclass
class LSTMCellParams:
    wx: Parameter  # [input_size, 4*hidden]
    wh: Parameter  # [hidden, 4*hidden]
    b: Parameter   # [4*hidden]
    hidden_size: int


@dataclass
class LSTMStackConfig:
    num_layers: int
    hidden_size: int
    max_frames: int
    residual: bool = False
    dropout_p: float = 0.4

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_size < 1 or self.max_frames < 1:
            raise ValueError("hidden_size and max_frames must be >= 1")


def init_cell_params(rng: np.random.Generator, input_size: int,
                     hidden_size: int, name: str) -> LSTMCellParams:
    """Uniform [-s, s] weights with s = 1/sqrt(hidden); forget-gate bias
    starts at +1 so early training does not flush the cell state."""
    s = 1.0 / np.sqrt(hidden_size)
    wx = Parameter(f"{name}.wx", rng.uniform(-s, s, (input_size, 4 * hidden_size)))
    wh = Parameter(f"{name}.wh", rng.uniform(-s, s, (hidden_size, 4 * hidden_size)))
    bias = np.zeros(4 * hidden_size)
    bias[hidden_size:2 * hidden_size] = 1.0
    b = Parameter(f"{name}.b", bias)
    return LSTMCellParams(wx, wh, b, hidden_size)


def cell_step(x: Array, h_prev: Array, c_prev: Array, p: LSTMCellParams):
    """One step: i,f,o = sigmoid(.), g = tanh(.), c = f*c_prev + i*g,
    h = o*tanh(c)."""
    hs = p.hidden_size
    if x.shape[1] != p.wx.value.shape[0]:
        raise ValueError(
            f"lstm cell: input width {x.shape[1]} != {p.wx.value.shape[0]}"
        )
    a = x @ p.wx.value + h_prev @ p.wh.value + p.b.value
    i = sigmoid(a[:, 0 * hs:1 * hs])
    f = sigmoid(a[:, 1 * hs:2 * hs])
    g = np.tanh(a[:, 2 * hs:3 * hs])
    o = sigmoid(a[:, 3 * hs:4 * hs])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, h_prev, c_prev, i, f, g, o, tc, p)
    return h, c, cache


def cell_step_backward(dh: Array, dc_in: Array, cache):
    """Backward through one step. Accumulates parameter gradients; returns
    (dx, dh_prev, dc_prev)."""
    x, h_prev, c_prev, i, f, g, o, tc, p = cache
    do = dh * tc
    dc = dc_in + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    da = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        dg * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=1)
    p.wx.grad += x.T @ da
    p.wh.grad += h_prev.T @ da
    p.b.grad += da.sum(axis=0)
    dx = da @ p.wx.value.T
    dh_prev = da @ p.wh.value.T
    return dx, dh_prev, dc_prev


class LSTMStack:
    """N stacked LSTM layers unrolled over max_frames steps.

    Layer l consumes layer l-1's output sequence. Dropout hits each layer's
    output in train mode; with ``residual``, layers >= 2 add their input back
    (layer 1 has mismatched dims and gets no skip). All samples are unrolled
    the full max_frames; steps past valid_len propagate state but are meant
    to be masked out of any downstream aggregation, which makes their
    gradient contribution exactly zero.
    """

    def __init__(self, config: LSTMStackConfig, input_size: int,
                 rng: np.random.Generator, name: str = "lstm"):
        config.validate()
        if config.residual and config.num_layers < 2:
            raise ValueError("residual connections need at least 2 layers")
        self.config = config
        self.input_size = input_size
        self.layers = []
        for l in range(config.num_layers):
            in_size = input_size if l == 0 else config.hidden_size
            self.layers.append(
                init_cell_params(rng, in_size, config.hidden_size, f"{name}{l + 1}")
            )

    def parameters(self) -> list[Parameter]:
        out = []
        for p in self.layers:
            out.extend([p.wx, p.wh, p.b])
        return out

    def forward(self, x: Array, mode: str, rng: np.random.Generator | None = None):
        """x: [B, T, input_size] -> (top-layer outputs [B, T, hidden], tape)."""
        b, t, _ = x.shape
        cfg = self.config
        if t != cfg.max_frames:
            raise ValueError(f"batch has {t} frames, stack expects {cfg.max_frames}")
        tape = []
        seq = x
        for l, params in enumerate(self.layers):
            h = np.zeros((b, cfg.hidden_size))
            c = np.zeros((b, cfg.hidden_size))
            caches = []
            hseq = np.empty((b, t, cfg.hidden_size))
            for step in range(t):
                h, c, cache = cell_step(seq[:, step, :], h, c, params)
                caches.append(cache)
                hseq[:, step, :] = h
            out, drop_cache = dropout_forward(hseq, cfg.dropout_p, mode, rng)
            use_residual = cfg.residual and l >= 1
            if use_residual:
                out = out + seq
            tape.append((caches, drop_cache, use_residual))
            seq = out
        return seq, tape

    def backward(self, dout: Array, tape) -> Array:
        """dout: [B, T, hidden] gradient wrt the stack output sequence."""
        b, t, hs = dout.shape
        dseq = dout
        for l in range(len(self.layers) - 1, -1, -1):
            caches, drop_cache, use_residual = tape[l]
            dresidual = dseq if use_residual else None
            dhseq = dropout_backward(dseq, drop_cache)
            dh_next = np.zeros((b, hs))
            dc = np.zeros((b, hs))
            din = np.empty((b, t, caches[0][0].shape[1]))
            for step in range(t - 1, -1, -1):
                dh = dhseq[:, step, :] + dh_next
                dx, dh_next, dc = cell_step_backward(dh, dc, caches[step])
                din[:, step, :] = dx
            if dresidual is not None:
                din = din + dresidual
            dseq = din
        return dseq


def time_weights(valid_len: Array, max_frames: int) -> Array:
    """Per-sample aggregation weights [B, T]: w_t = t / L_i for 1-based
    t <= L_i, zero beyond. Strictly increasing with the last real frame at
    exactly 1; samples that fill max_frames reduce to w_t = t / max_frames."""
    valid_len = np.asarray(valid_len, dtype=np.int64)
    steps = np.arange(1, max_frames + 1, dtype=np.float64)[None, :]
    w = steps / valid_len[:, None].astype(np.float64)
    w[steps > valid_len[:, None]] = 0.0
    return w


def weighted_output_sum(outputs: Array, valid_len: Array):
    """Linearly time-weighted sum of per-step outputs: later frames count
    more, the final real frame has weight 1. outputs: [B, T, H] -> [B, H]."""
    b, t, _ = outputs.shape
    valid_len = np.asarray(valid_len, dtype=np.int64)
    if np.any(valid_len < 1) or np.any(valid_len > t):
        raise ValueError("valid_len entries must be in [1, max_frames]")
    w = time_weights(valid_len, t)
    y = np.einsum("bth,bt->bh", outputs, w)
    return y, w


def weighted_output_sum_backward(dy: Array, w: Array) -> Array:
    return dy[:, None, :] * w[:, :, None]

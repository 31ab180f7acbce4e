"""Sparsely-gated mixture-of-experts layer applied per time step.

A linear gate scores all n experts per sample; in train mode the scores get
Gaussian noise whose per-sample scale is produced by a second linear map
through a softplus. Only the top-k scores survive; a softmax over the
survivors yields exactly k nonzero mixture weights summing to 1. Ties break
toward the lower expert index so runs are reproducible.

Two auxiliary losses discourage the gate from collapsing onto a few experts:
the squared coefficient of variation of per-expert total gate weight
(importance), and of per-expert total selection probability under noise
resampling (load). Both come with analytic gradients, including the
threshold path of the load term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .nn_core import Array, Parameter, sigmoid

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class MoEConfig:
    n: int = 64               # expert count
    k: int = 4                # active experts per sample
    in_size: int = 512
    out_size: int = 512
    expert_hidden: int = 1024
    w_importance: float = 0.1
    w_load: float = 0.1
    noise_std_floor: float = 1e-8

    def validate(self) -> None:
        if not 1 <= self.k <= self.n:
            raise ValueError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")
        if min(self.in_size, self.out_size, self.expert_hidden) < 1:
            raise ValueError("expert dimensions must be positive")
        if self.w_importance < 0 or self.w_load < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class ExpertParams:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter


@dataclass
class MoEParams:
    w_gate: Parameter   # [in, n]
    w_noise: Parameter  # [in, n]
    experts: list[ExpertParams]

    def parameters(self) -> list[Parameter]:
        out = [self.w_gate, self.w_noise]
        for e in self.experts:
            out.extend([e.w1, e.b1, e.w2, e.b2])
        return out


@dataclass
class GateOutput:
    """Sparse gate result plus everything the load loss needs.

    ``gates`` is [S, n] with exactly k nonzeros per row, each row summing
    to 1. In train mode the noisy logits, the per-element noise draw, and
    its standard deviation are retained."""

    gates: Array
    topk_idx: Array              # [S, k] selected experts per row
    topk_weights: Array          # [S, k] softmax over survivors
    clean_logits: Array          # [S, n]
    noisy_logits: Array | None = None
    noise_std: Array | None = None
    noise: Array | None = None   # the standard-normal draw
    raw_noise: Array | None = None  # pre-softplus noise-scale logits
    mode: str = "train"


def init_moe_params(rng: np.random.Generator, config: MoEConfig,
                    name: str = "moe") -> MoEParams:
    """Gate and noise maps start at zero (initial selection is decided by
    noise / tie-breaking, not by untrained preferences); experts get the
    usual uniform fan-in scaling."""
    config.validate()
    w_gate = Parameter(f"{name}.w_gate", np.zeros((config.in_size, config.n)))
    w_noise = Parameter(f"{name}.w_noise", np.zeros((config.in_size, config.n)))
    experts = []
    s1 = 1.0 / np.sqrt(config.in_size)
    s2 = 1.0 / np.sqrt(config.expert_hidden)
    for e in range(config.n):
        experts.append(ExpertParams(
            w1=Parameter(f"{name}.expert{e}.w1",
                         rng.uniform(-s1, s1, (config.in_size, config.expert_hidden))),
            b1=Parameter(f"{name}.expert{e}.b1", np.zeros(config.expert_hidden)),
            w2=Parameter(f"{name}.expert{e}.w2",
                         rng.uniform(-s2, s2, (config.expert_hidden, config.out_size))),
            b2=Parameter(f"{name}.expert{e}.b2", np.zeros(config.out_size)),
        ))
    return MoEParams(w_gate, w_noise, experts)


# ---------------------------------------------------------------------------
# gating
# ---------------------------------------------------------------------------

def gate_top_k(x: Array, params: MoEParams, k: int, mode: str,
               rng: np.random.Generator | None = None,
               noise: Array | None = None,
               noise_std_floor: float = 1e-8) -> GateOutput:
    """Noisy top-k gate. Train mode perturbs the clean scores with
    element-wise Gaussian noise of learned scale before selecting; inference
    selects on the clean scores with no noise. ``noise`` fixes the standard
    normal draw (for gradient checks)."""
    n = params.w_gate.value.shape[1]
    if k > n:
        raise ValueError(f"k={k} exceeds expert count n={n}")
    clean = x @ params.w_gate.value
    if mode == "train":
        raw = x @ params.w_noise.value
        std = np.maximum(np.logaddexp(0.0, raw), noise_std_floor)
        if noise is None:
            if rng is None:
                raise ValueError("train-mode gating needs an rng or a fixed noise draw")
            noise = rng.standard_normal(clean.shape)
        noisy = clean + noise * std
        logits = noisy
    elif mode == "infer":
        raw = std = noise = noisy = None
        logits = clean
    else:
        raise ValueError(f"unknown mode {mode!r}")

    # stable argsort on negated logits: ties resolve to the lower expert index
    order = np.argsort(-logits, axis=1, kind="stable")
    topk_idx = order[:, :k]
    z = np.take_along_axis(logits, topk_idx, axis=1)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    weights = ez / ez.sum(axis=1, keepdims=True)
    gates = np.zeros_like(logits)
    np.put_along_axis(gates, topk_idx, weights, axis=1)
    return GateOutput(gates, topk_idx, weights, clean, noisy, std, noise, raw,
                      mode)


def gate_backward(d_gates: Array, x: Array, gate_out: GateOutput,
                  params: MoEParams,
                  d_clean_extra: Array | None = None,
                  d_std_extra: Array | None = None,
                  noise_std_floor: float = 1e-8) -> Array:
    """Backward through the gate. ``d_gates`` is the gradient wrt the sparse
    gate matrix; the extras inject load-loss gradients wrt the clean logits
    and the noise scale. Accumulates into w_gate/w_noise and returns dx."""
    w = gate_out.topk_weights
    g_sel = np.take_along_axis(d_gates, gate_out.topk_idx, axis=1)
    dz = w * (g_sel - (g_sel * w).sum(axis=1, keepdims=True))
    d_logits = np.zeros_like(d_gates)
    np.put_along_axis(d_logits, gate_out.topk_idx, dz, axis=1)

    d_clean = d_logits
    if d_clean_extra is not None:
        d_clean = d_clean + d_clean_extra
    if gate_out.mode == "train":
        d_std = d_logits * gate_out.noise
        if d_std_extra is not None:
            d_std = d_std + d_std_extra
        # softplus floor: no gradient where the floor is active
        live = np.logaddexp(0.0, gate_out.raw_noise) > noise_std_floor
        d_raw = d_std * sigmoid(gate_out.raw_noise) * live
        params.w_noise.grad += x.T @ d_raw
        params.w_gate.grad += x.T @ d_clean
        return d_clean @ params.w_gate.value.T + d_raw @ params.w_noise.value.T
    params.w_gate.grad += x.T @ d_clean
    return d_clean @ params.w_gate.value.T


# ---------------------------------------------------------------------------
# experts and sparse dispatch
# ---------------------------------------------------------------------------

def _expert_forward(x: Array, ep: ExpertParams):
    a = x @ ep.w1.value + ep.b1.value
    mask = a > 0
    h = a * mask
    y = h @ ep.w2.value + ep.b2.value
    return y, (x, h, mask)


def _expert_backward(dy: Array, cache, ep: ExpertParams) -> Array:
    x, h, mask = cache
    ep.w2.grad += h.T @ dy
    ep.b2.grad += dy.sum(axis=0)
    dh = (dy @ ep.w2.value.T) * mask
    ep.w1.grad += x.T @ dh
    ep.b1.grad += dh.sum(axis=0)
    return dh @ ep.w1.value.T


@dataclass
class MoECache:
    x: Array
    gate_out: GateOutput
    per_expert: list  # (expert index, row indices, expert cache, expert output)
    evaluations: int  # total expert row evaluations; always S * k


def moe_forward(x: Array, config: MoEConfig, params: MoEParams, mode: str,
                rng: np.random.Generator | None = None,
                noise: Array | None = None):
    """Sparse mixture: y_s = sum over selected experts of gate weight times
    expert output. Each expert only sees the rows that selected it, so the
    work is k/n of a dense mixture."""
    if x.shape[1] != config.in_size:
        raise ValueError(f"input width {x.shape[1]} != in_size {config.in_size}")
    gate_out = gate_top_k(x, params, config.k, mode, rng, noise,
                          config.noise_std_floor)
    s = x.shape[0]
    y = np.zeros((s, config.out_size))
    selected = np.zeros((s, config.n), dtype=bool)
    np.put_along_axis(selected, gate_out.topk_idx, True, axis=1)
    per_expert = []
    evaluations = 0
    for e, ep in enumerate(params.experts):
        rows = np.nonzero(selected[:, e])[0]
        if rows.size == 0:
            continue
        ye, cache = _expert_forward(x[rows], ep)
        y[rows] += gate_out.gates[rows, e][:, None] * ye
        per_expert.append((e, rows, cache, ye))
        evaluations += rows.size
    return y, gate_out, MoECache(x, gate_out, per_expert, evaluations)


def moe_backward(dy: Array, cache: MoECache, config: MoEConfig,
                 params: MoEParams,
                 d_gates_extra: Array | None = None,
                 d_clean_extra: Array | None = None,
                 d_std_extra: Array | None = None) -> Array:
    gate_out = cache.gate_out
    d_gates = np.zeros_like(gate_out.gates)
    dx = np.zeros_like(cache.x)
    for e, rows, ecache, ye in cache.per_expert:
        dye = dy[rows] * gate_out.gates[rows, e][:, None]
        d_gates[rows, e] = (dy[rows] * ye).sum(axis=1)
        dx[rows] += _expert_backward(dye, ecache, params.experts[e])
    if d_gates_extra is not None:
        d_gates = d_gates + d_gates_extra
    dx += gate_backward(d_gates, cache.x, gate_out, params,
                        d_clean_extra, d_std_extra, config.noise_std_floor)
    return dx


# ---------------------------------------------------------------------------
# balancing losses
# ---------------------------------------------------------------------------

def _cv_squared_grad(totals: Array):
    """Squared coefficient of variation (population std / mean)^2 of a
    vector, with its gradient. Zero mean (only possible when the totals are
    all zero) is defined as loss 0."""
    n = totals.size
    m = totals.mean()
    if m == 0.0:
        return 0.0, np.zeros_like(totals)
    var = totals.var()
    cv2 = var / (m * m)
    d = 2.0 * (totals - m) / (n * m * m) - 2.0 * var / (n * m ** 3)
    return float(cv2), d


def importance_loss(gates: Array, w_importance: float):
    """w * CV(per-expert total gate weight)^2 and its gradient wrt the full
    gate matrix."""
    if gates.shape[0] < 1:
        raise ValueError("importance loss needs at least one sample")
    importance = gates.sum(axis=0)
    cv2, d_imp = _cv_squared_grad(importance)
    loss = w_importance * cv2
    d_gates = np.broadcast_to(w_importance * d_imp, gates.shape).copy()
    return loss, d_gates


def load_loss(gate_out: GateOutput, k: int, w_load: float):
    """w * CV(per-expert expected selection count)^2.

    P(s, e) is the probability that expert e stays in row s's top k when its
    own noise is redrawn while every other expert keeps its sampled noise:
    the clean score must beat the k-th largest noisy logit among the other
    experts, a normal-CDF event. Returns (loss, d_clean_logits, d_noise_std);
    gradients include the dependence of that threshold on the other experts'
    logits and noise scales.
    """
    if gate_out.mode != "train" or gate_out.noisy_logits is None:
        raise ValueError("load loss needs a train-mode gate output with noise")
    clean = gate_out.clean_logits
    noisy = gate_out.noisy_logits
    std = gate_out.noise_std
    eps = gate_out.noise
    s, n = clean.shape
    if k >= n:
        # every expert is always selected: load is uniform by construction
        return 0.0, np.zeros_like(clean), np.zeros_like(clean)

    order = np.argsort(-noisy, axis=1, kind="stable")
    in_topk = np.zeros((s, n), dtype=bool)
    np.put_along_axis(in_topk, order[:, :k], True, axis=1)
    kth = order[:, k - 1]     # k-th largest overall
    kth1 = order[:, k]        # (k+1)-th largest overall
    # k-th largest among experts != e: step one deeper when e itself is in
    # the current top k
    thr_src = np.where(in_topk, kth1[:, None], kth[:, None])
    rows = np.arange(s)[:, None]
    thr = noisy[rows, thr_src]

    z = (clean - thr) / std
    p = ndtr(z)
    load = p.sum(axis=0)
    cv2, d_load = _cv_squared_grad(load)
    loss = w_load * cv2

    dp = w_load * d_load[None, :]                  # dLoss/dP[s, e]
    common = dp * np.exp(-0.5 * z * z) / (_SQRT_2PI * std)
    d_clean = common.copy()
    d_std = -common * z
    # threshold path: thr = clean[s, j*] + eps[s, j*] * std[s, j*]
    flat_src = (rows + np.zeros_like(thr_src)) * n + thr_src
    d_clean_flat = d_clean.reshape(-1)
    d_std_flat = d_std.reshape(-1)
    np.add.at(d_clean_flat, flat_src.reshape(-1), -common.reshape(-1))
    np.add.at(d_std_flat, flat_src.reshape(-1),
              (-common * eps[rows, thr_src]).reshape(-1))
    return loss, d_clean_flat.reshape(s, n), d_std_flat.reshape(s, n)


def selection_probabilities(gate_out: GateOutput, k: int) -> Array:
    """The P(s, e) matrix used by the load loss (no loss/gradient)."""
    clean = gate_out.clean_logits
    noisy = gate_out.noisy_logits
    std = gate_out.noise_std
    s, n = clean.shape
    if k >= n:
        return np.ones((s, n))
    order = np.argsort(-noisy, axis=1, kind="stable")
    in_topk = np.zeros((s, n), dtype=bool)
    np.put_along_axis(in_topk, order[:, :k], True, axis=1)
    thr_src = np.where(in_topk, order[:, k][:, None], order[:, k - 1][:, None])
    thr = noisy[np.arange(s)[:, None], thr_src]
    return ndtr((clean - thr) / std)


# ---------------------------------------------------------------------------
# per-time-step application
# ---------------------------------------------------------------------------

@dataclass
class MoETimeCache:
    rows_b: Array
    rows_t: Array
    inner: MoECache
    shape: tuple
    d_gates_aux: Array | None = None
    d_clean_aux: Array | None = None
    d_std_aux: Array | None = None
    evaluations: int = 0


def moe_over_time(x: Array, valid_len: Array | None, config: MoEConfig,
                  params: MoEParams, mode: str,
                  rng: np.random.Generator | None = None):
    """Apply the mixture independently at every valid time step.

    [B, T, in] flattens to one sample per valid (b, t) position; padded steps
    (t >= valid_len[b]) are excluded from the gate, the experts, and both
    auxiliary losses, and their outputs stay zero. Returns
    (y [B, T, out], aux loss dict, cache)."""
    b, t, _ = x.shape
    if valid_len is None:
        mask = np.ones((b, t), dtype=bool)
    else:
        mask = np.arange(t)[None, :] < np.asarray(valid_len)[:, None]
    rows_b, rows_t = np.nonzero(mask)
    xs = x[rows_b, rows_t]
    ys, gate_out, inner = moe_forward(xs, config, params, mode, rng)
    y = np.zeros((b, t, config.out_size))
    y[rows_b, rows_t] = ys

    cache = MoETimeCache(rows_b, rows_t, inner, x.shape,
                         evaluations=inner.evaluations)
    if mode == "train":
        imp, d_gates_aux = importance_loss(gate_out.gates, config.w_importance)
        load, d_clean_aux, d_std_aux = load_loss(gate_out, config.k,
                                                 config.w_load)
        cache.d_gates_aux = d_gates_aux
        cache.d_clean_aux = d_clean_aux
        cache.d_std_aux = d_std_aux
        aux = {"importance": imp, "load": load}
    else:
        aux = {"importance": 0.0, "load": 0.0}
    return y, aux, cache


def moe_over_time_backward(dy: Array, cache: MoETimeCache, config: MoEConfig,
                           params: MoEParams) -> Array:
    dys = dy[cache.rows_b, cache.rows_t]
    dxs = moe_backward(dys, cache.inner, config, params,
                       d_gates_extra=cache.d_gates_aux,
                       d_clean_extra=cache.d_clean_aux,
                       d_std_extra=cache.d_std_aux)
    dx = np.zeros(cache.shape)
    dx[cache.rows_b, cache.rows_t] = dxs
    return dx

"""Minimal dense-tensor layer library with hand-written forward/backward passes.

Everything runs in float64 so that central-difference gradient checks can be
held to tight tolerances. Layers follow a common convention:

    y, cache = layer_forward(x, ...)
    dx = layer_backward(dy, cache)

Backward passes *accumulate* into ``Parameter.grad`` (``+=``), so shared
parameters (e.g. an LSTM cell applied at every time step) collect summed
gradients. Call ``zero_grads`` at the start of each training step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class NonDeterministicLossError(RuntimeError):
    """Raised when a gradient-check closure returns different losses on
    repeated evaluation (e.g. live dropout or unseeded noise)."""


class NonFiniteLossError(RuntimeError):
    """Raised when training produces a NaN/Inf loss; carries the name of the
    first non-finite tensor found."""

    def __init__(self, tensor_name: str):
        self.tensor_name = tensor_name
        super().__init__(f"non-finite values detected in tensor {tensor_name!r}")


@dataclass
class Parameter:
    """A named value tensor paired with a gradient tensor of the same shape."""

    name: str
    value: Array
    grad: Array = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(
                f"parameter {self.name!r}: grad shape {self.grad.shape} "
                f"!= value shape {self.value.shape}"
            )

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def uniform_init(rng: np.random.Generator, shape, scale: float) -> Array:
    return rng.uniform(-scale, scale, size=shape)


# ---------------------------------------------------------------------------
# fully-connected layer
# ---------------------------------------------------------------------------

def fc_forward(x: Array, w: Parameter, b: Parameter):
    """y = x @ w + b for x of shape [B, in], w [in, out], b [out]."""
    if x.ndim != 2 or x.shape[1] != w.value.shape[0]:
        raise ValueError(
            f"fc: input shape {x.shape} incompatible with weight {w.value.shape}"
        )
    y = x @ w.value + b.value
    return y, (x, w, b)


def fc_backward(dy: Array, cache) -> Array:
    x, w, b = cache
    w.grad += x.T @ dy
    b.grad += dy.sum(axis=0)
    return dy @ w.value.T


def relu_forward(x: Array):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: Array, mask: Array) -> Array:
    return dy * mask


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNorm:
    """Per-feature batch normalization for [B, F] or [B, T, F] input.

    Rank-3 input is normalized per feature over the batch and time axes
    jointly. Train mode uses batch statistics (population variance) and
    updates running statistics as

        running = momentum * running + (1 - momentum) * batch_stat

    Inference mode uses the running statistics; zero variance is handled by
    the epsilon floor rather than an error.
    """

    def __init__(self, num_features: int, name: str = "bn",
                 momentum: float = 0.9, eps: float = 1e-8):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(num_features))
        self.beta = Parameter(f"{name}.beta", np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.name = name

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, Array]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def load_buffers(self, buffers: dict[str, Array]) -> None:
        self.running_mean = np.array(buffers[f"{self.name}.running_mean"])
        self.running_var = np.array(buffers[f"{self.name}.running_var"])

    def forward(self, x: Array, mode: str):
        if x.shape[-1] != self.num_features:
            raise ValueError(
                f"batchnorm {self.name!r}: expected {self.num_features} "
                f"features, got input shape {x.shape}"
            )
        orig_shape = x.shape
        flat = x.reshape(-1, self.num_features)
        if mode == "train":
            if flat.shape[0] < 2:
                raise ValueError("batchnorm train mode needs at least 2 rows")
            mean = flat.mean(axis=0)
            var = flat.var(axis=0)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1.0 - self.momentum) * mean)
            self.running_var = (self.momentum * self.running_var
                                + (1.0 - self.momentum) * var)
        elif mode == "infer":
            mean = self.running_mean
            var = self.running_var
        else:
            raise ValueError(f"unknown mode {mode!r}")
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (flat - mean) * inv_std
        y = self.gamma.value * xhat + self.beta.value
        cache = (xhat, inv_std, orig_shape, mode)
        return y.reshape(orig_shape), cache

    def backward(self, dy: Array, cache) -> Array:
        xhat, inv_std, orig_shape, mode = cache
        dflat = dy.reshape(-1, self.num_features)
        self.gamma.grad += (dflat * xhat).sum(axis=0)
        self.beta.grad += dflat.sum(axis=0)
        dxhat = dflat * self.gamma.value
        if mode == "infer":
            # running stats are constants: plain affine map
            dx = dxhat * inv_std
        else:
            n = dflat.shape[0]
            dx = (inv_std / n) * (
                n * dxhat
                - dxhat.sum(axis=0)
                - xhat * (dxhat * xhat).sum(axis=0)
            )
        return dx.reshape(orig_shape)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout_forward(x: Array, p: float, mode: str,
                    rng: np.random.Generator | None = None,
                    mask: Array | None = None):
    """Inverted dropout: train-mode survivors are scaled by 1/(1-p) so that
    inference is the identity. A precomputed boolean ``mask`` may be supplied
    for deterministic (gradient-check) use.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "infer" or p == 0.0:
        return x, None
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout with p > 0 needs an rng or mask")
        mask = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    return x * (mask * scale), (mask, scale)


def dropout_backward(dy: Array, cache) -> Array:
    if cache is None:
        return dy
    mask, scale = cache
    return dy * (mask * scale)


# ---------------------------------------------------------------------------
# time-axis max pooling
# ---------------------------------------------------------------------------

def max_pool_time_forward(x: Array, valid_len: Array):
    """out[i, f] = max over t < valid_len[i] of x[i, t, f].

    Padded steps never win regardless of their content. The backward pass
    routes the upstream gradient to the first argmax per (i, f).
    """
    b, t, f = x.shape
    valid_len = np.asarray(valid_len, dtype=np.int64)
    if np.any(valid_len < 1) or np.any(valid_len > t):
        raise ValueError("valid_len entries must be in [1, max_frames]")
    time_ok = np.arange(t)[None, :, None] < valid_len[:, None, None]
    masked = np.where(time_ok, x, -np.inf)
    argmax = masked.argmax(axis=1)                      # first max per (i, f)
    out = np.take_along_axis(x, argmax[:, None, :], axis=1)[:, 0, :]
    return out, (argmax, x.shape)


def max_pool_time_backward(dy: Array, cache) -> Array:
    argmax, shape = cache
    dx = np.zeros(shape)
    np.put_along_axis(dx, argmax[:, None, :], dy[:, None, :], axis=1)
    return dx


# ---------------------------------------------------------------------------
# sigmoid cross-entropy (plain and class-penalized)
# ---------------------------------------------------------------------------

def _softplus(z: Array) -> Array:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z: Array) -> Array:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_cross_entropy(logits: Array, labels: Array,
                          penalty: Array | None = None):
    """Mean multi-label sigmoid cross-entropy and its gradient.

    Per element: -[c_j * y * log sigmoid(z) + (1-y) * log(1 - sigmoid(z))],
    computed in the overflow-safe softplus form. ``penalty`` holds per-class
    positive-term weights c_j (all 1 when omitted); it scales only the
    positive-label term, i.e. the contribution that drives false negatives.
    Returns (mean loss over B*C elements, gradient wrt logits of that mean).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError("labels must be binary (0/1)")
    if penalty is None:
        c = 1.0
    else:
        c = np.asarray(penalty, dtype=np.float64)
        if c.shape != (logits.shape[1],):
            raise ValueError(
                f"penalty must have shape ({logits.shape[1]},), got {c.shape}"
            )
        c = c[None, :]
    pos_term = _softplus(-logits)       # -log sigmoid(z)
    neg_term = _softplus(logits)        # -log(1 - sigmoid(z))
    elems = c * labels * pos_term + (1.0 - labels) * neg_term
    n = logits.size
    loss = float(elems.sum() / n)
    s = sigmoid(logits)
    dlogits = (c * labels * (s - 1.0) + (1.0 - labels) * s) / n
    return loss, dlogits


def penalty_from_counts(counts: Array, cap: float) -> Array:
    """Per-class penalty weights inversely proportional to training-set label
    counts: c_j = min(max(counts) / counts_j, cap), with all-seen uniform
    counts giving c_j = 1 and unseen classes getting the cap."""
    if cap < 1.0:
        raise ValueError(f"cap must be >= 1, got {cap}")
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    top = counts.max() if counts.size else 0.0
    raw = top / np.maximum(counts, 1.0)
    c = np.minimum(raw, cap)
    c[counts == 0] = cap
    return c


# ---------------------------------------------------------------------------
# RMSProp with stepped learning-rate decay
# ---------------------------------------------------------------------------

class RMSProp:
    """RMSProp: acc = decay * acc + (1-decay) * g^2; p -= lr * g / (sqrt(acc) + eps).

    The learning rate follows a stepped schedule over samples seen:
    lr = base_lr * lr_decay_factor ** (samples_seen // lr_decay_every_samples).
    """

    def __init__(self, params: list[Parameter], base_lr: float,
                 decay_rate: float = 0.9, epsilon: float = 1e-8,
                 lr_decay_every_samples: int = 20_000_000,
                 lr_decay_factor: float = 0.1):
        if not 0.0 < decay_rate < 1.0:
            raise ValueError("decay_rate must be in (0, 1)")
        if not 0.0 < lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must be in (0, 1)")
        self.params = params
        self.base_lr = base_lr
        self.decay_rate = decay_rate
        self.epsilon = epsilon
        self.lr_decay_every_samples = int(lr_decay_every_samples)
        self.lr_decay_factor = lr_decay_factor
        self.samples_seen = 0
        self.acc: dict[str, Array] = {
            p.name: np.zeros_like(p.value) for p in params
        }

    def learning_rate(self) -> float:
        k = self.samples_seen // self.lr_decay_every_samples
        return self.base_lr * self.lr_decay_factor ** k

    def step(self) -> None:
        lr = self.learning_rate()
        rho = self.decay_rate
        for p in self.params:
            acc = self.acc[p.name]
            acc *= rho
            acc += (1.0 - rho) * p.grad * p.grad
            p.value -= lr * p.grad / (np.sqrt(acc) + self.epsilon)


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict[str, float]        # max relative error per parameter
    tolerance: float
    worst_param: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def failures(self) -> list[str]:
        return [n for n, e in self.per_param.items() if e >= self.tolerance]


def grad_check(loss_fn, params: list[Parameter], h: float = 1e-5,
               tolerance: float = 1e-5, max_coords_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare the analytic gradients produced by ``loss_fn`` against central
    finite differences.

    ``loss_fn()`` must evaluate the model at the current parameter values,
    accumulate gradients into ``params``, and return the scalar loss. The
    closure is required to be deterministic (fix dropout masks and noise by
    reseeding inside the closure); two initial evaluations are compared and a
    mismatch raises :class:`NonDeterministicLossError`.

    Relative error per coordinate is |analytic - numeric| /
    max(|analytic|, |numeric|, 1e-8). For large tensors a random subset of
    ``max_coords_per_param`` coordinates is probed.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    zero_grads(params)
    loss_a = loss_fn()
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grads(params)
    loss_b = loss_fn()
    if loss_a != loss_b:
        raise NonDeterministicLossError(
            f"loss closure is not deterministic: {loss_a!r} != {loss_b!r}"
        )

    per_param: dict[str, float] = {}
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        ga = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            zero_grads(params)
            lp = loss_fn()
            flat[i] = orig - h
            zero_grads(params)
            lm = loss_fn()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = ga[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        per_param[p.name] = worst

    # leave the analytic gradients in place for the caller
    for p in params:
        np.copyto(p.grad, analytic[p.name])
    worst_param = max(per_param, key=per_param.get) if per_param else ""
    return GradCheckReport(
        per_param=per_param,
        tolerance=tolerance,
        worst_param=worst_param,
        max_rel_error=per_param.get(worst_param, 0.0),
    )

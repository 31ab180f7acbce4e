"""The three sequence classifiers, their training step, prediction, and
checkpoint persistence.

* bag-of-frames: order-invariant max pooling over time followed by two
  fully-connected layers and a sigmoid classifier;
* stacked LSTM: N recurrent layers unrolled over the frame axis with a
  linearly time-weighted output sum feeding the classifier;
* LSTM + mixture-of-experts: two LSTM layers with a sparsely-gated expert
  layer applied per time step between them.

Models own their parameters and the forward cache of the most recent batch;
one model instance belongs to exactly one training loop at a time.

Checkpoint format (little-endian):

    magic "FGCK" | u32 version | str kind | str config-json (key-sorted)
    u32 n_params  | per tensor: str name | u8 ndim | u32 dims | f64 data
    u32 n_buffers | same tensor encoding
    f64 base_lr, decay_rate, epsilon, lr_decay_factor
    u64 lr_decay_every_samples | u64 samples_seen
    u32 n_accumulators | tensor encoding
    str rng-state-json

where ``str`` is u16 length + utf-8 bytes. Reloading reproduces bit-identical
forward outputs and a bit-identical continued training trajectory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import lstm as lstm_mod
from . import metrics as metrics_mod
from . import moe as moe_mod
from . import nn_core as nn
from .dataio import Batch, FrameRecord, make_batches
from .moe import MoEConfig
from .nn_core import Array, NonFiniteLossError, Parameter, RMSProp

CHECKPOINT_MAGIC = b"FGCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ForwardOut:
    logits: Array
    aux_losses: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# configurations
# ---------------------------------------------------------------------------

@dataclass
class BoFConfig:
    num_classes: int
    feature_size: int = 1152
    max_frames: int = 90
    fc_hidden: int = 4096
    dropout_input: float = 0.3
    dropout_fc1: float = 0.3

    def validate(self) -> None:
        if min(self.num_classes, self.feature_size, self.max_frames,
               self.fc_hidden) < 1:
            raise ValueError("all dimensions must be positive")


@dataclass
class SimpleLSTMConfig:
    num_classes: int
    feature_size: int = 1152
    max_frames: int = 90
    num_layers: int = 2
    hidden_size: int = 1024
    residual: bool = False
    dropout: float = 0.4

    def validate(self) -> None:
        if min(self.num_classes, self.feature_size, self.max_frames,
               self.hidden_size, self.num_layers) < 1:
            raise ValueError("all dimensions must be positive")


@dataclass
class LSTMMoEConfig:
    num_classes: int
    feature_size: int = 1152
    max_frames: int = 90
    lstm_hidden: int = 512
    dropout: float = 0.4
    moe: MoEConfig | None = None

    def __post_init__(self):
        if self.moe is None:
            self.moe = MoEConfig(in_size=self.lstm_hidden,
                                 out_size=self.lstm_hidden)

    def validate(self) -> None:
        if min(self.num_classes, self.feature_size, self.max_frames,
               self.lstm_hidden) < 1:
            raise ValueError("all dimensions must be positive")
        self.moe.validate()
        if self.moe.in_size != self.lstm_hidden or self.moe.out_size != self.lstm_hidden:
            raise ValueError("expert layer in/out sizes must equal lstm_hidden")


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class BoFModel:
    kind = "bof"

    def __init__(self, config: BoFConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        f, h, c = config.feature_size, config.fc_hidden, config.num_classes
        self.bn_in = nn.BatchNorm(f, "bn_in")
        self.bn1 = nn.BatchNorm(h, "bn1")
        self.bn2 = nn.BatchNorm(h, "bn2")
        sf, sh = 1.0 / np.sqrt(f), 1.0 / np.sqrt(h)
        self.w1 = Parameter("fc1.w", rng.uniform(-sf, sf, (f, h)))
        self.b1 = Parameter("fc1.b", np.zeros(h))
        self.w2 = Parameter("fc2.w", rng.uniform(-sh, sh, (h, h)))
        self.b2 = Parameter("fc2.b", np.zeros(h))
        self.wo = Parameter("out.w", rng.uniform(-sh, sh, (h, c)))
        self.bo = Parameter("out.b", np.zeros(c))
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return (self.bn_in.parameters() + [self.w1, self.b1]
                + self.bn1.parameters() + [self.w2, self.b2]
                + self.bn2.parameters() + [self.wo, self.bo])

    def buffers(self) -> dict[str, Array]:
        out = {}
        for bn in (self.bn_in, self.bn1, self.bn2):
            out.update(bn.buffers())
        return out

    def load_buffers(self, buffers: dict[str, Array]) -> None:
        for bn in (self.bn_in, self.bn1, self.bn2):
            bn.load_buffers(buffers)

    def forward(self, batch: Batch, mode: str,
                rng: np.random.Generator | None = None) -> ForwardOut:
        cfg = self.config
        h, c_bn_in = self.bn_in.forward(batch.features, mode)
        h, c_do_in = nn.dropout_forward(h, cfg.dropout_input, mode, rng)
        h, c_pool = nn.max_pool_time_forward(h, batch.valid_len)
        h, c_fc1 = nn.fc_forward(h, self.w1, self.b1)
        h, c_bn1 = self.bn1.forward(h, mode)
        h, c_r1 = nn.relu_forward(h)
        h, c_do1 = nn.dropout_forward(h, cfg.dropout_fc1, mode, rng)
        h, c_fc2 = nn.fc_forward(h, self.w2, self.b2)
        h, c_bn2 = self.bn2.forward(h, mode)
        h, c_r2 = nn.relu_forward(h)
        logits, c_out = nn.fc_forward(h, self.wo, self.bo)
        self._cache = (c_bn_in, c_do_in, c_pool, c_fc1, c_bn1, c_r1, c_do1,
                       c_fc2, c_bn2, c_r2, c_out)
        return ForwardOut(logits)

    def backward(self, dlogits: Array) -> None:
        (c_bn_in, c_do_in, c_pool, c_fc1, c_bn1, c_r1, c_do1,
         c_fc2, c_bn2, c_r2, c_out) = self._cache
        d = nn.fc_backward(dlogits, c_out)
        d = nn.relu_backward(d, c_r2)
        d = self.bn2.backward(d, c_bn2)
        d = nn.fc_backward(d, c_fc2)
        d = nn.dropout_backward(d, c_do1)
        d = nn.relu_backward(d, c_r1)
        d = self.bn1.backward(d, c_bn1)
        d = nn.fc_backward(d, c_fc1)
        d = nn.max_pool_time_backward(d, c_pool)
        d = nn.dropout_backward(d, c_do_in)
        self.bn_in.backward(d, c_bn_in)


class SimpleLSTMModel:
    kind = "lstm"

    def __init__(self, config: SimpleLSTMConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.bn_in = nn.BatchNorm(config.feature_size, "bn_in")
        stack_cfg = lstm_mod.LSTMStackConfig(
            num_layers=config.num_layers, hidden_size=config.hidden_size,
            max_frames=config.max_frames, residual=config.residual,
            dropout_p=config.dropout)
        self.stack = lstm_mod.LSTMStack(stack_cfg, config.feature_size, rng)
        s = 1.0 / np.sqrt(config.hidden_size)
        self.wo = Parameter("out.w",
                            rng.uniform(-s, s, (config.hidden_size, config.num_classes)))
        self.bo = Parameter("out.b", np.zeros(config.num_classes))
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return self.bn_in.parameters() + self.stack.parameters() + [self.wo, self.bo]

    def buffers(self) -> dict[str, Array]:
        return self.bn_in.buffers()

    def load_buffers(self, buffers: dict[str, Array]) -> None:
        self.bn_in.load_buffers(buffers)

    def forward(self, batch: Batch, mode: str,
                rng: np.random.Generator | None = None) -> ForwardOut:
        h, c_bn = self.bn_in.forward(batch.features, mode)
        seq, tape = self.stack.forward(h, mode, rng)
        agg, w = lstm_mod.weighted_output_sum(seq, batch.valid_len)
        logits, c_out = nn.fc_forward(agg, self.wo, self.bo)
        self._cache = (c_bn, tape, w, c_out)
        return ForwardOut(logits)

    def backward(self, dlogits: Array) -> None:
        c_bn, tape, w, c_out = self._cache
        d = nn.fc_backward(dlogits, c_out)
        d = lstm_mod.weighted_output_sum_backward(d, w)
        d = self.stack.backward(d, tape)
        self.bn_in.backward(d, c_bn)


class LSTMMoEModel:
    kind = "lstm_moe"

    def __init__(self, config: LSTMMoEConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.bn_in = nn.BatchNorm(config.feature_size, "bn_in")
        one_layer = dict(num_layers=1, hidden_size=config.lstm_hidden,
                         max_frames=config.max_frames, residual=False,
                         dropout_p=config.dropout)
        self.lstm1 = lstm_mod.LSTMStack(
            lstm_mod.LSTMStackConfig(**one_layer), config.feature_size, rng,
            name="lstm_a")
        self.moe_params = moe_mod.init_moe_params(rng, config.moe)
        self.lstm2 = lstm_mod.LSTMStack(
            lstm_mod.LSTMStackConfig(**one_layer), config.lstm_hidden, rng,
            name="lstm_b")
        s = 1.0 / np.sqrt(config.lstm_hidden)
        self.wo = Parameter("out.w",
                            rng.uniform(-s, s, (config.lstm_hidden, config.num_classes)))
        self.bo = Parameter("out.b", np.zeros(config.num_classes))
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return (self.bn_in.parameters() + self.lstm1.parameters()
                + self.moe_params.parameters() + self.lstm2.parameters()
                + [self.wo, self.bo])

    def buffers(self) -> dict[str, Array]:
        return self.bn_in.buffers()

    def load_buffers(self, buffers: dict[str, Array]) -> None:
        self.bn_in.load_buffers(buffers)

    def forward(self, batch: Batch, mode: str,
                rng: np.random.Generator | None = None) -> ForwardOut:
        cfg = self.config
        h, c_bn = self.bn_in.forward(batch.features, mode)
        seq1, tape1 = self.lstm1.forward(h, mode, rng)
        moe_out, aux, c_moe = moe_mod.moe_over_time(
            seq1, batch.valid_len, cfg.moe, self.moe_params, mode, rng)
        seq2, tape2 = self.lstm2.forward(moe_out, mode, rng)
        agg, w = lstm_mod.weighted_output_sum(seq2, batch.valid_len)
        logits, c_out = nn.fc_forward(agg, self.wo, self.bo)
        self._cache = (c_bn, tape1, c_moe, tape2, w, c_out)
        return ForwardOut(logits, aux)

    def backward(self, dlogits: Array) -> None:
        c_bn, tape1, c_moe, tape2, w, c_out = self._cache
        d = nn.fc_backward(dlogits, c_out)
        d = lstm_mod.weighted_output_sum_backward(d, w)
        d = self.lstm2.backward(d, tape2)
        d = moe_mod.moe_over_time_backward(d, c_moe, self.config.moe,
                                           self.moe_params)
        d = self.lstm1.backward(d, tape1)
        self.bn_in.backward(d, c_bn)


Model = BoFModel | SimpleLSTMModel | LSTMMoEModel

MODEL_KINDS = {
    "bof": (BoFConfig, BoFModel),
    "lstm": (SimpleLSTMConfig, SimpleLSTMModel),
    "lstm_moe": (LSTMMoEConfig, LSTMMoEModel),
}


def build_model(kind: str, config, rng: np.random.Generator) -> Model:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    return MODEL_KINDS[kind][1](config, rng)


# ---------------------------------------------------------------------------
# training / prediction
# ---------------------------------------------------------------------------

def _first_non_finite(model: Model, logits: Array) -> str:
    if not np.all(np.isfinite(logits)):
        return "logits"
    for p in model.parameters():
        if not np.all(np.isfinite(p.value)):
            return p.name
        if not np.all(np.isfinite(p.grad)):
            return f"{p.name}.grad"
    return "loss"


def train_step(model: Model, batch: Batch, optimizer: RMSProp,
               rng: np.random.Generator,
               penalty: Array | None = None) -> dict[str, float]:
    """One optimization step: zero grads, forward, sigmoid cross-entropy
    (optionally class-penalized, plus any auxiliary losses), backward,
    RMSProp update. Advances optimizer.samples_seen by the batch size."""
    nn.zero_grads(model.parameters())
    out = model.forward(batch, "train", rng)
    ce, dlogits = nn.sigmoid_cross_entropy(out.logits, batch.labels, penalty)
    total = ce + sum(out.aux_losses.values())
    if not np.isfinite(total):
        raise NonFiniteLossError(_first_non_finite(model, out.logits))
    model.backward(dlogits)
    optimizer.step()
    optimizer.samples_seen += batch.size
    losses = {"total": total, "ce": ce}
    losses.update(out.aux_losses)
    return losses


def predict(model: Model, batch: Batch) -> Array:
    """Class probabilities sigmoid(logits) in inference mode: dropout off,
    batch-norm running statistics, noise-free gating. Deterministic.

    Outputs are kept strictly inside (0, 1): float64 sigmoid saturates to
    exactly 0/1 around |z| > 37, and saturated entries are exact ties either
    way, so the clamp changes no ranking."""
    out = model.forward(batch, "infer")
    return np.clip(nn.sigmoid(out.logits), 1e-12, 1.0 - 1e-12)


def evaluate_model(model: Model, records: list[FrameRecord], num_classes: int,
                   max_frames: int, skip_frames: int, batch_size: int = 64,
                   top_n_per_video: int = 20):
    """Run inference over a corpus (file order) and score it.

    Returns (EvalResult, PredictionSet)."""
    if not records:
        raise ValueError("cannot evaluate on an empty corpus")
    ids: list[str] = []
    labels: list[set[int]] = []
    score_blocks = []
    by_id = {rec.video_id: rec for rec in records}
    for batch in make_batches(records, num_classes, max_frames, skip_frames,
                              batch_size):
        score_blocks.append(predict(model, batch))
        ids.extend(batch.video_ids)
        labels.extend(by_id[v].labels for v in batch.video_ids)
    scores = np.vstack(score_blocks)
    preds = metrics_mod.PredictionSet(ids, scores, labels)
    return metrics_mod.evaluate(preds, top_n_per_video), preds


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_to_json(config) -> str:
    return json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))


def _config_from_dict(kind: str, d: dict):
    if kind == "lstm_moe":
        d = dict(d)
        d["moe"] = MoEConfig(**d["moe"])
    cfg_cls = MODEL_KINDS[kind][0]
    return cfg_cls(**d)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_array(a: Array) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def _pack_named_tensors(tensors: dict[str, Array]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, a in tensors.items():
        parts.append(_pack_str(name))
        parts.append(_pack_array(a))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint while reading {what} at offset {self.offset}"
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def read_str(self, what: str) -> str:
        (n,) = self.unpack("<H", what)
        return self.take(n, what).decode("utf-8")

    def read_array(self, what: str) -> Array:
        (ndim,) = self.unpack("<B", what)
        shape = self.unpack(f"<{ndim}I", what) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def read_named_tensors(self, what: str) -> dict[str, Array]:
        (n,) = self.unpack("<I", what)
        return {self.read_str(what): self.read_array(what) for _ in range(n)}


def save_checkpoint(path, model: Model, optimizer: RMSProp,
                    rng: np.random.Generator) -> None:
    params = {p.name: p.value for p in model.parameters()}
    buffers = model.buffers()
    opt_block = struct.pack(
        "<dddd", optimizer.base_lr, optimizer.decay_rate, optimizer.epsilon,
        optimizer.lr_decay_factor)
    opt_block += struct.pack("<QQ", optimizer.lr_decay_every_samples,
                             optimizer.samples_seen)
    opt_block += _pack_named_tensors(optimizer.acc)
    rng_json = json.dumps(rng.bit_generator.state, sort_keys=True)
    blob = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        _pack_str(model.kind),
        _pack_str(_config_to_json(model.config)),
        _pack_named_tensors(params),
        _pack_named_tensors(buffers),
        opt_block,
        _pack_str(rng_json),
    ])
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path, expected_kind: str | None = None):
    """Returns (model, optimizer, rng) restored so that both prediction and
    continued training match the saved run bit-for-bit."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = reader.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    kind = reader.read_str("kind")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(
            f"{path}: checkpoint kind {kind!r} does not match expected "
            f"{expected_kind!r}")
    config = _config_from_dict(kind, json.loads(reader.read_str("config")))
    params = reader.read_named_tensors("parameters")
    buffers = reader.read_named_tensors("buffers")
    base_lr, decay_rate, epsilon, lr_decay_factor = reader.unpack(
        "<dddd", "optimizer hyperparameters")
    lr_decay_every, samples_seen = reader.unpack("<QQ", "optimizer counters")
    acc = reader.read_named_tensors("optimizer accumulators")
    rng_state = json.loads(reader.read_str("rng state"))

    model = build_model(kind, config, np.random.default_rng(0))
    model_params = {p.name: p for p in model.parameters()}
    if set(model_params) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match config")
    for name, value in params.items():
        target = model_params[name]
        if target.value.shape != value.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {value.shape}, "
                f"expected {target.value.shape}")
        np.copyto(target.value, value)
    model.load_buffers(buffers)

    optimizer = RMSProp(model.parameters(), base_lr=base_lr,
                        decay_rate=decay_rate, epsilon=epsilon,
                        lr_decay_every_samples=lr_decay_every,
                        lr_decay_factor=lr_decay_factor)
    optimizer.samples_seen = int(samples_seen)
    for name, value in acc.items():
        if name not in optimizer.acc:
            raise CheckpointError(f"{path}: stray accumulator {name!r}")
        np.copyto(optimizer.acc[name], value)

    rng = np.random.default_rng(0)
    rng.bit_generator.state = rng_state
    return model, optimizer, rng

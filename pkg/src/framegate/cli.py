"""Command-line entry point for reproducible experiments.

Commands: gen-data, train, eval, gradcheck, stats. Every command with
identical flags and seed produces byte-identical primary outputs (dataset
files, checkpoints, logs, reports); wall-clock timing goes to the console
only so persisted logs stay reproducible.

Exit codes: 0 success, 1 usage error, 2 runtime failure (NaN, I/O, bad
files), 3 verification failure (gradcheck above tolerance).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import dataio, metrics, models, nn_core
from .dataio import SyntheticSpec, read_records, training_batches, write_records
from .moe import MoEConfig
from .nn_core import NonFiniteLossError, grad_check

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

# base learning rate and decay interval (in samples) for each architecture
LR_DEFAULTS = {
    "bof": (1e-4, 20_000_000),
    "lstm": (2e-4, 10_000_000),
    "lstm_moe": (2e-4, 10_000_000),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise UsageError(message)


@dataclass
class ExperimentConfig:
    """Fully-resolved training run description; echoed to the run directory
    so the run can be reproduced from the file alone."""

    model: str
    data_dir: str
    out_dir: str
    seed: int = 0
    steps: int = 1000
    batch_size: int = 32
    eval_every: int = 100
    max_frames: int = 90
    skip_frames: int = 20
    base_lr: float | None = None
    lr_decay_every_samples: int | None = None
    lr_decay_factor: float = 0.1
    penalty: str = "none"           # none | inverse-frequency
    penalty_cap: float = 100.0
    top_n_per_video: int = 20
    eval_batch_size: int = 64
    target_hit1: float | None = None
    target_gap: float | None = None
    resume: str | None = None
    # bag-of-frames
    fc_hidden: int = 4096
    dropout_input: float = 0.3
    dropout_fc1: float = 0.3
    # stacked LSTM
    num_layers: int = 2
    hidden_size: int = 1024
    residual: bool = False
    lstm_dropout: float = 0.4
    # LSTM + mixture of experts
    lstm_hidden: int = 512
    experts: int = 64
    active_experts: int = 4
    expert_hidden: int = 1024
    w_importance: float = 0.1
    w_load: float = 0.1

    def validate(self) -> None:
        if self.model not in models.MODEL_KINDS:
            raise UsageError(f"unknown model {self.model!r}")
        if self.steps < 0 or self.batch_size < 1 or self.max_frames < 1:
            raise UsageError("steps must be >= 0; batch size and max frames >= 1")
        if self.skip_frames < 0:
            raise UsageError("skip_frames must be >= 0")
        if self.penalty not in ("none", "inverse-frequency"):
            raise UsageError(f"unknown penalty mode {self.penalty!r}")

    def resolved(self) -> "ExperimentConfig":
        lr, every = LR_DEFAULTS[self.model]
        if self.base_lr is None:
            self.base_lr = lr
        if self.lr_decay_every_samples is None:
            self.lr_decay_every_samples = every
        return self


def model_config_for(cfg: ExperimentConfig, num_classes: int,
                     feature_size: int):
    if cfg.model == "bof":
        return models.BoFConfig(
            num_classes=num_classes, feature_size=feature_size,
            max_frames=cfg.max_frames, fc_hidden=cfg.fc_hidden,
            dropout_input=cfg.dropout_input, dropout_fc1=cfg.dropout_fc1)
    if cfg.model == "lstm":
        return models.SimpleLSTMConfig(
            num_classes=num_classes, feature_size=feature_size,
            max_frames=cfg.max_frames, num_layers=cfg.num_layers,
            hidden_size=cfg.hidden_size, residual=cfg.residual,
            dropout=cfg.lstm_dropout)
    return models.LSTMMoEConfig(
        num_classes=num_classes, feature_size=feature_size,
        max_frames=cfg.max_frames, lstm_hidden=cfg.lstm_hidden,
        dropout=cfg.lstm_dropout,
        moe=MoEConfig(n=cfg.experts, k=cfg.active_experts,
                      in_size=cfg.lstm_hidden, out_size=cfg.lstm_hidden,
                      expert_hidden=cfg.expert_hidden,
                      w_importance=cfg.w_importance, w_load=cfg.w_load))


def derive_seeds(seed: int) -> tuple[int, int, int]:
    """Three independent integer seeds (init, training noise, data order)."""
    root = np.random.default_rng(seed)
    a, b, c = root.integers(0, 2 ** 63 - 1, size=3)
    return int(a), int(b), int(c)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes,
        num_videos=args.videos,
        frames_range=(args.frames_min, args.frames_max),
        feature_size=args.feature_size,
        labels_per_video_range=(args.labels_min, args.labels_max),
        class_frequency_exponent=args.imbalance_exponent,
        noise_scale=args.noise_scale,
        seed=args.seed,
    )
    spec.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    records = dataio.generate_synthetic(spec)
    if not records:
        print("warning: generated an empty dataset (0 videos)", file=sys.stderr)

    n_val = args.val_count
    n_test = args.test_count
    if n_val + n_test > len(records):
        raise UsageError("val-count + test-count exceed the video count")
    n_train = len(records) - n_val - n_test
    splits = {
        "train": records[:n_train],
        "validate": records[n_train:n_train + n_val],
        "test": records[n_train + n_val:],
    }
    for name, recs in splits.items():
        write_records(recs, out / f"{name}.fgr", spec.num_classes,
                      spec.feature_size)
    with open(out / "dataset.json", "w", encoding="utf-8") as fh:
        meta = asdict(spec)
        meta["splits"] = {k: len(v) for k, v in splits.items()}
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"wrote {', '.join(f'{len(v)} {k}' for k, v in splits.items())} "
          f"records to {out}")
    _print_stats(splits["train"], spec.num_classes)
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------

def _print_stats(records, num_classes: int, file=None) -> None:
    file = file or sys.stdout
    stats = dataio.label_stats(records, num_classes)
    print("label  count  percent", file=file)
    for c in range(num_classes):
        print(f"{c:<6d} {stats.counts[c]:<6d} {stats.percentages[c]:.4f}",
              file=file)
    total = int(stats.counts.sum())
    ratio = stats.max_min_ratio()
    print(f"total_labels={total} max_min_ratio="
          f"{'nan' if np.isnan(ratio) else f'{ratio:.4f}'}", file=file)
    print("coverage_rank cumulative_percent", file=file)
    for rank, cov in enumerate(stats.cumulative_coverage, start=1):
        print(f"{rank:<13d} {cov * 100.0:.1f}", file=file)


def cmd_stats(args) -> int:
    corpus = read_records(args.data)
    _print_stats(corpus.records, corpus.num_classes)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_split(data_dir: str, name: str, required: bool):
    path = Path(data_dir) / f"{name}.fgr"
    if not path.exists():
        if required:
            raise FileNotFoundError(f"missing dataset file {path}")
        return None
    return read_records(path)


def cmd_train(args) -> int:
    cfg = ExperimentConfig(**{f.name: getattr(args, f.name)
                              for f in fields(ExperimentConfig)})
    cfg.validate()
    cfg.resolved()

    train = _load_split(cfg.data_dir, "train", required=True)
    if not train.records:
        raise UsageError("training split is empty")
    val = _load_split(cfg.data_dir, "validate", required=False)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")

    init_seed, noise_seed, data_seed = derive_seeds(cfg.seed)
    if cfg.resume:
        model, opt, rng = models.load_checkpoint(cfg.resume,
                                                 expected_kind=cfg.model)
        if (model.config.num_classes != train.num_classes
                or model.config.feature_size != train.feature_size):
            raise UsageError(
                "checkpoint was trained with different num_classes or "
                "feature_size than this dataset")
        start_step = opt.samples_seen // cfg.batch_size
    else:
        mcfg = model_config_for(cfg, train.num_classes, train.feature_size)
        model = models.build_model(cfg.model, mcfg,
                                   np.random.default_rng(init_seed))
        opt = nn_core.RMSProp(model.parameters(), base_lr=cfg.base_lr,
                              lr_decay_every_samples=cfg.lr_decay_every_samples,
                              lr_decay_factor=cfg.lr_decay_factor)
        rng = np.random.default_rng(noise_seed)
        start_step = 0

    log_path = out / "train.log"
    log_file = open(log_path, "a" if cfg.resume else "w", encoding="utf-8")
    t0 = time.monotonic()

    def log(line: str) -> None:
        log_file.write(line + "\n")
        log_file.flush()
        print(f"{line} walltime={time.monotonic() - t0:.2f}s")

    penalty = None
    if cfg.penalty == "inverse-frequency":
        counts = dataio.label_stats(train.records, train.num_classes).counts
        penalty = nn_core.penalty_from_counts(counts, cfg.penalty_cap)
        log(f"penalty=inverse-frequency cap={cfg.penalty_cap:g} "
            f"c_min={penalty.min():.4f} c_max={penalty.max():.4f} "
            f"c_mean={penalty.mean():.4f}")

    def run_eval(step: int, mean_loss: float) -> tuple[float, float]:
        lr = opt.learning_rate()
        if val is None or not val.records:
            log(f"step={step} samples={opt.samples_seen} "
                f"loss={mean_loss:.6f} lr={lr:.8g}")
            return float("nan"), float("nan")
        result, _ = models.evaluate_model(
            model, val.records, val.num_classes, cfg.max_frames,
            cfg.skip_frames, cfg.eval_batch_size, cfg.top_n_per_video)
        log(f"step={step} samples={opt.samples_seen} loss={mean_loss:.6f} "
            f"hit1={result.hit_at_1:.6f} gap={result.gap:.6f} lr={lr:.8g}")
        return result.hit_at_1, result.gap

    if start_step >= cfg.steps:
        if start_step > 0:
            log(f"resume: checkpoint already at step {start_step}, "
                f"target {cfg.steps}; nothing to do")
        models.save_checkpoint(out / "model.ckpt", model, opt, rng)
        log_file.close()
        return EXIT_OK

    stream = training_batches(train.records, train.num_classes,
                              cfg.max_frames, cfg.skip_frames, cfg.batch_size,
                              seed=data_seed, start_step=start_step)
    loss_sum, loss_n = 0.0, 0
    for step in range(start_step + 1, cfg.steps + 1):
        batch = next(stream)
        losses = models.train_step(model, batch, opt, rng, penalty)
        loss_sum += losses["total"]
        loss_n += 1
        at_eval = (cfg.eval_every > 0 and step % cfg.eval_every == 0)
        if at_eval or step == cfg.steps:
            hit1, gap_v = run_eval(step, loss_sum / loss_n)
            loss_sum, loss_n = 0.0, 0
            if (cfg.target_hit1 is not None and cfg.target_gap is not None
                    and hit1 >= cfg.target_hit1 and gap_v >= cfg.target_gap):
                log(f"early_stop=1 step={step}")
                break

    models.save_checkpoint(out / "model.ckpt", model, opt, rng)
    log_file.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model, _opt, _rng = models.load_checkpoint(args.ckpt)
    corpus = read_records(args.data)
    if (model.config.num_classes != corpus.num_classes
            or model.config.feature_size != corpus.feature_size):
        raise UsageError(
            "checkpoint and dataset disagree on num_classes or feature_size")
    result, preds = models.evaluate_model(
        model, corpus.records, corpus.num_classes, model.config.max_frames,
        args.skip_frames, args.batch_size, args.top_n)
    print(f"n={result.n_samples} hit1={result.hit_at_1:.6f} "
          f"gap={result.gap:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = metrics.per_class_report(preds)
        with open(out / "per_class.txt", "w", encoding="utf-8") as fh:
            fh.write("class positives top1_frequency average_precision\n")
            for c in range(preds.num_classes):
                ap = report.ap.get(c)
                fh.write(f"{c} {report.positive_counts[c]} "
                         f"{report.top1_frequency[c]:.6f} "
                         f"{'absent' if ap is None else f'{ap:.6f}'}\n")
        metrics.write_predictions(preds.video_ids, preds.scores,
                                  out / "predictions.txt")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _miniature_setup(kind: str, seed: int):
    """A tiny randomized batch + model of the given kind, suitable for
    finite-difference verification."""
    rng = np.random.default_rng(seed)
    b, t, f, c = 3, 4, 5, 3
    features = rng.standard_normal((b, t, f))
    valid_len = np.array([t, t - 1, 2])
    mask = np.arange(t)[None, :] < valid_len[:, None]
    features *= mask[:, :, None]
    labels = (rng.random((b, c)) < 0.4).astype(np.float64)
    labels[0, 0] = 1.0  # at least one positive
    batch = dataio.Batch(features, labels, valid_len,
                         [f"g{i}" for i in range(b)])
    if kind == "bof":
        mcfg = models.BoFConfig(num_classes=c, feature_size=f, max_frames=t,
                                fc_hidden=6)
    elif kind == "lstm":
        mcfg = models.SimpleLSTMConfig(num_classes=c, feature_size=f,
                                       max_frames=t, num_layers=2,
                                       hidden_size=5, residual=True)
    else:
        mcfg = models.LSTMMoEConfig(
            num_classes=c, feature_size=f, max_frames=t, lstm_hidden=4,
            moe=MoEConfig(n=3, k=2, in_size=4, out_size=4, expert_hidden=5))
    model = models.build_model(kind, mcfg, np.random.default_rng(seed + 1))
    return model, batch


def model_gradcheck(kind: str, seed: int = 0, tolerance: float = 1e-4):
    """Finite-difference check of a full miniature model of the given kind
    (training loss including any auxiliary terms, fixed dropout masks and
    gate noise via closure reseeding)."""
    model, batch = _miniature_setup(kind, seed)

    def loss_fn() -> float:
        rng = np.random.default_rng(seed + 2)
        out = model.forward(batch, "train", rng)
        ce, dlogits = nn_core.sigmoid_cross_entropy(out.logits, batch.labels)
        model.backward(dlogits)
        return ce + sum(out.aux_losses.values())

    # end-to-end losses are O(1), so h=1e-4 keeps the finite-difference
    # roundoff noise below the relative-error floor on near-zero gradients
    return grad_check(loss_fn, model.parameters(), h=1e-4,
                      tolerance=tolerance, max_coords_per_param=40,
                      rng=np.random.default_rng(seed + 3))


def cmd_gradcheck(args) -> int:
    kinds = list(models.MODEL_KINDS) if args.model == "all" else [args.model]
    failed = False
    for kind in kinds:
        report = model_gradcheck(kind, seed=args.seed,
                                 tolerance=args.tolerance)
        status = "PASS" if report.passed else "FAIL"
        print(f"model={kind} status={status} worst={report.worst_param} "
              f"rel_err={report.max_rel_error:.3e} "
              f"tolerance={report.tolerance:g}")
        for name in report.failures():
            print(f"  FAIL param={name} rel_err={report.per_param[name]:.3e}")
            failed = True
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="framegate",
                     description="frame-sequence classification experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--classes", type=int, default=16)
    g.add_argument("--videos", type=int, default=2000)
    g.add_argument("--frames-min", type=int, default=30)
    g.add_argument("--frames-max", type=int, default=60)
    g.add_argument("--feature-size", type=int, default=64)
    g.add_argument("--labels-min", type=int, default=1)
    g.add_argument("--labels-max", type=int, default=2)
    g.add_argument("--imbalance-exponent", type=float, default=0.0)
    g.add_argument("--noise-scale", type=float, default=0.5)
    g.add_argument("--val-count", type=int, default=0,
                   help="videos held out for the validate split")
    g.add_argument("--test-count", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    parser.train_parser = t
    t.add_argument("--config", default=None,
                   help="JSON experiment config (flags override)")
    t.add_argument("--model", choices=sorted(models.MODEL_KINDS),
                   default="bof")
    t.add_argument("--data-dir", default=None,
                   help="directory with train.fgr / validate.fgr")
    t.add_argument("--out-dir", "--out", dest="out_dir", default=None,
                   help="run output directory")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--eval-every", type=int, default=100)
    t.add_argument("--max-frames", type=int, default=90)
    t.add_argument("--skip-frames", type=int, default=20)
    t.add_argument("--base-lr", type=float, default=None)
    t.add_argument("--lr-decay-every-samples", type=int, default=None)
    t.add_argument("--lr-decay-factor", type=float, default=0.1)
    t.add_argument("--penalty", choices=["none", "inverse-frequency"],
                   default="none")
    t.add_argument("--penalty-cap", type=float, default=100.0)
    t.add_argument("--top-n-per-video", type=int, default=20)
    t.add_argument("--eval-batch-size", type=int, default=64)
    t.add_argument("--target-hit1", type=float, default=None,
                   help="stop early once hit@1 and gap targets are both met")
    t.add_argument("--target-gap", type=float, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--fc-hidden", type=int, default=4096)
    t.add_argument("--dropout-input", type=float, default=0.3)
    t.add_argument("--dropout-fc1", type=float, default=0.3)
    t.add_argument("--num-layers", type=int, default=2)
    t.add_argument("--hidden-size", type=int, default=1024)
    t.add_argument("--residual", action="store_true", default=False)
    t.add_argument("--lstm-dropout", type=float, default=0.4)
    t.add_argument("--lstm-hidden", type=int, default=512)
    t.add_argument("--experts", type=int, default=64)
    t.add_argument("--active-experts", type=int, default=4)
    t.add_argument("--expert-hidden", type=int, default=1024)
    t.add_argument("--w-importance", type=float, default=0.1)
    t.add_argument("--w-load", type=float, default=0.1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="dataset file (.fgr)")
    e.add_argument("--out", default=None,
                   help="directory for per-class report and predictions export")
    e.add_argument("--skip-frames", type=int, default=20)
    e.add_argument("--batch-size", type=int, default=64)
    e.add_argument("--top-n", type=int, default=20)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference model checks")
    gc.add_argument("--model", choices=["all", *sorted(models.MODEL_KINDS)],
                    default="all")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("stats", help="label statistics of a dataset file")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_stats)
    return parser


def _apply_config_file(argv: list[str], parser: _Parser) -> list[str]:
    """Load --config JSON (if present) as parser defaults so explicit flags
    still win."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise UsageError("--config needs a path")
    with open(argv[idx + 1], "r", encoding="utf-8") as fh:
        loaded = json.load(fh)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(loaded) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for action in parser.train_parser._actions:
        if action.dest in loaded:
            action.default = loaded[action.dest]
    return argv


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and argv[0] == "train":
            _apply_config_file(argv, parser)
        args = parser.parse_args(argv)
        missing = [name for name in ("data_dir", "out_dir")
                   if hasattr(args, name) and getattr(args, name) is None]
        if missing:
            raise UsageError(f"missing required option(s): "
                             f"{', '.join('--' + m.replace('_', '-') for m in missing)}")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

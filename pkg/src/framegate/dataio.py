"""Frame-record storage, synthetic corpus generation, and batching.

On-disk record format (little-endian), extension ``.fgr``:

    magic "FGR1" | u32 num_classes | u32 feature_size
    per record:
        u16 id_len | id bytes (utf-8)
        u16 num_labels | u32 label * num_labels (sorted ascending)
        u16 num_frames | f32 * feature_size * num_frames (row-major)

Features are stored as 32-bit floats; truncation anywhere raises
:class:`FormatError` naming the byte offset. Numerics elsewhere in the
package are float64; records keep float32 frames so that a write/read
round-trip is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"FGR1"
MAX_FRAMES_PER_RECORD = 360

RGB_SIZE = 1024
AUDIO_SIZE = 128
DEFAULT_FEATURE_SIZE = RGB_SIZE + AUDIO_SIZE


class FormatError(ValueError):
    """Malformed record file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class RecordValidationError(ValueError):
    """A record violates the corpus invariants; carries its index."""

    def __init__(self, message: str, index: int):
        self.index = index
        super().__init__(f"record {index}: {message}")


@dataclass
class FrameRecord:
    """One video: its id, ground-truth label set, and per-frame features."""

    video_id: str
    labels: set[int]
    frames: np.ndarray  # [num_frames, feature_size] float32

    def validate(self, num_classes: int, feature_size: int) -> None:
        if not self.video_id:
            raise ValueError("empty video_id")
        if not self.labels:
            raise ValueError("label set is empty")
        if len(self.labels) != len(set(self.labels)):
            raise ValueError("duplicate labels")
        for lab in self.labels:
            if not 0 <= lab < num_classes:
                raise ValueError(f"label {lab} outside [0, {num_classes})")
        if self.frames.ndim != 2 or self.frames.shape[1] != feature_size:
            raise ValueError(
                f"frames shape {self.frames.shape} != (*, {feature_size})"
            )
        n = self.frames.shape[0]
        if not 1 <= n <= MAX_FRAMES_PER_RECORD:
            raise ValueError(
                f"frame count {n} outside [1, {MAX_FRAMES_PER_RECORD}]"
            )
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("non-finite feature values")


@dataclass
class RecordCorpus:
    """Records plus the header metadata they were stored with."""

    records: list[FrameRecord]
    num_classes: int
    feature_size: int

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Batch:
    """Fixed-shape training batch.

    ``features`` is [batch, max_frames, feature_size] float64 with padded
    positions exactly zero; ``labels`` is a binary [batch, num_classes]
    matrix; ``valid_len[i]`` counts the frames of sample i that survived
    skipping and truncation (always >= 1). ``video_ids`` keeps the sample
    identity for evaluation. Batches are immutable once emitted.
    """

    features: np.ndarray
    labels: np.ndarray
    valid_len: np.ndarray
    video_ids: list[str]

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass
class SyntheticSpec:
    """Deterministic synthetic-corpus description.

    Class frequencies follow counts proportional to (c+1) **
    -class_frequency_exponent (exponent 0 = balanced). Every class gets a
    planted signature vector; a frame of a video labeled c is signature(c)
    plus Gaussian noise of scale ``noise_scale``, so classes are learnable.
    Identical spec + seed produces a bit-identical corpus.
    """

    num_classes: int
    num_videos: int
    frames_range: tuple[int, int]
    feature_size: int
    labels_per_video_range: tuple[int, int] = (1, 1)
    class_frequency_exponent: float = 0.0
    noise_scale: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.num_videos < 0:
            raise ValueError("num_videos must be >= 0")
        fmin, fmax = self.frames_range
        if not 1 <= fmin <= fmax <= MAX_FRAMES_PER_RECORD:
            raise ValueError(f"bad frames_range {self.frames_range}")
        lmin, lmax = self.labels_per_video_range
        if not 1 <= lmin <= lmax:
            raise ValueError(f"bad labels_per_video_range {self.labels_per_video_range}")
        if lmax > self.num_classes:
            raise ValueError(
                f"labels_per_video_range max {lmax} exceeds num_classes "
                f"{self.num_classes}"
            )
        if self.class_frequency_exponent < 0:
            raise ValueError("class_frequency_exponent must be >= 0")
        if self.feature_size < 1:
            raise ValueError("feature_size must be >= 1")


@dataclass
class LabelStats:
    counts: np.ndarray               # int64 [num_classes]
    percentages: np.ndarray          # counts / total * 100
    cumulative_coverage: np.ndarray  # cumulative share, counts sorted desc

    def max_min_ratio(self) -> float:
        """Ratio of the most to the least frequent label, over classes that
        occur at least once. NaN when nothing occurs."""
        nonzero = self.counts[self.counts > 0]
        if nonzero.size == 0:
            return float("nan")
        return float(nonzero.max() / nonzero.min())


# ---------------------------------------------------------------------------
# reader / writer
# ---------------------------------------------------------------------------

def write_records(records: list[FrameRecord], path, num_classes: int,
                  feature_size: int) -> int:
    """Write a corpus; returns the number of records written.

    Records are validated against the header invariants first; a violation
    is rejected with the index of the offending record.
    """
    for i, rec in enumerate(records):
        try:
            rec.validate(num_classes, feature_size)
        except ValueError as exc:
            raise RecordValidationError(str(exc), i) from exc
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", num_classes, feature_size))
        for rec in records:
            ident = rec.video_id.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            labels = sorted(rec.labels)
            fh.write(struct.pack("<H", len(labels)))
            fh.write(struct.pack(f"<{len(labels)}I", *labels))
            frames = np.ascontiguousarray(rec.frames, dtype="<f4")
            fh.write(struct.pack("<H", frames.shape[0]))
            fh.write(frames.tobytes())
    return len(records)


def read_records(path) -> RecordCorpus:
    """Read a corpus back, validating format and record invariants."""
    with open(path, "rb") as fh:
        data = fh.read()

    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise FormatError(f"truncated stream while reading {what}", offset)
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    offset = 4
    num_classes, feature_size = struct.unpack("<II", take(8, "header"))

    records: list[FrameRecord] = []
    while offset < len(data):
        rec_offset = offset
        (id_len,) = struct.unpack("<H", take(2, "id length"))
        video_id = take(id_len, "video id").decode("utf-8")
        (num_labels,) = struct.unpack("<H", take(2, "label count"))
        labels = set(struct.unpack(f"<{num_labels}I",
                                   take(4 * num_labels, "labels")))
        (num_frames,) = struct.unpack("<H", take(2, "frame count"))
        raw = take(4 * feature_size * num_frames, "frame data")
        frames = np.frombuffer(raw, dtype="<f4").reshape(num_frames, feature_size)
        rec = FrameRecord(video_id, labels, frames.copy())
        try:
            rec.validate(num_classes, feature_size)
        except ValueError as exc:
            raise FormatError(f"invalid record: {exc}", rec_offset) from exc
        records.append(rec)
    return RecordCorpus(records, num_classes, feature_size)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def class_signatures(spec: SyntheticSpec) -> np.ndarray:
    """The planted per-class signature vectors [num_classes, feature_size]."""
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    return rng.standard_normal((spec.num_classes, spec.feature_size))


def generate_synthetic(spec: SyntheticSpec) -> list[FrameRecord]:
    spec.validate()
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    signatures = rng.standard_normal((spec.num_classes, spec.feature_size))

    weights = (np.arange(spec.num_classes) + 1.0) ** (-spec.class_frequency_exponent)
    weights /= weights.sum()

    fmin, fmax = spec.frames_range
    lmin, lmax = spec.labels_per_video_range
    records: list[FrameRecord] = []
    for v in range(spec.num_videos):
        n_labels = int(rng.integers(lmin, lmax + 1))
        labels = rng.choice(spec.num_classes, size=n_labels, replace=False,
                            p=weights)
        n_frames = int(rng.integers(fmin, fmax + 1))
        # each frame shows one of the video's labels
        which = rng.integers(0, n_labels, size=n_frames)
        noise = rng.standard_normal((n_frames, spec.feature_size))
        frames = signatures[labels[which]] + spec.noise_scale * noise
        records.append(FrameRecord(
            video_id=f"syn{v:07d}",
            labels=set(int(c) for c in labels),
            frames=frames.astype(np.float32),
        ))
    return records


def label_stats(records: list[FrameRecord], num_classes: int) -> LabelStats:
    counts = np.zeros(num_classes, dtype=np.int64)
    for rec in records:
        for lab in rec.labels:
            counts[lab] += 1
    total = counts.sum()
    if total == 0:
        return LabelStats(counts, np.zeros(num_classes), np.zeros(0))
    percentages = counts / total * 100.0
    coverage = np.cumsum(np.sort(counts)[::-1]) / total
    return LabelStats(counts, percentages, coverage)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def _clip_frames(frames: np.ndarray, max_frames: int, skip_frames: int):
    """Drop the first min(skip, len-1) frames (a sequence never becomes
    empty), then truncate to max_frames."""
    skip = min(skip_frames, frames.shape[0] - 1)
    kept = frames[skip:skip + max_frames]
    return kept


def make_batches(records: list[FrameRecord], num_classes: int,
                 max_frames: int, skip_frames: int, batch_size: int,
                 shuffle_seed=None, drop_partial: bool = False):
    """Yield :class:`Batch` objects covering the corpus once.

    With ``shuffle_seed`` (int or seed sequence) the record order is a
    deterministic permutation; otherwise file order. ``drop_partial`` skips a
    trailing batch smaller than ``batch_size`` (used by training streams so
    that every step sees the same sample count).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    if skip_frames < 0:
        raise ValueError("skip_frames must be >= 0")

    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))

    for start in range(0, len(records), batch_size):
        idx = order[start:start + batch_size]
        if drop_partial and idx.size < batch_size:
            return
        b = idx.size
        features = np.zeros((b, max_frames, records[0].frames.shape[1]))
        labels = np.zeros((b, num_classes))
        valid_len = np.zeros(b, dtype=np.int64)
        ids = []
        for row, ri in enumerate(idx):
            rec = records[ri]
            kept = _clip_frames(rec.frames, max_frames, skip_frames)
            n = kept.shape[0]
            features[row, :n] = kept.astype(np.float64)
            valid_len[row] = n
            for lab in rec.labels:
                labels[row, lab] = 1.0
            ids.append(rec.video_id)
        yield Batch(features, labels, valid_len, ids)


def training_batches(records: list[FrameRecord], num_classes: int,
                     max_frames: int, skip_frames: int, batch_size: int,
                     seed: int, start_step: int = 0):
    """Infinite deterministic training stream.

    Epoch e is the corpus reshuffled with seed sequence (seed, e); partial
    trailing batches are dropped so every step consumes exactly
    ``batch_size`` samples. ``start_step`` fast-forwards to resume a run
    mid-epoch without replaying batches.
    """
    if batch_size > len(records):
        raise ValueError(
            f"batch_size {batch_size} exceeds corpus size {len(records)}"
        )
    per_epoch = len(records) // batch_size
    epoch = start_step // per_epoch
    skip_in_epoch = start_step % per_epoch
    while True:
        stream = make_batches(records, num_classes, max_frames, skip_frames,
                              batch_size, shuffle_seed=[seed, epoch],
                              drop_partial=True)
        for i, batch in enumerate(stream):
            if i < skip_in_epoch:
                continue
            yield batch
        skip_in_epoch = 0
        epoch += 1

import numpy as np
import pytest

from framegate.dataio import (Batch, FormatError, FrameRecord,
                              RecordValidationError, SyntheticSpec,
                              generate_synthetic, label_stats, make_batches,
                              read_records, training_batches, write_records)


def small_corpus(n=20, seed=0, num_classes=5, feature_size=8,
                 frames=(1, 6), labels=(1, 2), exponent=0.0):
    spec = SyntheticSpec(num_classes=num_classes, num_videos=n,
                         frames_range=frames, feature_size=feature_size,
                         labels_per_video_range=labels,
                         class_frequency_exponent=exponent, seed=seed)
    return spec, generate_synthetic(spec)


def records_equal(a: FrameRecord, b: FrameRecord) -> bool:
    return (a.video_id == b.video_id and a.labels == b.labels
            and a.frames.shape == b.frames.shape
            and np.array_equal(a.frames, b.frames))


# --- reader / writer ---------------------------------------------------------

def test_write_empty_corpus(tmp_path):
    path = tmp_path / "empty.fgr"
    assert write_records([], path, 7, 12) == 0
    assert path.stat().st_size == 12  # magic + two u32 header fields
    corpus = read_records(path)
    assert corpus.records == []
    assert corpus.num_classes == 7
    assert corpus.feature_size == 12


def test_single_record_round_trip(tmp_path):
    rec = FrameRecord("vid-a", {0, 2},
                      np.arange(12, dtype=np.float32).reshape(3, 4))
    path = tmp_path / "one.fgr"
    assert write_records([rec], path, 3, 4) == 1
    back = read_records(path)
    assert len(back.records) == 1
    assert records_equal(back.records[0], rec)


def test_round_trip_synthetic_corpus(tmp_path):
    spec, records = small_corpus(n=1000, seed=3, frames=(1, 4))
    path = tmp_path / "corpus.fgr"
    write_records(records, path, spec.num_classes, spec.feature_size)
    back = read_records(path).records
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert records_equal(a, b)


def test_round_trip_power_law_corpus(tmp_path):
    spec, records = small_corpus(n=300, seed=5, num_classes=30,
                                 labels=(1, 1), exponent=1.2)
    path = tmp_path / "skewed.fgr"
    write_records(records, path, spec.num_classes, spec.feature_size)
    back = read_records(path).records
    assert all(records_equal(a, b) for a, b in zip(records, back))


def test_write_rejects_invalid_record_with_index(tmp_path):
    good = FrameRecord("ok", {0}, np.zeros((2, 4), dtype=np.float32))
    bad = FrameRecord("bad", set(), np.zeros((2, 4), dtype=np.float32))
    with pytest.raises(RecordValidationError) as exc:
        write_records([good, bad], tmp_path / "x.fgr", 2, 4)
    assert exc.value.index == 1


def test_corrupted_magic(tmp_path):
    path = tmp_path / "bad.fgr"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError) as exc:
        read_records(path)
    assert exc.value.offset == 0


def test_truncated_stream_reports_offset(tmp_path):
    rec = FrameRecord("v", {0}, np.zeros((2, 4), dtype=np.float32))
    path = tmp_path / "trunc.fgr"
    write_records([rec], path, 1, 4)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(FormatError) as exc:
        read_records(path)
    assert exc.value.offset > 0


def test_truncated_header(tmp_path):
    path = tmp_path / "short.fgr"
    path.write_bytes(b"FGR1\x01\x00")
    with pytest.raises(FormatError):
        read_records(path)


# --- synthetic generation ----------------------------------------------------

def test_generate_balanced_counts():
    spec = SyntheticSpec(num_classes=4, num_videos=400, frames_range=(1, 3),
                         feature_size=6, labels_per_video_range=(1, 1),
                         class_frequency_exponent=0.0, seed=17)
    records = generate_synthetic(spec)
    counts = np.zeros(4, dtype=int)
    for rec in records:
        for lab in rec.labels:
            counts[lab] += 1
    assert counts.sum() == 400
    assert np.all(counts >= 70) and np.all(counts <= 130)


def test_generate_zero_videos():
    spec = SyntheticSpec(num_classes=4, num_videos=0, frames_range=(1, 3),
                         feature_size=6, seed=0)
    assert generate_synthetic(spec) == []


def test_generate_power_law_is_heavily_skewed():
    spec = SyntheticSpec(num_classes=100, num_videos=5000, frames_range=(1, 2),
                         feature_size=4, labels_per_video_range=(1, 1),
                         class_frequency_exponent=1.2, seed=23)
    records = generate_synthetic(spec)
    counts = np.zeros(100, dtype=int)
    for rec in records:
        for lab in rec.labels:
            counts[lab] += 1
    nonzero = counts[counts > 0]
    assert nonzero.max() / nonzero.min() > 50


def test_generate_deterministic():
    _, a = small_corpus(n=30, seed=9)
    _, b = small_corpus(n=30, seed=9)
    assert all(records_equal(x, y) for x, y in zip(a, b))


def test_generate_rejects_too_many_labels():
    spec = SyntheticSpec(num_classes=3, num_videos=5, frames_range=(1, 2),
                         feature_size=4, labels_per_video_range=(1, 5), seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(spec)


def test_signal_present():
    # a labeled video's mean frame should sit near its class signature
    from framegate.dataio import class_signatures
    spec = SyntheticSpec(num_classes=3, num_videos=50, frames_range=(20, 20),
                         feature_size=32, labels_per_video_range=(1, 1),
                         noise_scale=0.1, seed=4)
    records = generate_synthetic(spec)
    sigs = class_signatures(spec)
    for rec in records[:10]:
        lab = next(iter(rec.labels))
        centroid = rec.frames.mean(axis=0)
        dists = np.linalg.norm(sigs - centroid, axis=1)
        assert dists.argmin() == lab


# --- batching ----------------------------------------------------------------

def one_record_batch(frames, max_frames, skip):
    rec = FrameRecord("v", {0}, frames.astype(np.float32))
    return next(make_batches([rec], 2, max_frames, skip, 1))


def test_skip_then_truncate_window():
    frames = np.arange(110, dtype=np.float32)[:, None] * np.ones(3, np.float32)
    batch = one_record_batch(frames, max_frames=90, skip=20)
    assert batch.valid_len[0] == 90
    assert np.array_equal(batch.features[0, :, 0], np.arange(20, 110))


def test_short_record_keeps_one_frame():
    frames = np.arange(5, dtype=np.float32)[:, None] * np.ones(3, np.float32)
    batch = one_record_batch(frames, max_frames=90, skip=20)
    assert batch.valid_len[0] == 1
    assert batch.features[0, 0, 0] == 4.0
    assert np.all(batch.features[0, 1:] == 0.0)


def test_skip_sentinel_never_appears():
    rng = np.random.default_rng(0)
    records = []
    for i in range(10):
        frames = rng.standard_normal((rng.integers(2, 8), 4)).astype(np.float32)
        frames[0, :] = 999.0
        records.append(FrameRecord(f"v{i}", {i % 3}, frames))
    for batch in make_batches(records, 3, 6, 1, 4):
        assert not np.any(batch.features == 999.0)


def test_padding_and_labels_binary():
    _, records = small_corpus(n=13, seed=2, frames=(1, 6))
    for batch in make_batches(records, 5, 4, 0, 4):
        for i in range(batch.size):
            assert np.all(batch.features[i, batch.valid_len[i]:] == 0.0)
        assert set(np.unique(batch.labels)) <= {0.0, 1.0}


def test_batch_size_zero_rejected():
    _, records = small_corpus(n=4)
    with pytest.raises(ValueError):
        list(make_batches(records, 5, 4, 0, 0))


def test_shuffle_deterministic():
    _, records = small_corpus(n=25, seed=6)
    a = list(make_batches(records, 5, 4, 0, 4, shuffle_seed=11))
    b = list(make_batches(records, 5, 4, 0, 4, shuffle_seed=11))
    c = list(make_batches(records, 5, 4, 0, 4, shuffle_seed=12))
    assert [x.video_ids for x in a] == [y.video_ids for y in b]
    assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))
    assert [x.video_ids for x in a] != [z.video_ids for z in c]


def test_training_stream_resume_alignment():
    _, records = small_corpus(n=23, seed=8)
    full = training_batches(records, 5, 4, 0, 4, seed=3)
    seen = [next(full).video_ids for _ in range(12)]
    resumed = training_batches(records, 5, 4, 0, 4, seed=3, start_step=7)
    again = [next(resumed).video_ids for _ in range(5)]
    assert again == seen[7:12]


def test_training_stream_drops_partial():
    _, records = small_corpus(n=10, seed=1)
    stream = training_batches(records, 5, 4, 0, 4, seed=0)
    for _ in range(9):  # 2 full batches per epoch, partial tail dropped
        assert next(stream).size == 4


# --- label stats -------------------------------------------------------------

def test_label_stats_hand_example():
    recs = [FrameRecord("a", {0}, np.zeros((1, 2), np.float32)),
            FrameRecord("b", {0, 1}, np.zeros((1, 2), np.float32))]
    stats = label_stats(recs, 3)
    assert stats.counts.tolist() == [2, 1, 0]
    assert np.allclose(stats.cumulative_coverage, [2 / 3, 1.0, 1.0])
    assert stats.cumulative_coverage[-1] == 1.0


def test_label_stats_empty():
    stats = label_stats([], 4)
    assert stats.counts.tolist() == [0, 0, 0, 0]
    assert stats.cumulative_coverage.size == 0


def test_label_stats_matches_recount():
    spec, records = small_corpus(n=400, seed=21, num_classes=20,
                                 labels=(1, 1), exponent=1.2, frames=(1, 2))
    stats = label_stats(records, 20)
    recount = np.zeros(20, dtype=int)
    for rec in records:
        for lab in rec.labels:
            recount[lab] += 1
    assert np.array_equal(stats.counts, recount)
    nz = recount[recount > 0]
    assert stats.max_min_ratio() == pytest.approx(nz.max() / nz.min())


def test_coverage_monotone_ending_at_one():
    _, records = small_corpus(n=120, seed=30, num_classes=10, exponent=0.7)
    stats = label_stats(records, 10)
    cov = stats.cumulative_coverage
    assert np.all(np.diff(cov) >= 0)
    assert cov[-1] == 1.0

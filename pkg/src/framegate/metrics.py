"""Multi-label evaluation: Hit@1, global average precision, and per-class
diagnostics.

Both headline metrics depend only on score rankings. All tie-breaking is
explicit and deterministic: argmax ties resolve to the lowest class index,
and the global pooled ranking orders by (score desc, video_id, class index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PredictionSet:
    """Per-sample scores with ground truth attached."""

    video_ids: list[str]
    scores: np.ndarray          # [n_samples, num_classes] in [0, 1]
    labels: list[set[int]]      # non-empty ground-truth sets

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.video_ids)
        if self.scores.ndim != 2 or self.scores.shape[0] != n or len(self.labels) != n:
            raise ValueError("video_ids, scores and labels must align")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if np.any(self.scores < 0.0) or np.any(self.scores > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        for i, labs in enumerate(self.labels):
            if not labs:
                raise ValueError(f"sample {i} has an empty ground-truth set")

    @property
    def n_samples(self) -> int:
        return len(self.video_ids)

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]


@dataclass
class EvalResult:
    hit_at_1: float
    gap: float
    n_samples: int
    per_class_ap: dict[int, float] | None = None


@dataclass
class PerClassReport:
    ap: dict[int, float]          # classes with >= 1 positive only
    positive_counts: np.ndarray   # [num_classes]
    top1_frequency: np.ndarray    # how often each class is the argmax


def hit_at_1(preds: PredictionSet) -> float:
    """Fraction of samples whose single top-scoring class is a true label."""
    if preds.n_samples == 0:
        raise ValueError("empty prediction set")
    top = preds.scores.argmax(axis=1)  # first index on ties
    hits = sum(1 for i, t in enumerate(top) if int(t) in preds.labels[i])
    return hits / preds.n_samples


def gap(preds: PredictionSet, top_n_per_video: int = 20) -> float:
    """Global average precision over the pooled top-N predictions.

    Each sample contributes its top_n_per_video highest-scoring classes; the
    pooled pairs are walked in global score order, accumulating
    precision(i) * delta_recall(i) where recall uses the total number of
    ground-truth positives across all samples as denominator.
    """
    if top_n_per_video < 1:
        raise ValueError("top_n_per_video must be >= 1")
    if preds.n_samples == 0:
        raise ValueError("empty prediction set")
    total_positives = sum(len(l) for l in preds.labels)
    if total_positives == 0:
        raise ValueError("no ground-truth positives")

    top_n = min(top_n_per_video, preds.num_classes)
    pooled = []
    for i in range(preds.n_samples):
        row = preds.scores[i]
        order = np.argsort(-row, kind="stable")[:top_n]
        truth = preds.labels[i]
        vid = preds.video_ids[i]
        for c in order:
            pooled.append((-row[c], vid, int(c), int(c) in truth))
    pooled.sort()

    correct = 0
    total = 0.0
    for rank, (_, _, _, is_pos) in enumerate(pooled, start=1):
        if is_pos:
            correct += 1
            total += correct / rank / total_positives
    return total


def per_class_report(preds: PredictionSet) -> PerClassReport:
    """Average precision per class column plus collapse diagnostics.

    Classes that never occur in the ground truth have undefined AP and are
    absent from the map. top1_frequency shows how often each class wins the
    argmax, which exposes majority-class collapse directly."""
    n, c = preds.scores.shape
    positives = np.zeros(c, dtype=np.int64)
    truth_matrix = np.zeros((n, c), dtype=bool)
    for i, labs in enumerate(preds.labels):
        for lab in labs:
            truth_matrix[i, lab] = True
            positives[lab] += 1

    ap: dict[int, float] = {}
    for cls in range(c):
        npos = positives[cls]
        if npos == 0:
            continue
        order = np.argsort(-preds.scores[:, cls], kind="stable")
        rel = truth_matrix[order, cls]
        total = 0.0
        hits = 0
        for rank, is_pos in enumerate(rel, start=1):
            if is_pos:
                hits += 1
                total += hits / rank / npos
        ap[cls] = total

    top = preds.scores.argmax(axis=1)
    top1_freq = np.bincount(top, minlength=c) / n
    return PerClassReport(ap, positives, top1_freq)


def evaluate(preds: PredictionSet, top_n_per_video: int = 20,
             with_per_class: bool = False) -> EvalResult:
    per_class = per_class_report(preds).ap if with_per_class else None
    return EvalResult(hit_at_1(preds), gap(preds, top_n_per_video),
                      preds.n_samples, per_class)


# ---------------------------------------------------------------------------
# predictions file (offline evaluation)
# ---------------------------------------------------------------------------

def write_predictions(video_ids: list[str], scores: np.ndarray, path) -> None:
    """One line per sample: video_id then class:score pairs (all classes, in
    class order), whitespace-delimited, scores with 6 decimal places."""
    scores = np.asarray(scores)
    with open(path, "w", encoding="utf-8") as fh:
        for vid, row in zip(video_ids, scores):
            pairs = " ".join(f"{c}:{row[c]:.6f}" for c in range(len(row)))
            fh.write(f"{vid} {pairs}\n")


def read_predictions(path, num_classes: int):
    """Parse a predictions file back into (video_ids, scores). Classes
    missing from a line default to score 0."""
    video_ids: list[str] = []
    rows: list[np.ndarray] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            vid = parts[0]
            row = np.zeros(num_classes)
            for pair in parts[1:]:
                cls_str, _, score_str = pair.partition(":")
                cls = int(cls_str)
                if not 0 <= cls < num_classes:
                    raise ValueError(
                        f"{path}:{lineno}: class {cls} outside [0, {num_classes})"
                    )
                row[cls] = float(score_str)
            video_ids.append(vid)
            rows.append(row)
    scores = np.vstack(rows) if rows else np.zeros((0, num_classes))
    return video_ids, scores

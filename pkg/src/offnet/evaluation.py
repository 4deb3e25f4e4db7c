"""Pixel confusion counts and the five freespace metrics.

Counts are pooled over all frames before metrics are computed
(micro-averaging); the per-frame table is kept for diagnosis.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .core import DimensionError


class DegenerateCountsError(ValueError):
    """All four counts are zero, so no metric is defined."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.tp, self.fp, self.fn, self.tn)


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f_score: float
    iou: float
    degenerate: bool = False

    def as_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "iou": self.iou,
        }


METRIC_NAMES = ("accuracy", "precision", "recall", "f_score", "iou")


def confusion_counts(pred, gt) -> ConfusionCounts:
    """Tally TP/FP/FN/TN with traversable as the positive class."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(getattr(gt, "binary", gt), dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def metrics(c: ConfusionCounts) -> MetricReport:
    """Accuracy, precision, recall, F-score and IoU.

    The F-score uses ``2TP^2 / (2TP^2 + TP(FP + FN))``, which equals the
    harmonic mean of precision and recall whenever TP > 0.  A zero
    denominator yields 0 and sets ``degenerate``.
    """
    if c.total == 0:
        raise DegenerateCountsError("cannot compute metrics from all-zero counts")
    tp, fp, fn, tn = c.as_tuple()
    acc, d0 = _ratio(tp + tn, tp + tn + fp + fn)
    pre, d1 = _ratio(tp, tp + fp)
    rec, d2 = _ratio(tp, tp + fn)
    f, d3 = _ratio(2 * tp * tp, 2 * tp * tp + tp * (fp + fn))
    iou, d4 = _ratio(tp, tp + fp + fn)
    return MetricReport(acc, pre, rec, f, iou, d0 or d1 or d2 or d3 or d4)


@dataclass
class FrameResult:
    frame_id: str
    counts: ConfusionCounts
    report: MetricReport | None


@dataclass
class SplitEvaluation:
    counts: ConfusionCounts
    report: MetricReport
    frames: list[FrameResult]

    def to_text(self, title: str = "evaluation") -> str:
        lines = [f"# {title}", f"frames {len(self.frames)}  pixels {self.counts.total}"]
        for name, value in self.report.as_dict().items():
            lines.append(f"{name:<10} {value:.6f}")
        if self.report.degenerate:
            lines.append("note       degenerate denominator(s) reported as 0")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["frame_id", "tp", "fp", "fn", "tn", *METRIC_NAMES])
        for fr in self.frames:
            values = [f"{v:.6f}" for v in fr.report.as_dict().values()] if fr.report else [""] * 5
            writer.writerow([fr.frame_id, *fr.counts.as_tuple(), *values])
        return buf.getvalue()


def evaluate_masks(pairs: Iterable[tuple[str, np.ndarray, np.ndarray]]) -> SplitEvaluation:
    """Micro-averaged metrics over ``(frame_id, pred_mask, gt_mask)`` triples."""
    total = ConfusionCounts()
    frames = []
    for frame_id, pred, gt in pairs:
        c = confusion_counts(pred, gt)
        total = total + c
        frames.append(FrameResult(frame_id, c, metrics(c) if c.total else None))
    if not frames:
        raise ValueError("evaluation split is empty")
    return SplitEvaluation(total, metrics(total), frames)


def evaluate_split(
    predict: Callable[[object], np.ndarray],
    samples: list,
    threshold: float = 0.5,
) -> SplitEvaluation:
    """Evaluate ``predict(sample) -> traversable probability [H, W]`` over ``samples``.

    Each sample needs ``record`` (with a ``name``) and boolean ``labels``.
    """
    def pairs():
        for s in samples:
            prob = np.asarray(predict(s))
            yield s.record.name, prob >= threshold, s.labels

    return evaluate_masks(pairs())

"""Detection scoring: temporal IoU on inclusive integer intervals, per-class
average precision under greedy confidence-ordered matching, and mAP over a
threshold grid.

AP uses the all-point method (cumulative precision summed at each true
positive, divided by the ground-truth count); the precision sums are
accumulated in exact rational arithmetic and rounded once at the end.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .localizer import Detection


def iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """Temporal IoU of two inclusive integer intervals; |[s, e]| = e - s + 1."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def average_precision(dets: list[tuple[str, Detection]],
                      gts: list[tuple[str, tuple[int, int]]],
                      thr: float) -> float:
    """AP for one class. ``dets`` are (video id, detection) pairs, ``gts`` are
    (video id, (start, end)) pairs of the same class.

    Detections are visited in order of descending confidence (ties: earlier
    start, then lower video id); each is a true positive when it has IoU >=
    thr with a still-unmatched ground truth of its video, matching the
    highest-IoU one. With zero ground truths the AP is 0.
    """
    if not gts:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].confidence, dets[i][1].start, dets[i][0]))
    matched = [False] * len(gts)
    total = Fraction(0)
    tp = 0
    for rank, i in enumerate(order, start=1):
        vid, det = dets[i]
        best_iou, best_g = 0.0, -1
        for g, (gvid, span) in enumerate(gts):
            if matched[g] or gvid != vid:
                continue
            ov = iou((det.start, det.end), span)
            if ov >= thr and ov > best_iou:
                best_iou, best_g = ov, g
        if best_g >= 0:
            matched[best_g] = True
            tp += 1
            total += Fraction(tp, rank)
    return float(total / len(gts))


@dataclass(frozen=True)
class EvalReport:
    """AP per threshold per class, mAP per threshold, and the grid average.

    ``classes`` holds the 0-based ids of classes present in the ground truth;
    classes without any ground truth are excluded from every mean.
    """

    thresholds: tuple[float, ...]
    classes: tuple[int, ...]
    ap: np.ndarray  # len(thresholds) x len(classes)

    @property
    def map_per_threshold(self) -> np.ndarray:
        return self.ap.mean(axis=1)

    @property
    def average_map(self) -> float:
        return float(self.map_per_threshold.mean())

    def table_lines(self) -> list[str]:
        head = f"{'class':>8s}" + "".join(f"{t:>9.2f}" for t in self.thresholds)
        lines = [head]
        for ci, cls in enumerate(self.classes):
            lines.append(f"{cls + 1:>8d}" + "".join(f"{self.ap[ti, ci]:>9.4f}"
                                                    for ti in range(len(self.thresholds))))
        lines.append(f"{'mAP':>8s}" + "".join(f"{v:>9.4f}" for v in self.map_per_threshold))
        lines.append(f"average mAP over grid: {self.average_map:.4f}")
        return lines

    def tsv_lines(self) -> list[str]:
        lines = ["threshold\tclass\tap"]
        for ti, thr in enumerate(self.thresholds):
            for ci, cls in enumerate(self.classes):
                lines.append(f"{thr:.2f}\t{cls + 1}\t{self.ap[ti, ci]:.17g}")
            lines.append(f"{thr:.2f}\tmAP\t{self.map_per_threshold[ti]:.17g}")
        lines.append(f"avg\tmAP\t{self.average_map:.17g}")
        return lines


def map_over_thresholds(dets: list[tuple[str, Detection]],
                        gts: list[tuple[str, int, int, int]],
                        grid) -> EvalReport:
    """AP per class present in the ground truth, per IoU threshold.

    ``gts`` are (video id, class, start, end) tuples with 0-based classes.
    """
    thresholds = tuple(float(t) for t in grid)
    if not thresholds:
        raise ValueError("threshold grid must not be empty")
    classes = tuple(sorted({cls for (_, cls, _, _) in gts}))
    dets_by_class: dict[int, list[tuple[str, Detection]]] = {c: [] for c in classes}
    for vid, det in dets:
        if det.cls in dets_by_class:
            dets_by_class[det.cls].append((vid, det))
    gts_by_class: dict[int, list[tuple[str, tuple[int, int]]]] = {c: [] for c in classes}
    for vid, cls, start, end in gts:
        gts_by_class[cls].append((vid, (start, end)))
    ap = np.zeros((len(thresholds), len(classes)))
    for ti, thr in enumerate(thresholds):
        for ci, cls in enumerate(classes):
            ap[ti, ci] = average_precision(dets_by_class[cls], gts_by_class[cls], thr)
    return EvalReport(thresholds, classes, ap)


def parse_grid(spec: str) -> list[float]:
    """Parse ``start:step:stop`` (inclusive) into a threshold list."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must be start:step:stop, got {spec!r}")
    start, step, stop = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise ValueError(f"invalid grid {spec!r}")
    n = int(round((stop - start) / step)) + 1
    grid = [round(start + i * step, 10) for i in range(n)]
    return [t for t in grid if t <= stop + 1e-9]

"""Inference: video-level classification from the final T-CAM and extraction
of temporal segments as maximal runs of positive scores.

Time indices are 1-based inclusive, matching the dataset conventions; the
virtual boundary scores at positions 0 and l+1 are negative, so a run touching
either end of the video still terminates there. A score of exactly 0 is
non-positive and ends a run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import VideoSample
from .model import Params, forward_all
from .numkit import as_matrix, topk_mean

DETECTIONS_HEADER = "video\tclass\tstart\tend\tconfidence"


@dataclass(frozen=True)
class Detection:
    """One localized segment: 0-based class, 1-based inclusive time span."""

    cls: int
    start: int
    end: int
    confidence: float


def classify(c_final, s: float):
    """Per-class top-k-pooled scores of the final T-CAM.

    Returns (pmf over classes, sorted list of classes with strictly positive
    score). k = ceil(l / s).
    """
    c_final = as_matrix(c_final)
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    n_c, l = c_final.shape
    k = int(math.ceil(l / s))
    scores = np.array([topk_mean(c_final[j], k) for j in range(n_c)])
    z = scores - scores.max()
    e = np.exp(z)
    pmf = e / e.sum()
    positive = [int(j) for j in np.flatnonzero(scores > 0)]
    return pmf, positive, scores


def extract_segments(row, min_len: int = 2) -> list[tuple[int, int]]:
    """Maximal runs of strictly positive values as 1-based inclusive (start,
    end) pairs; runs shorter than ``min_len`` time steps are dropped."""
    row = np.asarray(row, dtype=np.float64)
    if not np.all(np.isfinite(row)):
        raise ValueError("segment extraction requires finite scores")
    segments = []
    start = None
    for t, v in enumerate(row):
        if v > 0.0:
            if start is None:
                start = t
        elif start is not None:
            if t - start >= min_len:
                segments.append((start + 1, t))
            start = None
    if start is not None and row.size - start >= min_len:
        segments.append((start + 1, int(row.size)))
    return segments


def localize(sample: VideoSample, params: Params, s: float = 8.0, s_a: float = 40.0,
             min_len: int = 2, two_branch: bool = True) -> list[Detection]:
    """Full forward pass to the final T-CAM, then per positive-score class all
    segments, each scored by (max T-CAM value inside the segment) + (class
    score). Detections are ordered by class, then start."""
    fwd = forward_all(sample.rgb, sample.flow, params, s_a, two_branch)
    _, positive, scores = classify(fwd.c_final, s)
    detections = []
    for j in positive:
        row = fwd.c_final[j]
        for (start, end) in extract_segments(row, min_len):
            confidence = float(row[start - 1:end].max() + scores[j])
            detections.append(Detection(j, start, end, confidence))
    return detections


def write_detections(path, per_video: list[tuple[str, list[Detection]]]) -> Path:
    """Detections as UTF-8 tab-separated text with a header line; classes are
    written 1-based, confidences with 6 decimals."""
    path = Path(path)
    lines = [DETECTIONS_HEADER]
    for vid, dets in per_video:
        for d in dets:
            lines.append(f"{vid}\t{d.cls + 1}\t{d.start}\t{d.end}\t{d.confidence:.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_detections(path) -> list[tuple[str, Detection]]:
    path = Path(path)
    out = []
    for i, raw in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if i == 0 or not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) != 5:
            raise ValueError(f"malformed detection line: {raw!r}")
        vid, cls, start, end, conf = fields
        out.append((vid, Detection(int(cls) - 1, int(start), int(end), float(conf))))
    return out

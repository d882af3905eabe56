"""Feature-sequence datasets: manifest + binary feature file I/O and a
separable synthetic generator.

Conventions: class indices are 0-based in memory and 1-based in files; time
indices are 1-based inclusive everywhere. Features are stored as little-endian
float32 on disk and widened to float64 in memory, so the generator rounds all
feature values through float32 to keep write/load round trips bit-identical.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_MAGIC = "A2CLPT-MANIFEST v1"

# Synthetic segment geometry: at least SEG_GAP background steps between
# segments of one video; lengths come from SynthConfig.seg_len_range.
SEG_GAP = 3

# Cap on the fraction of a video covered by activity, so background steps
# always exist when the length budget allows it.
ACTIVITY_FRACTION = 0.6

# In salient-core mode this fraction of each segment carries the strong
# (primary) class direction; the remaining steps carry the weaker secondary
# direction that only a completeness-seeking model picks up.
CORE_FRACTION = 0.55

# Salient-core background steps mix a faint copy of the video's primary class
# direction into the background (context that is easily mistaken for the
# activity), so separating background from activity content actually matters.
CONTEXT_STRENGTH = 0.45
CONTEXT_BG_STRENGTH = 0.6


class DatasetError(ValueError):
    """Raised when a dataset, manifest, or feature file is invalid."""


@dataclass(frozen=True)
class VideoSample:
    """One video: two feature streams, a multi-hot label vector, and optional
    ground-truth segments as (class, start, end) with 1-based inclusive times."""

    id: str
    rgb: np.ndarray
    flow: np.ndarray
    labels: np.ndarray
    gt_segments: tuple[tuple[int, int, int], ...] = ()

    @property
    def length(self) -> int:
        return self.rgb.shape[1]

    def label_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[VideoSample, ...]
    num_classes: int
    feature_dim: int

    def validate(self, require_labels: bool = False) -> None:
        for s in self.samples:
            _validate_sample(s, self.feature_dim, self.num_classes, require_labels)

    def __len__(self) -> int:
        return len(self.samples)


def _validate_sample(s: VideoSample, feature_dim: int, num_classes: int, require_labels: bool) -> None:
    for name, m in (("rgb", s.rgb), ("flow", s.flow)):
        if m.ndim != 2 or m.shape[0] != feature_dim:
            raise DatasetError(f"video {s.id}: {name} features have shape {m.shape}, expected ({feature_dim}, l)")
        if not np.all(np.isfinite(m)):
            raise DatasetError(f"video {s.id}: {name} features contain non-finite values")
    if s.rgb.shape[1] != s.flow.shape[1]:
        raise DatasetError(f"video {s.id}: rgb length {s.rgb.shape[1]} != flow length {s.flow.shape[1]}")
    if s.labels.shape != (num_classes,):
        raise DatasetError(f"video {s.id}: label vector has shape {s.labels.shape}, expected ({num_classes},)")
    if require_labels and not np.any(s.labels):
        raise DatasetError(f"video {s.id}: training sample has no labels")
    l = s.rgb.shape[1]
    for (cls, start, end) in s.gt_segments:
        if not 0 <= cls < num_classes:
            raise DatasetError(f"video {s.id}: segment class {cls} out of range")
        if not (1 <= start <= end <= l):
            raise DatasetError(f"video {s.id}: segment [{start}, {end}] outside [1, {l}]")
        if not s.labels[cls]:
            raise DatasetError(f"video {s.id}: segment class {cls} is not labeled")


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Write per-stream binary feature files plus the manifest; returns the
    manifest path. Deterministic: identical input produces identical bytes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{MANIFEST_MAGIC} D={ds.feature_dim} C={ds.num_classes}"]
    for s in ds.samples:
        for stream, m in (("rgb", s.rgb), ("flow", s.flow)):
            (out_dir / f"{s.id}.{stream}.bin").write_bytes(
                np.ascontiguousarray(m, dtype="<f4").tobytes()
            )
        label_field = ",".join(str(j + 1) for j in s.label_indices()) or "-"
        seg_field = ",".join(f"{cls + 1}:{start}-{end}" for (cls, start, end) in s.gt_segments) or "-"
        lines.append(f"{s.id}\t{s.length}\t{label_field}\t{seg_field}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


_HEADER_RE = re.compile(r"^A2CLPT-MANIFEST v1 D=(\d+) C=(\d+)$")
_SEGMENT_RE = re.compile(r"^(\d+):(\d+)-(\d+)$")


def load_dataset(manifest_path) -> Dataset:
    """Load a dataset from its manifest; feature files are resolved relative to
    the manifest's directory. Raises DatasetError naming the offending video."""
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise DatasetError(f"manifest {manifest_path} is empty")
    header = _HEADER_RE.match(lines[0])
    if header is None:
        raise DatasetError(f"manifest {manifest_path} has a malformed header: {lines[0]!r}")
    feature_dim, num_classes = int(header.group(1)), int(header.group(2))
    base = manifest_path.parent
    samples = []
    for raw in lines[1:]:
        if not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) != 4:
            raise DatasetError(f"malformed manifest line (expected 4 tab fields): {raw!r}")
        vid, l_str, label_field, seg_field = fields
        try:
            length = int(l_str)
        except ValueError as exc:
            raise DatasetError(f"video {vid}: bad length field {l_str!r}") from exc
        labels = np.zeros(num_classes)
        if label_field != "-":
            for tok in label_field.split(","):
                try:
                    j = int(tok)
                except ValueError as exc:
                    raise DatasetError(f"video {vid}: bad class index {tok!r}") from exc
                if not 1 <= j <= num_classes:
                    raise DatasetError(f"video {vid}: class index {j} outside [1, {num_classes}]")
                labels[j - 1] = 1.0
        segments = []
        if seg_field != "-":
            for tok in seg_field.split(","):
                m = _SEGMENT_RE.match(tok)
                if m is None:
                    raise DatasetError(f"video {vid}: bad segment field {tok!r}")
                segments.append((int(m.group(1)) - 1, int(m.group(2)), int(m.group(3))))
        streams = {}
        for stream in ("rgb", "flow"):
            path = base / f"{vid}.{stream}.bin"
            if not path.exists():
                raise DatasetError(f"video {vid}: missing feature file {path.name}")
            raw_bytes = path.read_bytes()
            expected = feature_dim * length * 4
            if len(raw_bytes) != expected:
                raise DatasetError(
                    f"video {vid}: {path.name} holds {len(raw_bytes)} bytes, expected {expected}"
                )
            m = np.frombuffer(raw_bytes, dtype="<f4").reshape(feature_dim, length).astype(np.float64)
            if not np.all(np.isfinite(m)):
                raise DatasetError(f"video {vid}: {path.name} contains non-finite values")
            streams[stream] = m
        samples.append(VideoSample(vid, streams["rgb"], streams["flow"], labels, tuple(segments)))
    ds = Dataset(tuple(samples), num_classes, feature_dim)
    ds.validate()
    return ds


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 5
    feature_dim: int = 32
    num_videos: int = 50
    len_range: tuple[int, int] = (20, 40)
    segments_range: tuple[int, int] = (1, 3)
    noise_sigma: float = 0.1
    background_direction: bool = True
    seed: int = 11
    seg_len_range: tuple[int, int] = (3, 8)
    # Salient-core mode: each segment gets a strongly scored core span
    # (primary direction) and a weaker remainder (secondary direction), so
    # localizing complete segments requires looking past the most salient
    # steps. Off by default: plain segments carry one prototype throughout.
    salient_core: bool = False

    def validate(self) -> None:
        if self.num_classes < 1:
            raise DatasetError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.feature_dim < 1:
            raise DatasetError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.num_videos < 0:
            raise DatasetError(f"num_videos must be >= 0, got {self.num_videos}")
        l_lo, l_hi = self.len_range
        if l_lo < 3 or l_hi < l_lo:
            raise DatasetError(f"len_range {self.len_range} invalid (need 3 <= lo <= hi)")
        k_lo, k_hi = self.segments_range
        if k_lo < 1 or k_hi < k_lo:
            raise DatasetError(f"segments_range {self.segments_range} invalid")
        s_lo, s_hi = self.seg_len_range
        if s_lo < 3 or s_hi < s_lo:
            raise DatasetError(f"seg_len_range {self.seg_len_range} invalid (need 3 <= lo <= hi)")
        if self.noise_sigma < 0:
            raise DatasetError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if k_hi * s_lo + (k_hi - 1) * SEG_GAP > l_lo:
            raise DatasetError(
                f"infeasible config: {k_hi} segments cannot fit in l_min={l_lo} "
                f"(need {k_hi * s_lo + (k_hi - 1) * SEG_GAP} steps)"
            )


def _prototypes(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    """``count`` unit direction rows, exactly orthogonal when dim >= count
    (Q factor of a random matrix), random unit rows otherwise. Values are
    rounded through float32 to match on-disk precision."""
    if dim >= count:
        m = rng.standard_normal((dim, count))
        q, r = np.linalg.qr(m)
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        protos = q.T
    else:
        protos = rng.standard_normal((count, dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return np.asarray(protos, dtype="<f4").astype(np.float64).copy()


def _place_segments(rng: np.random.Generator, length: int, count: int,
                    seg_lo: int, seg_hi: int) -> list[tuple[int, int]]:
    """Non-overlapping (start, end) pairs, 1-based inclusive, with at least
    SEG_GAP background steps between consecutive segments."""
    budget = min(max(seg_lo * count, int(ACTIVITY_FRACTION * length)),
                 length - (count - 1) * SEG_GAP)
    lengths = []
    remaining = budget
    for i in range(count):
        rest = count - 1 - i
        hi = min(seg_hi, remaining - seg_lo * rest)
        lengths.append(int(rng.integers(seg_lo, hi + 1)))
        remaining -= lengths[-1]
    free = length - sum(lengths) - (count - 1) * SEG_GAP
    cuts = np.sort(rng.integers(0, free + 1, size=count))
    gaps = np.diff(np.concatenate(([0], cuts, [free])))
    segments = []
    cursor = int(gaps[0])
    for i, seg_len in enumerate(lengths):
        start = cursor + 1
        end = start + seg_len - 1
        segments.append((start, end))
        cursor = end + (SEG_GAP + int(gaps[i + 1]) if i < count - 1 else 0)
    assert segments[-1][1] <= length
    return segments


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset: per-class unit prototypes per stream,
    activity steps get their class prototype plus N(0, sigma^2) noise,
    background steps get the background prototype (or pure noise when
    ``background_direction`` is off). Class coverage is guaranteed by
    round-robin primary-class assignment."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_dirs = (2 * cfg.num_classes + 1) if cfg.salient_core else (cfg.num_classes + 1)
    protos = {stream: _prototypes(rng, cfg.feature_dim, n_dirs) for stream in ("rgb", "flow")}
    samples = []
    for v in range(cfg.num_videos):
        length = int(rng.integers(cfg.len_range[0], cfg.len_range[1] + 1))
        count = int(rng.integers(cfg.segments_range[0], cfg.segments_range[1] + 1))
        classes = [v % cfg.num_classes]
        for _ in range(count - 1):
            classes.append(classes[0] if rng.random() < 0.5 else int(rng.integers(cfg.num_classes)))
        spans = _place_segments(rng, length, count, *cfg.seg_len_range)
        segments = tuple((cls, start, end) for cls, (start, end) in zip(classes, spans))
        cores = []
        if cfg.salient_core:
            for (start, end) in spans:
                seg_len = end - start + 1
                core_len = max(1, round(CORE_FRACTION * seg_len))
                offset = int(rng.integers(0, seg_len - core_len + 1))
                cores.append((start + offset, start + offset + core_len - 1))
        labels = np.zeros(cfg.num_classes)
        labels[list(classes)] = 1.0
        streams = {}
        for stream in ("rgb", "flow"):
            dirs = protos[stream]
            background = dirs[n_dirs - 1]
            if cfg.salient_core:
                ctx = CONTEXT_STRENGTH * dirs[classes[0]]
                if cfg.background_direction:
                    ctx = ctx + CONTEXT_BG_STRENGTH * background
                base = np.tile(ctx[:, None], (1, length))
            elif cfg.background_direction:
                base = np.tile(background[:, None], (1, length))
            else:
                base = np.zeros((cfg.feature_dim, length))
            for i, (cls, (start, end)) in enumerate(zip(classes, spans)):
                if cfg.salient_core:
                    base[:, start - 1:end] = dirs[cfg.num_classes + cls][:, None]
                    c_start, c_end = cores[i]
                    base[:, c_start - 1:c_end] = dirs[cls][:, None]
                else:
                    base[:, start - 1:end] = dirs[cls][:, None]
            noisy = base + cfg.noise_sigma * rng.standard_normal((cfg.feature_dim, length))
            streams[stream] = noisy.astype("<f4").astype(np.float64)
        samples.append(VideoSample(f"synth{v:04d}", streams["rgb"], streams["flow"], labels, segments))
    ds = Dataset(tuple(samples), cfg.num_classes, cfg.feature_dim)
    ds.validate(require_labels=True)
    return ds

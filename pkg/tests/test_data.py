import numpy as np
import pytest

from a2clpt.data import (
    Dataset,
    DatasetError,
    SynthConfig,
    VideoSample,
    load_dataset,
    synth_generate,
    write_dataset,
)
from a2clpt.numkit import angular_distance


def tiny_dataset():
    rng = np.random.default_rng(0)
    samples = []
    for i in range(2):
        labels = np.zeros(3)
        labels[i] = 1.0
        samples.append(VideoSample(
            id=f"vid{i}",
            rgb=rng.standard_normal((4, 5)).astype("<f4").astype(np.float64),
            flow=rng.standard_normal((4, 5)).astype("<f4").astype(np.float64),
            labels=labels,
            gt_segments=((i, 2, 4),),
        ))
    return Dataset(tuple(samples), num_classes=3, feature_dim=4)


class TestRoundTrip:
    def test_single_video_file_sizes(self, tmp_path):
        ds = tiny_dataset()
        manifest = write_dataset(ds, tmp_path)
        assert manifest.name == "manifest.txt"
        raw = (tmp_path / "vid0.rgb.bin").read_bytes()
        assert len(raw) == 4 * 5 * 4
        loaded = load_dataset(manifest)
        assert len(loaded) == 2

    def test_bit_identical_features(self, tmp_path):
        ds = tiny_dataset()
        loaded = load_dataset(write_dataset(ds, tmp_path))
        for a, b in zip(ds.samples, loaded.samples):
            np.testing.assert_array_equal(a.rgb, b.rgb)
            np.testing.assert_array_equal(a.flow, b.flow)
            np.testing.assert_array_equal(a.labels, b.labels)
            assert a.gt_segments == b.gt_segments

    def test_rewrite_identical_bytes(self, tmp_path):
        ds = tiny_dataset()
        write_dataset(ds, tmp_path / "a")
        write_dataset(ds, tmp_path / "b")
        for name in ("manifest.txt", "vid0.rgb.bin", "vid1.flow.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_empty_dataset_header_only(self, tmp_path):
        ds = Dataset((), num_classes=3, feature_dim=4)
        manifest = write_dataset(ds, tmp_path)
        assert manifest.read_text().strip() == "A2CLPT-MANIFEST v1 D=4 C=3"
        assert len(load_dataset(manifest)) == 0

    def test_file_count(self, tmp_path):
        write_dataset(tiny_dataset(), tmp_path)
        files = sorted(p.name for p in tmp_path.iterdir())
        assert len(files) == 2 * 2 + 1


class TestLoadErrors:
    def test_missing_flow_file_names_id(self, tmp_path):
        ds = tiny_dataset()
        manifest = write_dataset(ds, tmp_path)
        (tmp_path / "vid1.flow.bin").unlink()
        with pytest.raises(DatasetError, match="vid1"):
            load_dataset(manifest)

    def test_size_mismatch_names_id(self, tmp_path):
        manifest = write_dataset(tiny_dataset(), tmp_path)
        (tmp_path / "vid0.rgb.bin").write_bytes(b"\x00" * 12)
        with pytest.raises(DatasetError, match="vid0"):
            load_dataset(manifest)

    def test_non_finite_rejected(self, tmp_path):
        manifest = write_dataset(tiny_dataset(), tmp_path)
        bad = np.full((4, 5), np.inf, dtype="<f4")
        (tmp_path / "vid0.rgb.bin").write_bytes(bad.tobytes())
        with pytest.raises(DatasetError, match="vid0"):
            load_dataset(manifest)

    def test_malformed_line(self, tmp_path):
        manifest = write_dataset(tiny_dataset(), tmp_path)
        manifest.write_text(manifest.read_text() + "oops line\n")
        with pytest.raises(DatasetError, match="malformed"):
            load_dataset(manifest)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("NOT-A-MANIFEST\n")
        with pytest.raises(DatasetError, match="header"):
            load_dataset(path)

    def test_segment_outside_length(self, tmp_path):
        manifest = write_dataset(tiny_dataset(), tmp_path)
        text = manifest.read_text().replace("1:2-4", "1:2-9")
        manifest.write_text(text)
        with pytest.raises(DatasetError, match="vid0"):
            load_dataset(manifest)


class TestSynth:
    def test_same_seed_identical(self):
        cfg = SynthConfig(num_videos=6, seed=42)
        a = synth_generate(cfg)
        b = synth_generate(cfg)
        for sa, sb in zip(a.samples, b.samples):
            np.testing.assert_array_equal(sa.rgb, sb.rgb)
            np.testing.assert_array_equal(sa.flow, sb.flow)
            assert sa.gt_segments == sb.gt_segments

    def test_noiseless_single_class_columns_equal_prototype(self):
        cfg = SynthConfig(num_classes=1, feature_dim=8, num_videos=3,
                          len_range=(10, 12), segments_range=(1, 1),
                          noise_sigma=0.0, background_direction=False, seed=5)
        ds = synth_generate(cfg)
        for s in ds.samples:
            (cls, start, end) = s.gt_segments[0]
            proto = s.rgb[:, start - 1]
            for t in range(start - 1, end):
                np.testing.assert_array_equal(s.rgb[:, t], proto)
            # background is pure zero noise here
            outside = [t for t in range(s.length) if not (start - 1 <= t <= end - 1)]
            assert np.all(s.rgb[:, outside] == 0.0)

    def test_class_coverage_round_robin(self):
        ds = synth_generate(SynthConfig(num_videos=50, num_classes=5, seed=3))
        seen = np.zeros(5, dtype=bool)
        for s in ds.samples:
            seen |= s.labels.astype(bool)
        assert seen.all()

    def test_invariants_over_random_configs(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            k_hi = int(rng.integers(1, 3))
            l_lo = int(rng.integers(4 * k_hi + 5, 4 * k_hi + 15))
            cfg = SynthConfig(
                num_classes=int(rng.integers(1, 4)),
                feature_dim=int(rng.integers(1, 9)),
                num_videos=int(rng.integers(1, 4)),
                len_range=(l_lo, l_lo + int(rng.integers(0, 6))),
                segments_range=(1, k_hi),
                noise_sigma=float(rng.uniform(0, 0.5)),
                background_direction=bool(rng.integers(0, 2)),
                seed=int(rng.integers(0, 10_000)),
            )
            ds = synth_generate(cfg)
            ds.validate(require_labels=True)
            for s in ds.samples:
                spans = sorted((a, b) for (_, a, b) in s.gt_segments)
                for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
                    assert b1 < a2, "segments overlap"

    def test_separable_prototypes(self):
        cfg = SynthConfig(num_classes=3, feature_dim=16, num_videos=6,
                          noise_sigma=0.0, segments_range=(1, 1), seed=9)
        ds = synth_generate(cfg)
        by_class = {}
        for s in ds.samples:
            (cls, start, end) = s.gt_segments[0]
            by_class.setdefault(cls, []).append(s.rgb[:, start - 1])
        for cls, cols in by_class.items():
            for col in cols[1:]:
                # identical columns; arccos amplifies cosine rounding to ~1e-8
                assert angular_distance(cols[0], col) < 1e-7
        protos = [cols[0] for cols in by_class.values()]
        for i in range(len(protos)):
            for j in range(i + 1, len(protos)):
                assert angular_distance(protos[i], protos[j]) > 1.0

    def test_infeasible_config_rejected(self):
        with pytest.raises(DatasetError, match="fit"):
            synth_generate(SynthConfig(len_range=(5, 30), segments_range=(2, 2)))

    def test_bad_ranges_rejected(self):
        with pytest.raises(DatasetError):
            SynthConfig(len_range=(10, 5)).validate()
        with pytest.raises(DatasetError):
            SynthConfig(noise_sigma=-1.0).validate()

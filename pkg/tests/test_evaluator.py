import itertools

import numpy as np
import pytest

from a2clpt.evaluator import EvalReport, average_precision, iou, map_over_thresholds, parse_grid
from a2clpt.localizer import Detection
from oracles import pr_curve_oracle


def det(cls, start, end, conf, vid="v0"):
    return (vid, Detection(cls, start, end, conf))


class TestIou:
    def test_identical(self):
        assert iou((3, 7), (3, 7)) == 1.0

    def test_disjoint(self):
        assert iou((1, 2), (4, 5)) == 0.0

    def test_one_step_overlap(self):
        assert iou((1, 2), (2, 3)) == pytest.approx(1 / 3)

    def test_inclusive_lengths(self):
        assert iou((1, 1), (1, 1)) == 1.0
        assert iou((1, 4), (3, 8)) == pytest.approx(2 / 8)


class TestAveragePrecision:
    def test_single_exact_match(self):
        assert average_precision([det(0, 2, 5, 0.9)], [("v0", (2, 5))], 0.5) == 1.0

    def test_single_false_positive(self):
        assert average_precision([det(0, 10, 12, 0.9)], [("v0", (2, 5))], 0.5) == 0.0

    def test_worked_example_exact(self):
        # 2 GT; ranked TP, FP, TP -> AP = (1/1 + 2/3) / 2 = 5/6 exactly
        dets = [
            det(0, 2, 5, 0.9),
            det(0, 20, 23, 0.8),
            det(0, 10, 13, 0.7),
        ]
        gts = [("v0", (2, 5)), ("v0", (10, 13))]
        ap = average_precision(dets, gts, 0.5)
        assert ap == 5 / 6

    def test_zero_gt_zero_ap(self):
        assert average_precision([det(0, 1, 3, 0.5)], [], 0.5) == 0.0
        assert average_precision([], [], 0.5) == 0.0

    def test_matches_cross_video(self):
        dets = [det(0, 2, 5, 0.9, "a"), det(0, 2, 5, 0.8, "b")]
        gts = [("b", (2, 5))]
        # the higher-confidence detection is in the wrong video
        assert average_precision(dets, gts, 0.5) == pytest.approx(0.5)

    def test_each_gt_matched_once(self):
        dets = [det(0, 2, 5, 0.9), det(0, 2, 5, 0.8)]
        gts = [("v0", (2, 5))]
        assert average_precision(dets, gts, 0.5) == 1.0

    def test_monotone_confidence_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n_det = int(rng.integers(0, 6))
            n_gt = int(rng.integers(1, 4))
            dets = [det(0, int(s := rng.integers(1, 20)), int(s + rng.integers(1, 6)),
                        float(rng.uniform(0, 1))) for _ in range(n_det)]
            gts = [("v0", (int(s := rng.integers(1, 20)), int(s + rng.integers(1, 6))))
                   for _ in range(n_gt)]
            base = average_precision(dets, gts, 0.4)
            warped = [(v, Detection(d.cls, d.start, d.end, 3.0 * np.exp(d.confidence) + 1))
                      for v, d in dets]
            assert average_precision(warped, gts, 0.4) == pytest.approx(base, abs=1e-12)

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n_det = int(rng.integers(0, 7))
            n_gt = int(rng.integers(1, 4))
            dets = [det(0, int(s := rng.integers(1, 15)), int(s + rng.integers(1, 8)),
                        float(rng.uniform(0, 1))) for _ in range(n_det)]
            gts = [("v0", (int(s := rng.integers(1, 15)), int(s + rng.integers(1, 8))))
                   for _ in range(n_gt)]
            aps = [average_precision(dets, gts, t) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
            for a, b in zip(aps, aps[1:]):
                assert b <= a + 1e-12

    def test_exhaustive_small_instances_vs_oracle(self):
        # all subsets (size <= 6) of a candidate pool around 3 GTs, under
        # two confidence orders and three thresholds
        gts = [("v0", (2, 5)), ("v0", (10, 15)), ("v1", (4, 8))]
        pool = [
            ("v0", (2, 5)), ("v0", (3, 6)), ("v0", (9, 14)), ("v0", (12, 17)),
            ("v0", (20, 24)), ("v1", (4, 8)), ("v1", (6, 10)), ("v1", (20, 22)),
        ]
        checked = 0
        for size in range(0, 7):
            for combo in itertools.combinations(range(len(pool)), size):
                for reverse in (False, True):
                    dets = []
                    for rank, idx in enumerate(combo):
                        vid, (s, e) = pool[idx]
                        conf = 1.0 - 0.1 * rank if not reverse else 0.1 * (rank + 1)
                        dets.append((vid, Detection(0, s, e, conf)))
                    for thr in (0.3, 0.5, 0.8):
                        got = average_precision(dets, gts, thr)
                        want = pr_curve_oracle(dets, gts, thr)
                        assert got == pytest.approx(want, abs=1e-12), (combo, reverse, thr)
                        checked += 1
        assert checked > 1000


class TestMapOverThresholds:
    def _perfect(self):
        gts = [("v0", 0, 2, 5), ("v0", 1, 8, 11), ("v1", 0, 3, 7)]
        dets = [det(c, s, e, 0.9, v) for (v, c, s, e) in gts]
        return dets, gts

    def test_perfect_detections(self):
        dets, gts = self._perfect()
        rep = map_over_thresholds(dets, gts, parse_grid("0.1:0.1:0.9"))
        np.testing.assert_array_equal(rep.ap, 1.0)
        assert rep.average_map == 1.0

    def test_empty_detections(self):
        _, gts = self._perfect()
        rep = map_over_thresholds([], gts, parse_grid("0.1:0.1:0.9"))
        np.testing.assert_array_equal(rep.ap, 0.0)

    def test_classes_without_gt_excluded(self):
        dets, gts = self._perfect()
        dets.append(det(2, 1, 4, 0.99))  # class 2 has no GT
        rep = map_over_thresholds(dets, gts, [0.5])
        assert rep.classes == (0, 1)

    def test_grid_conventions(self):
        coarse = parse_grid("0.1:0.1:0.9")
        np.testing.assert_allclose(coarse, np.arange(1, 10) / 10)
        fine = parse_grid("0.5:0.05:0.95")
        assert len(fine) == 10
        assert fine[0] == 0.5 and fine[-1] == 0.95

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            parse_grid("0.5:0.1")
        with pytest.raises(ValueError):
            parse_grid("0.9:0.1:0.1")

    def test_report_lines(self):
        dets, gts = self._perfect()
        rep = map_over_thresholds(dets, gts, [0.5, 0.7])
        table = rep.table_lines()
        assert table[0].lstrip().startswith("class")
        assert "average mAP" in table[-1]
        tsv = rep.tsv_lines()
        assert tsv[0] == "threshold\tclass\tap"
        assert any(line.startswith("0.50\tmAP") for line in tsv)
        assert tsv[-1].startswith("avg\tmAP")

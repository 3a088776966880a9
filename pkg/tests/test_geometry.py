import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clipjoint.geometry import (
    Box,
    Detection,
    GeometryError,
    assign_positives,
    iou,
    nms,
)


def brute_force_nms(dets, thr):
    """Direct greedy oracle: scan candidates in score order, keep unless a kept
    same-class box overlaps it by more than ``thr``."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        if all(dets[j].class_id != dets[i].class_id or iou(dets[i].box, dets[j].box) <= thr for j in kept):
            kept.append(i)
    return kept


def random_box(rng, side=128.0):
    x0, y0 = rng.uniform(0, side, 2)
    w, h = rng.uniform(1, 48, 2)
    return Box(x0, y0, x0 + w, y0 + h)


boxes = st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(0.5, 50), st.floats(0.5, 50)).map(
    lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


class TestIoU:
    def test_fixtures(self):
        assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0
        assert abs(iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) - 1 / 3) < 1e-12

    def test_zero_area_pair(self):
        assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0

    def test_invalid(self):
        with pytest.raises(GeometryError):
            iou(Box(2, 0, 1, 1), Box(0, 0, 1, 1))

    @given(boxes, boxes)
    def test_symmetric_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(boxes)
    def test_self_is_one(self, a):
        assert abs(iou(a, a) - 1.0) < 1e-12

    @given(boxes, st.floats(0.01, 5))
    def test_shifted_box_below_one(self, a, dx):
        b = Box(a.x_min + dx, a.y_min, a.x_max + dx, a.y_max)
        assert iou(a, b) < 1.0


class TestNMS:
    def test_single(self):
        d = Detection(Box(0, 0, 5, 5), 0, 0.3)
        assert nms([d], 0.5) == [d]

    def test_duplicate_suppressed(self):
        hi, lo = Detection(Box(0, 0, 5, 5), 1, 0.9), Detection(Box(0, 0, 5, 5), 1, 0.8)
        assert nms([lo, hi], 0.5) == [hi]

    def test_disjoint_kept_in_order(self):
        a, b = Detection(Box(0, 0, 1, 1), 0, 0.2), Detection(Box(5, 5, 6, 6), 0, 0.7)
        assert nms([a, b], 0.5) == [b, a]

    def test_other_class_not_suppressed(self):
        a, b = Detection(Box(0, 0, 5, 5), 0, 0.9), Detection(Box(0, 0, 5, 5), 1, 0.8)
        assert nms([a, b], 0.5) == [a, b]

    def test_tie_breaks_on_index(self):
        a, b = Detection(Box(0, 0, 5, 5), 0, 0.5), Detection(Box(0, 0, 5, 5), 0, 0.5)
        assert nms([a, b], 0.5)[0] is a

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2024)
        for case in range(1000):
            n = int(rng.integers(1, 65))
            # coarse scores force ties; few classes force suppression
            dets = [Detection(random_box(rng), int(rng.integers(3)), float(rng.integers(0, 20)) / 20)
                    for _ in range(n)]
            thr = float(rng.uniform(0.05, 1.0))
            got = nms(dets, thr)
            want = [dets[i] for i in brute_force_nms(dets, thr)]
            assert [id(d) for d in got] == [id(d) for d in want], case
            assert len(got) <= n

    def test_threshold_one_keeps_all(self):
        rng = np.random.default_rng(5)
        dets = [Detection(random_box(rng), 0, float(s)) for s in rng.uniform(size=20)]
        out = nms(dets, 1.0)
        assert sorted(map(id, out)) == sorted(map(id, dets))
        assert [d.score for d in out] == sorted((d.score for d in dets), reverse=True)


class TestAssign:
    def test_identical_anchor(self):
        a = assign_positives([Box(0, 0, 16, 16)], [(Box(0, 0, 16, 16), 3)])
        assert a[0].is_positive and a[0].iou == 1.0 and a[0].matched_gt == 0

    def test_below_threshold(self):
        # IoU 0.4 against one gt, lower against the other
        anchors = [Box(0, 0, 10, 10)]
        gts = [(Box(0, 0, 10, 4), 0), (Box(20, 20, 30, 30), 1)]
        assert abs(iou(anchors[0], gts[0][0]) - 0.4) < 1e-12
        a = assign_positives(anchors, gts, 0.5, force_best_match=False)
        assert not a[0].is_positive and a[0].matched_gt is None

    def test_forced_best_match(self):
        anchors = [Box(0, 0, 10, 10), Box(10, 0, 20, 10)]
        gts = [(Box(0, 0, 10, 4), 0)]
        a = assign_positives(anchors, gts, 0.5, force_best_match=True)
        assert a[0].is_positive and a[0].forced and a[0].matched_gt == 0
        assert not a[1].is_positive

    def test_no_gts(self):
        a = assign_positives([Box(0, 0, 1, 1)] * 3, [])
        assert not any(x.is_positive for x in a)

    def test_tie_to_lowest_gt(self):
        a = assign_positives([Box(0, 0, 10, 10)], [(Box(0, 0, 10, 10), 2), (Box(0, 0, 10, 10), 5)])
        assert a[0].matched_gt == 0

    def test_threshold_monotone(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            anchors = [random_box(rng) for _ in range(30)]
            gts = [(random_box(rng), 0) for _ in range(4)]
            counts = []
            for thr in (0.1, 0.3, 0.5, 0.7, 0.9):
                asg = assign_positives(anchors, gts, thr)
                assert all(x.iou >= thr for x in asg if x.is_positive)
                counts.append(sum(x.is_positive for x in asg))
            assert counts == sorted(counts, reverse=True)

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aligndet.boxes import (IGNORE, NEGATIVE, Box, alignment_histogram, assign_labels,
                            batched_nms, decode, decode_boxes, decode_offsets_to_roi, encode,
                            histogram_csv, iou, iou_matrix, make_anchor_grid, nms, nms_indices)
from aligndet.ops import implicit_roi, roiconv_offsets
from aligndet.tensor import Rng


def random_boxes(rng, n, lo=0.0, hi=100.0, min_side=1.0, max_side=40.0):
    x1 = rng.uniform(lo, hi, size=n)
    y1 = rng.uniform(lo, hi, size=n)
    return np.stack([x1, y1, x1 + rng.uniform(min_side, max_side, size=n),
                     y1 + rng.uniform(min_side, max_side, size=n)], axis=1)


def ref_iou(a, b):
    # written from the area definition, independent of the library code
    inter_rows = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    inter_cols = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = inter_rows * inter_cols
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return 0.0 if union <= 0 else inter / union


def exhaustive_nms(boxes, scores, thr):
    """The unique subset that is closed under greedy suppression.

    Every subset is tried; the answer is the one where each box (visited in
    descending score, lower index first) is present exactly when no present
    box ahead of it overlaps it by more than ``thr``.
    """
    n = len(boxes)
    rank = sorted(range(n), key=lambda i: (-scores[i], i))
    found = []
    for mask in itertools.product([False, True], repeat=n):
        ok = True
        for pos, i in enumerate(rank):
            blocked = any(mask[j] and ref_iou(boxes[j], boxes[i]) > thr for j in rank[:pos])
            if mask[i] == blocked:
                ok = False
                break
        if ok:
            found.append([i for i in rank if mask[i]])
    assert len(found) == 1
    return found[0]


class TestIou:
    def test_identical(self):
        assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_one_seventh(self):
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)

    def test_zero_union(self):
        assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0

    def test_matrix_matches_scalar(self):
        rng = Rng(1)
        a, b = random_boxes(rng, 7), random_boxes(rng, 5)
        m = iou_matrix(a, b)
        for i in range(7):
            for j in range(5):
                assert m[i, j] == pytest.approx(ref_iou(a[i], b[j]), abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=4, max_size=4),
           st.lists(st.floats(0.1, 30), min_size=4, max_size=4))
    def test_symmetric_and_bounded(self, corners, sides):
        a = (corners[0], corners[1], corners[0] + sides[0], corners[1] + sides[1])
        b = (corners[2], corners[3], corners[2] + sides[2], corners[3] + sides[3])
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0
        assert iou(a, a) == pytest.approx(1.0, abs=1e-12)


class TestBox:
    def test_rejects_inverted(self):
        with pytest.raises(ValueError):
            Box(2, 0, 1, 1)

    def test_properties(self):
        b = Box(0, 2, 4, 10)
        assert (b.height, b.width, b.area, b.center) == (4, 8, 32, (2, 6))


class TestAnchorGrid:
    def test_scale_four_stride_eight(self):
        g = make_anchor_grid(8, 8, 8, 4)
        ext = g.boxes[..., 2:] - g.boxes[..., :2]
        assert np.all(ext == 32)

    def test_stride_sixteen_origin(self):
        g = make_anchor_grid(4, 4, 16, 2)
        assert tuple(g[0, 0]) == (-8, -8, 24, 24)
        assert g[0, 0].center == (8, 8)

    def test_centres_and_area_with_ratio(self):
        g = make_anchor_grid(3, 5, 8, 4, ratio=2.0)
        for X in range(3):
            for Y in range(5):
                b = g[X, Y]
                assert b.center == pytest.approx(((X + 0.5) * 8, (Y + 0.5) * 8))
                assert b.area == pytest.approx(32.0 ** 2)
                assert b.height / b.width == pytest.approx(2.0)

    def test_square_for_unit_ratio(self):
        b = make_anchor_grid(2, 2, 8, 3).boxes
        np.testing.assert_array_equal(b[..., 2] - b[..., 0], b[..., 3] - b[..., 1])


class TestEncodeDecode:
    def test_identity(self):
        np.testing.assert_array_equal(encode((0, 0, 32, 32), (0, 0, 32, 32)), [0, 0, 0, 0])

    def test_hand_value(self):
        np.testing.assert_allclose(encode((0, 0, 32, 32), (8, 8, 40, 40)), [0.25, 0.25, 0, 0],
                                   atol=1e-15)

    def test_round_trip(self):
        rng = Rng(3)
        a, g = random_boxes(rng, 200), random_boxes(rng, 200)
        for ai, gi in zip(a, g):
            np.testing.assert_allclose(tuple(decode(ai, encode(ai, gi))), gi, atol=1e-10)

    def test_degenerate_gt(self):
        with pytest.raises(ValueError):
            encode((0, 0, 4, 4), (1, 1, 1, 3))

    def test_clamp_to_image_and_min_extent(self):
        out = decode_boxes([(0, 0, 8, 8), (0, 0, 8, 8)], [(-10, 20, 0, 0), (0, 0, -30, -30)], 64)
        assert np.all(out >= 0) and np.all(out <= 64)
        assert np.all(out[:, 2:] - out[:, :2] >= 1.0 - 1e-12)


def row_of_anchors(ious_wanted, side=10.0):
    """Anchors overlapping gt (0, 0, side, side) with the requested IoUs.

    Each anchor keeps the gt's rows and shifts columns by ``d`` so that
    IoU = (side - d) / (side + d).
    """
    gt = np.array([[0.0, 0.0, side, side]])
    anchors = []
    for v in ious_wanted:
        d = side * (1 - v) / (1 + v)
        anchors.append((0.0, d, side, side + d))
    return np.array(anchors), gt


class TestAssignLabels:
    def test_ignore_band_boundaries(self):
        wanted = [0.39, 0.45, 0.4999, 0.8]
        anchors, gt = row_of_anchors(wanted)
        np.testing.assert_allclose(iou_matrix(anchors, gt)[:, 0], wanted, atol=1e-12)
        lab = assign_labels(anchors, gt, 0.5, 0.4, force_match=False).labels
        assert lab.tolist() == [NEGATIVE, IGNORE, IGNORE, 0]

    def test_thresholds_are_inclusive_below(self):
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        on_fg = np.array([[0.0, 0.0, 10.0, 5.0]])  # IoU exactly 0.5
        on_bg = np.array([[0.0, 0.0, 10.0, 4.0]])  # IoU exactly 0.4
        assert assign_labels(on_fg, gt, 0.5, 0.4, force_match=False).labels[0] == 0
        assert assign_labels(on_bg, gt, 0.5, 0.4, force_match=False).labels[0] == IGNORE

    def test_equal_thresholds_have_no_band(self):
        rng = Rng(5)
        anchors = make_anchor_grid(8, 8, 8, 4).flat()
        gts = random_boxes(rng, 3, 0, 40, 8, 24)
        res = assign_labels(anchors, gts, 0.7, 0.7)
        assert not res.ignored.any()
        assert np.all(res.positive | res.negative)

    def test_single_forced_positive(self):
        anchors = make_anchor_grid(8, 8, 8, 4).flat()
        gt = np.array([[20.0, 20.0, 26.0, 30.0]])  # small: best IoU well under 0.5
        res = assign_labels(anchors, gt, 0.5, 0.4)
        assert iou_matrix(anchors, gt).max() < 0.5
        assert res.positive.sum() == 1
        assert res.forced.sum() == 1
        assert res.labels[res.positive][0] == 0

    def test_force_match_tie_takes_lowest_index(self):
        anchors = np.array([(0, 0, 10, 10), (0, 0, 10, 10)], dtype=float)
        res = assign_labels(anchors, np.array([[0, 0, 10, 4.0]]), 0.9, 0.9)
        assert res.labels.tolist() == [0, NEGATIVE]

    def test_no_gts(self):
        res = assign_labels(make_anchor_grid(2, 2, 8, 4).flat(), np.zeros((0, 4)), 0.5, 0.4)
        assert np.all(res.negative)

    def test_rejects_inverted_thresholds(self):
        with pytest.raises(ValueError):
            assign_labels(np.zeros((1, 4)), np.zeros((0, 4)), 0.3, 0.5)

    def test_positive_count_monotone_in_fg(self):
        rng = Rng(8)
        anchors = make_anchor_grid(8, 8, 8, 4).flat()
        for _ in range(20):
            gts = random_boxes(rng, 3, 0, 40, 8, 40)
            counts = [assign_labels(anchors, gts, fg, 0.3, force_match=False).positive.sum()
                      for fg in (0.3, 0.4, 0.5, 0.6, 0.7, 0.9)]
            assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_partition_and_valid_indices(self):
        rng = Rng(9)
        anchors = make_anchor_grid(8, 8, 8, 4).flat()
        gts = random_boxes(rng, 3, 0, 40, 8, 40)
        res = assign_labels(anchors, gts, 0.5, 0.4)
        assert np.all(res.positive.astype(int) + res.negative + res.ignored == 1)
        assert np.all(res.labels[res.positive] < 3)


class TestNms:
    def test_single(self):
        assert nms([((0, 0, 1, 1), 0.3)], 0.5) == [((0, 0, 1, 1), 0.3)]

    def test_pair(self):
        a, b = (0, 0, 10, 10), (0, 0, 10, 8)  # IoU 0.8
        assert iou(a, b) == pytest.approx(0.8)
        assert nms([(b, 0.7), (a, 0.9)], 0.5) == [(a, 0.9)]

    def test_chain(self):
        d = 10 * 0.4 / 1.6  # offset giving IoU 0.6
        a, b, c = (0, 0, 10, 10), (0, d, 10, 10 + d), (0, 2 * d, 10, 10 + 2 * d)
        assert iou(a, b) == pytest.approx(0.6) and iou(b, c) == pytest.approx(0.6)
        assert iou(a, c) < 0.5
        kept = nms([(a, 0.9), (b, 0.8), (c, 0.7)], 0.5)
        assert [s for _, s in kept] == [0.9, 0.7]

    def test_tie_keeps_lower_index(self):
        assert nms_indices([(0, 0, 4, 4), (0, 0, 4, 4)], [0.5, 0.5], 0.5).tolist() == [0]

    def test_non_finite_scores(self):
        with pytest.raises(ValueError):
            nms_indices([(0, 0, 1, 1)], [np.nan], 0.5)

    def test_matches_exhaustive_reference(self):
        rng = Rng(2024)
        for _ in range(200):
            n = int(rng.integers(1, 11))
            boxes = random_boxes(rng, n, 0, 30, 2, 20)
            # coarse scores so ties really happen
            scores = np.round(rng.uniform(size=n), 1)
            thr = (0.3, 0.5, 0.7)[int(rng.integers(0, 3))]
            got = nms_indices(boxes, scores, thr).tolist()
            assert got == exhaustive_nms(boxes.tolist(), scores.tolist(), thr)

    def test_batched_is_per_class(self):
        boxes = [(0, 0, 10, 10), (0, 0, 10, 10), (0, 0, 10, 10)]
        keep = batched_nms(boxes, [0.9, 0.8, 0.7], [0, 1, 0], 0.5)
        assert keep.tolist() == [0, 1]


class TestDecodeOffsets:
    def test_zero_offsets_give_implicit_roi(self):
        for (h, w), S, X, Y in [((3, 3), 16, 2, 5), ((5, 3), 8, 0, 0), ((1, 1), 4, 3, 1),
                                ((4, 2), 8, 1, 2)]:
            got = decode_offsets_to_roi(np.zeros(2 * h * w), (h, w), X, Y, S)
            np.testing.assert_allclose(tuple(got), tuple(implicit_roi(X, Y, (h, w), S)),
                                       atol=1e-12)

    def test_round_trip_through_roiconv_offsets(self):
        # needs two taps per axis: a single tap only pins the centre
        rng = Rng(12)
        for (h, w) in [(3, 3), (5, 5), (3, 5), (2, 4)]:
            boxes = random_boxes(rng, 25, -20, 100, 1, 80).reshape(5, 5, 4)
            off = roiconv_offsets(boxes, (h, w), 8).tensor
            for X in range(5):
                for Y in range(5):
                    got = decode_offsets_to_roi(off[:, X, Y], (h, w), X, Y, 8)
                    np.testing.assert_allclose(tuple(got), boxes[X, Y], atol=1e-9)

    def test_row_shift(self):
        off = np.zeros(18)
        off[0::2] = 1.0
        got = decode_offsets_to_roi(off, (3, 3), 4, 4, 16)
        ref = implicit_roi(4, 4, (3, 3), 16)
        np.testing.assert_allclose(tuple(got), (ref.x1 + 16, ref.y1, ref.x2 + 16, ref.y2))


class TestAlignmentHistogram:
    def test_concentric_squares(self):
        rois, anchors = [], []
        grid = make_anchor_grid(6, 6, 16, 4)
        for X in range(6):
            for Y in range(6):
                rois.append(implicit_roi(X, Y, (3, 3), 16))
                anchors.append(grid[X, Y])
        edges, counts = alignment_histogram(rois, anchors)
        assert iou(rois[0], anchors[0]) == pytest.approx(48 ** 2 / 64 ** 2)
        assert counts.sum() == 36
        assert counts[int(0.5625 / 0.05)] == 36

    def test_identical_boxes_top_bin(self):
        b = [(0, 0, 5, 5)] * 4
        edges, counts = alignment_histogram(b, b)
        assert len(counts) == 20 and counts[-1] == 4 and counts[:-1].sum() == 0
        assert edges[0] == 0 and edges[-1] == 1

    @pytest.mark.parametrize("bw", [0.0, -0.1, 1.5])
    def test_bad_width(self, bw):
        with pytest.raises(ValueError):
            alignment_histogram([], [], bw)

    def test_csv(self):
        edges, counts = alignment_histogram([(0, 0, 1, 1)], [(0, 0, 1, 1)], 0.5)
        assert histogram_csv(edges, counts) == "bin_lo,bin_hi,count\n0.0000,0.5000,0\n0.5000,1.0000,1\n"

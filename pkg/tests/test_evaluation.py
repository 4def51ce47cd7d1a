import itertools

import numpy as np
import pytest

from alffdet.evaluation import (DatasetStats, Detection, EvaluationError,
                                average_precision, ap_range, density_split,
                                iou, match_detections)
from alffdet.geometry import Box


def box(x, y, w=10, h=10):
    return Box(x, y, x + w, y + h)


def ap_oracle(dets, gts, iou_thr):
    """Plain-Python 101-point AP: greedy matching per image, global sort,
    interpolated precision scanned point by point."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return 0.0
    flags = []
    for pos, (img, ds) in enumerate(dets.items()):
        gs = list(gts.get(img, []))
        taken = [False] * len(gs)
        order = sorted(range(len(ds)), key=lambda k: (-ds[k].score, k))
        tp = [False] * len(ds)
        for k in order:
            best, bj = -1.0, -1
            for j, g in enumerate(gs):
                if taken[j]:
                    continue
                v = iou(ds[k].box, g)
                if v >= iou_thr and v > best:
                    best, bj = v, j
            if bj >= 0:
                taken[bj] = True
                tp[k] = True
        for k, d in enumerate(ds):
            flags.append((d.score, pos, k, tp[k]))
    if not flags:
        return 0.0
    flags.sort(key=lambda t: (-t[0], t[1], t[2]))
    prec, rec = [], []
    tp_cum = fp_cum = 0
    for _, _, _, hit in flags:
        tp_cum += int(hit)
        fp_cum += int(not hit)
        prec.append(tp_cum / (tp_cum + fp_cum))
        rec.append(tp_cum / n_gt)
    total = 0.0
    for r in [i / 100 for i in range(101)]:
        best = 0.0
        for p, rr in zip(prec, rec):
            if rr >= r - 1e-12 and p > best:
                best = p
        total += best
    return total / 101


class TestIou:
    def test_identical(self):
        assert iou(box(0, 0), box(0, 0)) == 1.0

    def test_disjoint(self):
        assert iou(box(0, 0), box(20, 20)) == 0.0

    def test_half_shift(self):
        assert iou(box(0, 0), box(5, 0)) == pytest.approx(50 / 150)

    def test_symmetric(self):
        a, b = box(0, 0, 8, 12), box(3, 5, 10, 6)
        assert iou(a, b) == pytest.approx(iou(b, a))


class TestMatching:
    def test_each_gt_matched_once(self):
        gts = [box(0, 0)]
        dets = [Detection(box(0, 0), 0.9), Detection(box(1, 0), 0.8)]
        res = match_detections(dets, gts, 0.5)
        assert res.tp.tolist() == [True, False]

    def test_score_order_decides(self):
        gts = [box(0, 0)]
        dets = [Detection(box(1, 0), 0.5), Detection(box(0, 0), 0.9)]
        res = match_detections(dets, gts, 0.5)
        # the higher-scored detection claims the ground truth first
        assert res.tp.tolist() == [False, True]

    def test_highest_iou_gt_preferred(self):
        gts = [box(0, 0), box(2, 0)]
        dets = [Detection(box(2, 0), 0.9)]
        res = match_detections(dets, gts, 0.3)
        assert res.gt_matched.tolist() == [False, True]

    def test_below_threshold_is_fp(self):
        res = match_detections([Detection(box(8, 0), 0.9)], [box(0, 0)], 0.5)
        assert res.fp.tolist() == [True]

    def test_score_range_enforced(self):
        with pytest.raises(EvaluationError):
            Detection(box(0, 0), 1.2)


def crafted_instances():
    """Every small detection/ground-truth layout used for exact AP checks."""
    rng = np.random.default_rng(17)
    cases = []
    # perfect single detection
    cases.append(({0: [Detection(box(0, 0), 0.9)]}, {0: [box(0, 0)]}))
    # one hit one miss
    cases.append(({0: [Detection(box(0, 0), 0.9), Detection(box(50, 50), 0.8)]},
                  {0: [box(0, 0)]}))
    # missed ground truth
    cases.append(({0: [Detection(box(0, 0), 0.9)]},
                  {0: [box(0, 0), box(40, 40)]}))
    # duplicate detections on one target
    cases.append(({0: [Detection(box(0, 0), 0.9), Detection(box(0, 1), 0.7)]},
                  {0: [box(0, 0)]}))
    # two images, crossed quality
    cases.append(({0: [Detection(box(0, 0), 0.6)],
                   1: [Detection(box(0, 0), 0.8), Detection(box(30, 0), 0.4)]},
                  {0: [box(0, 0)], 1: [box(0, 0), box(30, 0)]}))
    # tied scores
    cases.append(({0: [Detection(box(0, 0), 0.5), Detection(box(30, 0), 0.5),
                       Detection(box(60, 60), 0.5)]},
                  {0: [box(0, 0), box(30, 0)]}))
    # no detections at all
    cases.append(({0: []}, {0: [box(0, 0)]}))
    # randomized small layouts up to 5 detections / 4 ground truths
    for _ in range(60):
        nd, ng = int(rng.integers(0, 6)), int(rng.integers(1, 5))
        dets = [Detection(box(float(rng.uniform(0, 60)), float(rng.uniform(0, 60))),
                          float(rng.uniform(0.05, 1.0))) for _ in range(nd)]
        gts = [box(float(rng.uniform(0, 60)), float(rng.uniform(0, 60)))
               for _ in range(ng)]
        cases.append(({0: dets}, {0: gts}))
    return cases


class TestAveragePrecision:
    def test_matches_oracle_exactly(self):
        for dets, gts in crafted_instances():
            for thr in (0.5, 0.75):
                assert average_precision(dets, gts, thr) == ap_oracle(dets, gts, thr)

    def test_perfect_detections_give_one(self):
        gts = {0: [box(0, 0), box(30, 30)]}
        dets = {0: [Detection(b, 0.9) for b in gts[0]]}
        assert average_precision(dets, gts, 0.5) == pytest.approx(1.0)

    def test_no_detections_give_zero(self):
        assert average_precision({0: []}, {0: [box(0, 0)]}, 0.5) == 0.0

    def test_monotone_in_iou_threshold(self):
        rng = np.random.default_rng(23)
        for _ in range(200):
            nd, ng = int(rng.integers(1, 8)), int(rng.integers(1, 6))
            dets = {0: [Detection(box(float(rng.uniform(0, 50)),
                                      float(rng.uniform(0, 50)),
                                      float(rng.uniform(6, 14)),
                                      float(rng.uniform(6, 14))),
                                  float(rng.uniform(0, 1))) for _ in range(nd)]}
            gts = {0: [box(float(rng.uniform(0, 50)), float(rng.uniform(0, 50)))
                       for _ in range(ng)]}
            aps = [average_precision(dets, gts, t)
                   for t in (0.3, 0.5, 0.7, 0.9)]
            assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))

    def test_ap_range_consistency(self):
        dets, gts = crafted_instances()[4]
        ap50, ap75, mean = ap_range(dets, gts)
        assert ap50 == average_precision(dets, gts, 0.5)
        assert ap75 == pytest.approx(average_precision(dets, gts, 0.75))
        assert min(ap75, 0.0) <= mean <= ap50


class TestDensitySplit:
    def test_table_anchor_low(self):
        assert density_split([77.30]).split == "low"

    def test_table_anchor_high(self):
        assert density_split([256.68]).split == "high"

    def test_boundary_value_is_high(self):
        assert density_split([100.0]).split == "high"

    def test_just_below_boundary_is_low(self):
        assert density_split([99.999]).split == "low"

    def test_mean_over_images(self):
        stats = density_split([50, 150])
        assert stats.heads_per_image == 100.0 and stats.split == "high"

    def test_out_of_range_rejected(self):
        with pytest.raises(EvaluationError):
            density_split([400])
        with pytest.raises(EvaluationError):
            density_split([])

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import mannwhitneyu

from affmap.errors import AllZeroMap, ShapeMismatch
from affmap.metrics import (OverlapCounts, auc_judd, average_precision, evaluate, f1, kld, miou,
                            sim)

from oracles import ap_enumerate, auc_pairwise


def test_kld_examples():
    assert kld([1, 2, 3], [1, 2, 3]) <= 1e-9
    assert kld([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), abs=1e-9)
    assert kld([1, 0], [0.5, 0.5]) != kld([0.5, 0.5], [1, 0])
    with pytest.raises(AllZeroMap):
        kld([0, 0], [1, 0])


def test_kld_scale_invariant_and_nonneg(rng):
    for _ in range(50):
        a, b = rng.random((4, 4)), rng.random((4, 4))
        assert kld(a, b) >= 0
        # smoothing is added before normalization, so scaling moves KLD only at the delta level
        assert kld(a * 3, b) == pytest.approx(kld(a, b), abs=1e-6)
        assert kld(a, a * 7.5) <= 1e-9


def test_sim_examples():
    assert sim([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert sim([1, 0], [0, 1]) == 0.0
    assert sim([0.25, 0.75], [0.75, 0.25]) == 0.5


def test_auc_examples():
    assert auc_judd([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0
    assert auc_judd([1, 1, 1, 1], [1, 0, 1, 0]) == 0.5


def test_auc_judd_variant_differs_from_rank_statistic():
    """Positive-only thresholds lose the area under a trailing negative run."""
    assert auc_judd([3, 2, 1], [1, 0, 1]) == 0.5
    assert auc_judd([3, 2, 1], [1, 0, 1], variant="judd") == 0.75


def test_auc_exhaustive_small_grids():
    # every grid of up to 4 pixels, every labeling, values from 3 levels
    shapes = [(1, 2), (2, 1), (1, 3), (1, 4), (2, 2)]
    count = 0
    for shape in shapes:
        n = shape[0] * shape[1]
        for vals in itertools.product(range(3), repeat=n):
            for labels in itertools.product((0, 1), repeat=n):
                if 0 < sum(labels) < n:
                    pred = np.array(vals, dtype=float).reshape(shape)
                    gt = np.array(labels).reshape(shape)
                    assert auc_judd(pred, gt) == float(auc_pairwise(pred, gt))
                    count += 1
    assert count > 1000


def test_auc_matches_scipy_mann_whitney(rng):
    for _ in range(50):
        s = rng.integers(0, 5, 30).astype(float)
        g = rng.integers(0, 2, 30).astype(bool)
        if g.all() or not g.any():
            continue
        u = mannwhitneyu(s[g], s[~g]).statistic
        assert auc_judd(s, g) == pytest.approx(u / (g.sum() * (~g).sum()), abs=1e-12)


def test_miou_examples():
    m = np.array([[[1, 1]], [[0, 0]]])
    iou, mean = miou(m, m)
    assert iou[0] == 1.0 and np.isnan(iou[1]) and mean == 1.0
    iou, _ = miou(np.array([[[1, 0]]]), np.array([[[1, 1]]]))
    assert iou[0] == 0.5
    assert f1(np.array([[[1, 0]]]), np.array([[[1, 1]]])) == pytest.approx(2 / 3)
    assert f1(np.array([[[1, 0]]]), np.array([[[0, 1]]])) == 0.0


def test_f1_iou_relation_exact(rng):
    for _ in range(100):
        p = rng.integers(0, 2, (4, 6, 6))
        g = rng.integers(0, 2, (4, 6, 6))
        c = OverlapCounts.from_masks(p, g)
        iou, dice = c.iou(), c.dice()
        for k in range(4):
            if not np.isnan(iou[k]):
                # integer form of F1 = 2 IoU / (1 + IoU): both equal 2tp / (2tp + fp + fn)
                assert dice[k] == 2 * iou[k] / (1 + iou[k]) or \
                    abs(dice[k] - 2 * iou[k] / (1 + iou[k])) <= 2 ** -52


def test_miou_global_accumulation_and_order(rng):
    preds = [rng.integers(0, 2, (3, 4, 4)) for _ in range(5)]
    gts = [rng.integers(0, 2, (3, 4, 4)) for _ in range(5)]
    a = miou(preds, gts)
    b = miou(preds[::-1], gts[::-1])
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    stacked = miou(np.concatenate(preds, axis=1), np.concatenate(gts, axis=1))
    assert np.array_equal(a[0], stacked[0])


def test_miou_class_permutation(rng):
    p, g = rng.integers(0, 2, (5, 4, 4)), rng.integers(0, 2, (5, 4, 4))
    perm = rng.permutation(5)
    assert np.array_equal(miou(p[perm], g[perm])[0], miou(p, g)[0][perm])


def test_ap_examples():
    g = np.array([[[1, 0, 1, 0]]])
    ap, mAP, ap50, _ = average_precision(g.astype(float), g)
    assert ap[0] == 1.0 and mAP == 1.0 and ap50 == 1.0
    ap, *_ = average_precision(np.full((1, 1, 4), 0.3), g)
    assert ap[0] == 0.5


def test_ap_enumeration_oracle(rng):
    for _ in range(200):
        scores = rng.integers(0, 4, (1, 4)).astype(float) / 3
        gt = rng.integers(0, 2, (1, 4))
        if not gt.any():
            gt[0, rng.integers(0, 4)] = 1
        ap, _, ap50, _ = average_precision(scores, gt)
        want_ap, want_ap50 = ap_enumerate(scores, gt)
        assert ap[0] == pytest.approx(want_ap, abs=1e-12)
        assert ap50 == pytest.approx(want_ap50, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        miou(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_evaluate_identity_report():
    classes = ("a", "b", "c")
    gt = np.zeros((3, 8, 8), np.uint8)
    gt[0, 2:4, 2:4] = 1
    gt[1, 5:7, 1:6] = 1
    rep = evaluate([gt], [gt], classes)
    d = rep.to_dict()
    assert d["mIoU"] == 1.0 and d["F1"] == 1.0 and d["KLD"] <= 1e-9
    assert d["SIM"] == pytest.approx(1.0) and d["AUC-J"] == 1.0
    assert d["mAP"] == 1.0 and d["AP50"] == 1.0 and d["per_class_iou"]["c"] is None
    assert "mIoU" in rep.table()


@given(st.lists(st.floats(0, 1), min_size=4, max_size=16), st.data())
@settings(max_examples=100, deadline=None)
def test_bounded_metrics_in_unit_interval(vals, data):
    s = np.array(vals)
    g = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(vals), max_size=len(vals))))
    if 0 < g.sum() < len(g):
        assert 0.0 <= auc_judd(s, g) <= 1.0
    if s.any() and g.any():
        assert 0.0 <= sim(s, g) <= 1.0
        assert kld(s, g) >= 0.0
        ap, *_ = average_precision(s[None], g[None])
        assert 0.0 <= ap[0] <= 1.0

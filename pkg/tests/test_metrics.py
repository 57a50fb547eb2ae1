import math

import numpy as np
import pytest

from vcas.labels import CategoryTable, LabelMap
from vcas.metrics import (
    BinaryIoUAccumulator,
    ConfusionAccumulator,
    MatchResult,
    compute_ca_iou,
    compute_caq,
    compute_pq,
    match_instances,
)

from oracles import brute_match

CATS = CategoryTable.from_records(
    [
        {"id": 1, "name": "road", "isthing": False},
        {"id": 2, "name": "sky", "isthing": False},
        {"id": 26, "name": "car", "isthing": True},
        {"id": 24, "name": "person", "isthing": True},
    ]
)


def _random_scene(rng, size=48, n=8, class_aware=False, fill_pred=True):
    gt = np.zeros((size, size), np.int64)
    pred = np.zeros_like(gt)
    for i in range(1, n + 1):
        h, w = rng.integers(3, 18, 2)
        y, x = rng.integers(0, size - h), rng.integers(0, size - w)
        cat = rng.choice([26, 24]) if class_aware else 0
        gid = cat * 1000 + i if class_aware else i
        gt[y:y + h, x:x + w] = gid
        dy, dx = rng.integers(-4, 5, 2)
        y2, x2 = np.clip(y + dy, 0, size - h), np.clip(x + dx, 0, size - w)
        pcat = cat if rng.random() < 0.85 else (24 if cat == 26 else 26)
        pred[y2:y2 + h, x2:x2 + w] = pcat * 1000 + i if class_aware else i + 50
    if class_aware:
        gt[gt == 0] = 1000  # road stuff
        gt[:4] = 0  # void band
        if fill_pred:
            pred[pred == 0] = 1000
            pred[rng.random(pred.shape) < 0.02] = 2000
    return LabelMap(pred, class_aware), LabelMap(gt, class_aware)


def test_identity_match_all_tp():
    rng = np.random.default_rng(3)
    _, gt = _random_scene(rng)
    m = match_instances(gt, gt)
    assert m.fp == [] and m.fn == []
    assert all(v == 1.0 for _, _, v in m.tp)


def test_threshold_is_strict():
    gt = np.zeros((20, 20), int)
    gt[0:10, 0:10] = 1
    pred = np.zeros_like(gt)
    pred[0:5, 0:10] = 7  # exactly half of gt, IoU 0.5
    m = match_instances(LabelMap(pred), LabelMap(gt))
    assert m.tp == [] and m.fp == [7] and m.fn == [1]


@pytest.mark.parametrize("class_aware", [False, True])
def test_matching_equals_brute_force(class_aware):
    rng = np.random.default_rng(11 + class_aware)
    for _ in range(40):
        pred, gt = _random_scene(rng, class_aware=class_aware)
        m = match_instances(pred, gt, class_aware=class_aware)
        tp, fp, fn, ignored = brute_match(pred.ids, gt.ids, class_aware)
        assert [(p, g) for p, g, _ in m.tp] == [(p, g) for p, g, _ in tp]
        assert [v for *_, v in m.tp] == [v for *_, v in tp]
        assert m.fp == fp and m.fn == fn and m.ignored == ignored


def test_void_rules():
    gt = np.zeros((10, 10), int)
    gt[:, 5:] = 26001
    pred = np.zeros_like(gt)
    pred[:, 3:] = 26005  # 20 px on void, 50 px on the car
    pred[0:2, 0:3] = 26006  # entirely on void
    m = match_instances(LabelMap(pred, True), LabelMap(gt, True), class_aware=True)
    # void pixels are dropped from the union: 50 / (70 + 50 - 50 - 20) = 1
    assert m.tp == [(26005, 26001, 1.0)]
    assert m.ignored == [26006] and m.fp == []
    # class-agnostic: 0 is background, no discount
    ca = match_instances(LabelMap(pred), LabelMap(gt))
    assert ca.tp == [(26005, 26001, 50 / 70)]
    assert ca.fp == [26006]


def test_caq_examples():
    m = MatchResult(tp=[(1, 1, 0.8), (2, 2, 0.6)], fn=[3, 4])
    r = compute_caq(m)
    assert r.sq == pytest.approx(0.7, abs=1e-15)
    assert r.rq == 0.5
    assert r.caq == pytest.approx(0.35, abs=1e-15)
    assert r.caq == r.sq * r.rq
    empty = compute_caq(MatchResult())
    assert (empty.sq, empty.rq, empty.caq) == (0.0, 0.0, 0.0)


def test_unmatched_prediction_leaves_ca_metrics_alone_but_not_pq():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred, gt = _random_scene(rng, class_aware=True, fill_pred=False)
        ids = pred.ids.astype(np.int64)
        before_ca = compute_caq(match_instances(pred, gt))
        before_pq = compute_pq(match_instances(pred, gt, class_aware=True), CATS)
        # a new thing prediction on a 2x2 block nobody predicted, over gt stuff
        ok = (gt.ids == 1000) & (pred.ids == 0)
        ok2 = ok[:-1, :-1] & ok[1:, :-1] & ok[:-1, 1:] & ok[1:, 1:]
        free = np.argwhere(ok2)
        y, x = free[rng.integers(len(free))]
        ids[y:y + 2, x:x + 2] = 24999
        after = LabelMap(ids, True)
        after_ca = compute_caq(match_instances(after, gt))
        after_pq = compute_pq(match_instances(after, gt, class_aware=True), CATS)
        assert (after_ca.sq, after_ca.rq, after_ca.caq) == (before_ca.sq, before_ca.rq, before_ca.caq)
        assert after_ca.fp >= before_ca.fp
        assert after_pq.per_class[24]["PQ"] <= before_pq.per_class.get(24, {"PQ": 1.0})["PQ"]


def test_pq_examples():
    m = MatchResult(tp=[(26001, 26001, 0.75)], fp=[26002], fn=[26003], categorized=True)
    r = compute_pq(m, CATS)
    assert r.per_class[26]["PQ"] == 0.375
    assert r.pq_th == 0.375 and math.isnan(r.pq_st)
    none = compute_pq(MatchResult(fn=[26001, 1000], categorized=True), CATS)
    assert none.pq_all == 0.0


def test_pq_perfect_and_means():
    rng = np.random.default_rng(8)
    _, gt = _random_scene(rng, class_aware=True)
    r = compute_pq(match_instances(gt, gt, class_aware=True), CATS)
    assert all(v["PQ"] == 1.0 for v in r.per_class.values())
    assert r.pq_all == r.pq_th == r.pq_st == 1.0


def test_pq_all_is_mean_of_present_classes():
    m = MatchResult(
        tp=[(26001, 26001, 0.9), (1000, 1000, 0.8)], fn=[24001], categorized=True
    )
    r = compute_pq(m, CATS)
    assert set(r.per_class) == {1, 24, 26}
    assert r.pq_all == pytest.approx((0.9 + 0.8 + 0.0) / 3)
    assert r.pq_th == pytest.approx(0.45)
    assert r.pq_st == pytest.approx(0.8)


def test_pq_rejects_empty_table_and_unknown_category():
    m = MatchResult(fn=[7001], categorized=True)
    with pytest.raises(ValueError):
        compute_pq(m, CategoryTable())
    with pytest.raises(ValueError, match="not in the category table"):
        compute_pq(m, CATS)


def test_ca_iou_examples():
    a = np.zeros((30, 30), bool)
    a[5:15, 5:15] = True
    b = np.zeros_like(a)
    b[10:20, 5:15] = True
    assert compute_ca_iou(a, a) == 1.0
    assert compute_ca_iou(a, b) == pytest.approx(1 / 3, abs=1e-15)
    assert compute_ca_iou(np.zeros_like(a), a) == 0.0
    assert compute_ca_iou(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_accumulators_are_order_fixed_sums():
    acc = BinaryIoUAccumulator()
    acc.add([[1, 0]], [[1, 1]]).add([[0, 0]], [[0, 1]])
    assert acc.value == 1 / 3
    conf = ConfusionAccumulator(2)
    conf.add(np.array([0, 1, 5, 1]), np.array([0, 1, 1, -1]))
    # class 1: tp 1, gt 2 px (one predicted out of range), pred 1 px
    assert conf.ious().tolist() == [1.0, 0.5]
    assert conf.miou() == 0.75

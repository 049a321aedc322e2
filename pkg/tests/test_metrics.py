import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salprop.data import SynthConfig, generate
from salprop.metrics import Prediction, auc, cdice, evaluate, format_table, iou, t_iou
from salprop.regions import Box, box_masks


def pairwise_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def pixel_iou(a, b, size=64):
    ma = box_masks(a.as_array(), (size, size), stride=1)
    mb = box_masks(b.as_array(), (size, size), stride=1)
    union = np.logical_or(ma, mb).sum()
    return np.logical_and(ma, mb).sum() / union


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    assert auc([0.3, 0.2], [1, 1]) is None


def test_auc_monotone_invariance():
    rng = np.random.default_rng(0)
    s = rng.normal(size=50)
    y = rng.integers(0, 2, 50)
    assert auc(s, y) == auc(np.exp(3 * s) + 1, y)


def test_auc_matches_pair_count_with_ties():
    rng = np.random.default_rng(1)
    s = rng.integers(0, 5, 40).astype(float)
    y = rng.integers(0, 2, 40)
    assert auc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12)


def test_iou_example():
    a = Box.from_corners(0, 0, 2, 2)
    b = Box.from_corners(1, 1, 3, 3)
    assert iou(a, b) == pytest.approx(1 / 7)
    assert iou(a, Box.from_corners(5, 5, 6, 6)) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 32), min_size=8, max_size=8))
def test_iou_symmetric_and_matches_pixels(v):
    a = Box.from_corners(min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 1, max(v[2], v[3]) + 1)
    b = Box.from_corners(min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 1, max(v[6], v[7]) + 1)
    assert iou(a, b) == iou(b, a)
    assert iou(a, b) == pytest.approx(pixel_iou(a, b), abs=1e-12)


def test_cdice_examples():
    gt = Box.from_corners(0, 0, 8, 8)
    mask = box_masks(gt.as_array(), (4, 4), stride=4)
    assert cdice(mask, gt) == 1.0
    half = np.zeros((4, 4))
    half[:2, :2] = 1
    half[:2, 2] = 1  # 6 px, 4 inside a 4 px box
    assert cdice(half, gt) == pytest.approx(2 * 4 / (6 + 4))
    far = np.zeros((4, 4))
    far[3, 3] = 1
    assert cdice(far, gt) == 0.0


def test_cdice_identity_on_binary_box_maps():
    # for binary box maps, Dice = 2 IoU / (1 + IoU)
    gt = Box.from_corners(0, 0, 16, 12)
    pred = Box.from_corners(4, 4, 24, 20)
    mp = box_masks(pred.as_array(), (8, 8), stride=4)
    j = iou(pred, gt)
    assert cdice(mp, gt) == pytest.approx(2 * j / (1 + j))


def test_t_iou_examples():
    assert t_iou([0.2, 0.4, 0.6], 0.3) == pytest.approx(2 / 3)
    assert t_iou([0.5], 0.5) == 1.0
    assert t_iou([], 0.5) is None


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_t_iou_non_increasing(v, a, b):
    lo, hi = min(a, b), max(a, b)
    assert t_iou(v, hi) <= t_iou(v, lo)


def _perfect(records):
    return [Prediction(r.image_id, r.labels.astype(float), list(r.boxes)) for r in records]


def test_evaluate_perfect_predictions():
    recs = generate(SynthConfig(seed=4, image_size=(64, 64), size_range=(8, 16)), 30)
    rep = evaluate(_perfect(recs), recs)
    assert rep.mean_auc == 1.0 and rep.mean_iou == 1.0
    assert all(v == 1.0 for v in rep.mean_t_iou.values())
    assert rep.mean_cdice is None
    assert json.loads(rep.to_json())["n_samples"] == 30


def test_evaluate_rejects_shuffled_ids():
    recs = generate(SynthConfig(seed=4, image_size=(64, 64), size_range=(8, 16)), 5)
    preds = _perfect(recs)
    preds[1], preds[3] = preds[3], preds[1]
    with pytest.raises(ValueError, match="2 offenders"):
        evaluate(preds, recs)


def test_evaluate_matches_brute_force():
    recs = generate(SynthConfig(seed=5, image_size=(64, 64), size_range=(8, 16)), 10)
    rng = np.random.default_rng(0)
    preds = []
    for r in recs:
        boxes = []
        for b in r.boxes:
            if b is None or rng.random() < 0.2:
                boxes.append(None)
            else:
                boxes.append(Box(b.cx + rng.integers(-4, 5), b.cy + rng.integers(-4, 5), b.w, b.h))
        maps = rng.uniform(size=(4, 16, 16))
        preds.append(Prediction(r.image_id, rng.uniform(size=4), boxes, maps))
    rep = evaluate(preds, recs)
    for k in range(4):
        vals, dices = [], []
        for p, r in zip(preds, recs):
            if r.boxes[k] is None:
                continue
            vals.append(pixel_iou(p.boxes[k], r.boxes[k], 64) if p.boxes[k] is not None else 0.0)
            m = box_masks(r.boxes[k].as_array(), (16, 16), 4)
            dices.append(2 * (p.maps[k] * m).sum() / (p.maps[k].sum() + m.sum()))
        if vals:
            assert rep.iou[k] == pytest.approx(np.mean(vals), abs=1e-12)
            assert rep.cdice[k] == pytest.approx(np.mean(dices), abs=1e-12)
            assert rep.t_iou["0.5"][k] == pytest.approx(np.mean(np.array(vals) >= 0.5))
        y = np.array([r.labels[k] for r in recs])
        s = np.array([p.scores[k] for p in preds])
        if 0 < y.sum() < len(y):
            assert rep.auc[k] == pytest.approx(pairwise_auc(s, y), abs=1e-12)


def test_table_layout():
    recs = generate(SynthConfig(seed=4, image_size=(64, 64), size_range=(8, 16)), 12)
    rep = evaluate(_perfect(recs), recs, class_names=["blob", "rect", "ring", "cross"])
    text = format_table({"Sal": rep, "Mix": rep})
    lines = text.splitlines()
    assert lines[0].split()[:3] == ["Metric", "Method", "blob"]
    assert any(line.startswith("IoU") and "Sal" in line for line in lines)
    assert sum("Mix" in line for line in lines) == 6

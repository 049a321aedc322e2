import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from salprop.data import SynthConfig, generate
from salprop.net import (
    AugmentRanges,
    Model,
    ModelConfig,
    TrainConfig,
    compute_class_weights,
    loss_cls,
    loss_rpn,
    lse_pool,
    train,
)
from salprop.net.augment import AffineParams, apply_affine
from salprop.net.losses import ClassWeights
from salprop.net.model import PARAM_GROUPS
from salprop.net.train import train_step
from salprop.tensor import Tensor, grad_check, no_grad


def tiny_config(**kw):
    base = dict(
        image_size=(32, 32),
        num_classes=2,
        channels=(4, 4, 4),
        fpn_channels=4,
        anchor_sizes=(16,),
        anchor_strides=(16,),
        det_hidden=8,
        crop_size=(16, 16),
        crop_channels=(4, 4, 4, 4),
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_data(n=8, seed=0):
    cfg = SynthConfig(image_size=(32, 32), num_classes=2, shapes=("blob", "rect"), size_range=(6, 12), marginals=(0.5, 0.5), seed=seed)
    return generate(cfg, n)


# -- LSE pooling --------------------------------------------------------------------


def test_lse_constant_map():
    for r in (0.5, 1.0, 5.0):
        assert lse_pool(Tensor(np.full((1, 1, 4, 4), 1.7)), r).item() == pytest.approx(1.7, abs=1e-12)


def test_lse_two_values():
    m = Tensor(np.array([[[[0.0, math.log(3.0)]]]]))
    assert lse_pool(m, 1.0).item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_lse_large_r_tends_to_max():
    m = np.zeros((1, 1, 4, 4))
    m[0, 0, 2, 1] = 2.0
    assert lse_pool(Tensor(m), 1e4).item() == pytest.approx(2.0, abs=1e-3)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.floats(0.1, 10.0))
def test_lse_mean_normalised_bounds(x, r):
    v = lse_pool(Tensor(x[None, None]), r).item()
    n = x.size
    assert x.max() - math.log(n) / r - 1e-9 <= v <= x.max() + 1e-9
    assert v >= x.mean() - 1e-9


def test_lse_gradient():
    rng = np.random.default_rng(0)
    assert grad_check(lambda t: lse_pool(t, 5.0).sum(), rng.uniform(-1, 1, (1, 2, 4, 4))) < 1e-4


# -- losses ---------------------------------------------------------------------------


def test_loss_half_logit_example():
    w = ClassWeights(np.array([0.9]), np.array([0.1]))
    assert loss_cls(Tensor([[0.0]]), [[1]], w).item() == pytest.approx(0.9 * math.log(2.0), abs=1e-12)
    assert loss_rpn(Tensor([[0.0]]), [[1]], w).item() == pytest.approx(0.6238, abs=1e-4)


def test_loss_vanishes_for_confident_correct_prediction():
    w = ClassWeights(np.array([0.7, 0.4]), np.array([0.3, 0.6]))
    assert loss_cls(Tensor([[60.0, -60.0]]), [[1, 0]], w).item() < 1e-20


def test_equal_weights_give_half_bce():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 3))
    y = rng.integers(0, 2, (5, 3))
    p = 1 / (1 + np.exp(-x))
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum(axis=1).mean()
    w = ClassWeights(np.full(3, 0.5), np.full(3, 0.5))
    assert loss_cls(Tensor(x), y, w).item() == pytest.approx(0.5 * bce, rel=1e-12)


def test_loss_is_non_negative():
    rng = np.random.default_rng(2)
    for _ in range(20):
        w = compute_class_weights(rng.integers(0, 2, (10, 4)))
        assert loss_cls(Tensor(rng.normal(size=(6, 4)) * 5), rng.integers(0, 2, (6, 4)), w).item() >= 0.0


def test_class_weight_examples():
    y = np.zeros((10, 3))
    y[:, 1] = 1
    y[0, 2] = 1
    w = compute_class_weights(y)
    np.testing.assert_allclose(w.beta_p, [1.0, 0.0, 0.9])
    np.testing.assert_allclose(w.beta_n, [0.0, 1.0, 0.1])
    with pytest.raises(ValueError):
        compute_class_weights(np.zeros((0, 3)))


# -- detection branch ---------------------------------------------------------------


def test_single_anchor_always_selected():
    cfg = tiny_config(num_classes=1, anchor_sizes=(32,), anchor_strides=(32,))
    m = Model.init(cfg, 0)
    assert len(m.anchors) == 1
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32)))
    _, _, feats = m.forward_cls(x)
    for seed in range(5):
        det = m.forward_det(x, feats, 0.5, np.random.default_rng(seed))
        np.testing.assert_array_equal(det.sample.hard.data, np.ones((2, 1, 1)))


def test_frozen_noise_gives_identical_selection():
    m = Model.init(tiny_config(), 3)
    x = Tensor(np.random.default_rng(1).uniform(0, 1, (2, 3, 32, 32)))
    _, _, feats = m.forward_cls(x)
    noise = np.random.default_rng(2).gumbel(size=(2, 2, len(m.anchors)))
    a = m.forward_det(x, feats, 0.3, noise=noise)
    b = m.forward_det(x, feats, 0.3, noise=noise)
    np.testing.assert_array_equal(a.selected.data, b.selected.data)
    assert a.selected_boxes(0) == b.selected_boxes(0)
    assert len(a.proposals(0)) == 2 * len(m.anchors)


def test_z_loss_reaches_confidence_regressor():
    m = Model.init(tiny_config(), 4)
    recs = tiny_data()
    x = Tensor(np.stack([r.image for r in recs]).astype(np.float64))
    with no_grad():
        feats = m.features(x)
    det = m.forward_det(x, feats, 0.5, np.random.default_rng(0))
    loss_rpn(det.z_logit, np.stack([r.labels for r in recs]), compute_class_weights(recs)).backward()
    assert np.linalg.norm(m.params["det.conf.w"].grad) > 0


def test_stage3_step_reaches_every_group():
    m = Model.init(tiny_config(), 5)
    recs = tiny_data()
    imgs = np.stack([r.image for r in recs]).astype(np.float64)
    labels = np.stack([r.labels for r in recs]).astype(np.float64)
    total, lc, lr = train_step(m, imgs, labels, 3, compute_class_weights(recs), 0.5, np.random.default_rng(0))
    total.backward()
    assert math.isfinite(lc) and math.isfinite(lr)
    for g in PARAM_GROUPS:
        norm = sum(float(np.sum(p.grad**2)) for p in m.group(g) if p.grad is not None)
        assert norm > 0, g


def test_refined_boxes_stay_near_anchors():
    cfg = tiny_config()
    m = Model.init(cfg, 6)
    for p in m.group("det.delta"):
        p.data = p.data + 100.0
    _, _, feats = m.forward_cls(Tensor(np.ones((1, 3, 32, 32))))
    _, boxes = m.det_heads(feats)
    sizes = boxes.data[..., 2:]
    anchor = m.anchors.boxes[:, 2:]
    assert (sizes <= anchor * math.exp(cfg.max_log_scale) + 1e-9).all()


def test_checkpoint_shape_mismatch_reports_names(tmp_path):
    a = Model.init(tiny_config(), 0)
    a.save(tmp_path / "a.ckpt")
    b = Model.init(tiny_config(fpn_channels=6), 0)
    with pytest.raises(ValueError, match="incompatible checkpoint.*backbone.lateral.w"):
        b.load(tmp_path / "a.ckpt")
    c = Model.init(tiny_config(), 9)
    c.load(tmp_path / "a.ckpt")
    for n in a.params:
        np.testing.assert_array_equal(a.params[n].data, c.params[n].data)


# -- training -------------------------------------------------------------------------


def _quick(steps=(3, 2, 2), **kw):
    return TrainConfig(stage_steps=steps, batch_size=4, augment_ranges=AugmentRanges(translate=3.0), **kw)


def test_zero_learning_rate_keeps_parameters():
    m = Model.init(tiny_config(), 0)
    before = m.state()
    train(tiny_data(), _quick(learning_rates=(0.0, 0.0, 0.0), weight_decay=1e-3), m)
    for n, v in m.state().items():
        np.testing.assert_array_equal(v, before[n])


def test_stage_transitions_in_log():
    rows = train(tiny_data(), _quick((4, 3, 2)), Model.init(tiny_config(), 0))
    assert [r.stage for r in rows] == [1] * 4 + [2] * 3 + [3] * 2
    assert [r.step for r in rows] == list(range(9))
    assert all(math.isnan(r.tau) and math.isnan(r.loss_rpn) for r in rows[:4])
    assert rows[4].tau == 1.0 and rows[-1].tau == 0.001
    assert rows[5].tau == pytest.approx(0.001 ** 0.25)
    assert all(math.isnan(r.loss_cls) for r in rows[4:7])


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        m = Model.init(tiny_config(), 1)
        rows = train(tiny_data(), _quick(seed=7), m)
        runs.append(([(r.loss_cls, r.loss_rpn) for r in rows], m.state()))
    np.testing.assert_allclose(np.array(runs[0][0]), np.array(runs[1][0]), rtol=0, atol=1e-9)
    for n in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][n], runs[1][1][n])


def test_stage_callback_sees_each_stage():
    seen = []
    train(tiny_data(), _quick((1, 1, 1)), Model.init(tiny_config(), 0), on_stage_end=lambda s, m: seen.append(s))
    assert seen == [1, 2, 3]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rates=(1e-3, -1.0, 1e-4))
    with pytest.raises(ValueError):
        TrainConfig(stage_steps=(1, 2))


# -- augmentation ---------------------------------------------------------------------


def _blob(cx, cy, size=32):
    yy, xx = np.mgrid[:size, :size]
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 8.0)[None].repeat(3, axis=0)


def _centroid(img):
    yy, xx = np.mgrid[: img.shape[1], : img.shape[2]]
    m = img[0]
    return (xx * m).sum() / m.sum(), (yy * m).sum() / m.sum()


def test_identity_augmentation():
    img = np.random.default_rng(0).uniform(0, 1, (3, 16, 16))
    rng = np.random.default_rng(0)
    out = apply_affine(img, AffineParams())
    np.testing.assert_allclose(out, img, atol=1e-12)
    from salprop.net import augment

    np.testing.assert_allclose(augment(img, rng, AugmentRanges(zoom=(0, 0), translate=0, rotate=0, flip=False)), img, atol=1e-12)


def test_double_flip_is_identity():
    img = np.random.default_rng(1).uniform(0, 1, (3, 12, 12))
    once = apply_affine(img, AffineParams(flip=True))
    np.testing.assert_allclose(once, img[:, :, ::-1], atol=1e-12)
    np.testing.assert_allclose(apply_affine(once, AffineParams(flip=True)), img, atol=1e-12)


def test_translation_moves_centroid():
    img = _blob(10.0, 16.0)
    out = apply_affine(img, AffineParams(tx=10.0))
    cx, cy = _centroid(out)
    assert cx == pytest.approx(20.0, abs=1.0) and cy == pytest.approx(16.0, abs=1.0)


def test_boxes_follow_translation():
    from salprop.regions import Box

    _, boxes = apply_affine(np.zeros((3, 32, 32)), AffineParams(tx=5.0, ty=-2.0), [Box(10.0, 10.0, 6.0, 6.0), None])
    assert boxes[1] is None
    assert boxes[0].cx == pytest.approx(15.0) and boxes[0].cy == pytest.approx(8.0)
    _, gone = apply_affine(np.zeros((3, 32, 32)), AffineParams(tx=100.0), [Box(10.0, 10.0, 6.0, 6.0)])
    assert gone == [None]


def test_augmentation_is_seeded():
    img = np.random.default_rng(2).uniform(0, 1, (3, 16, 16))
    from salprop.net import augment

    a = augment(img, np.random.default_rng(5), AugmentRanges(translate=4.0))
    b = augment(img, np.random.default_rng(5), AugmentRanges(translate=4.0))
    np.testing.assert_array_equal(a, b)

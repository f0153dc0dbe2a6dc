import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from robustcnn.augment import _cut_box, cutmix, mixup, mixup_cutmix, random_erasing
from robustcnn.losses import DistillConfig, cross_entropy, kd_loss, kl_divergence, one_hot
from robustcnn.optim import AdamWState, TrainConfig, adamw_step, cosine_lr
from robustcnn.tensor import HIGH, Tensor, backward

from oracles import log_softmax


def _logits(rng, n=4, k=5):
    return Tensor(rng.normal(size=(n, k, 1, 1)), dtype=HIGH, requires_grad=True)


# ------------------------------------------------------------------ losses


def test_one_hot_smoothing():
    y = one_hot([0, 2], 3, smoothing=0.3)
    np.testing.assert_allclose(y, [[0.8, 0.1, 0.1], [0.1, 0.1, 0.8]])
    np.testing.assert_allclose(y.sum(axis=1), 1.0)


def test_cross_entropy_matches_oracle(rng):
    z = _logits(rng)
    labels = np.array([0, 1, 4, 2])
    loss = cross_entropy(z, labels)
    ref = -np.mean(log_softmax(z.data.reshape(4, 5))[np.arange(4), labels])
    assert loss.item() == pytest.approx(ref, rel=1e-12)
    backward(loss)
    grad = (softmax(z.data.reshape(4, 5), axis=1) - one_hot(labels, 5)) / 4
    np.testing.assert_allclose(z.grad.reshape(4, 5), grad, atol=1e-14)


def test_kl_two_class_hand_computed():
    s = Tensor(np.array([0.0, 0.0]).reshape(1, 2, 1, 1), dtype=HIGH)
    t = np.array([math.log(3.0), 0.0]).reshape(1, 2, 1, 1)
    # teacher probs (0.75, 0.25) against student (0.5, 0.5)
    expected = 0.75 * math.log(0.75 / 0.5) + 0.25 * math.log(0.25 / 0.5)
    assert kd_loss(s, t, [0], temperature=1.0, weight=1.0).item() == pytest.approx(expected, abs=1e-12)


def test_kd_equal_logits_reduces_to_weighted_ce(rng):
    z = _logits(rng)
    labels = np.array([1, 0, 3, 3])
    ce = cross_entropy(z, labels).item()
    for lam in (0.0, 0.25, 0.5, 0.9, 1.0):
        kd = kd_loss(z, z.data.copy(), labels, temperature=2.0, weight=lam).item()
        assert kd == pytest.approx((1 - lam) * ce, abs=1e-12)


def test_kd_zero_weight_is_ce(rng):
    z = _logits(rng)
    t = rng.normal(size=z.shape)
    labels = np.array([1, 0, 3, 3])
    assert abs(kd_loss(z, t, labels, 4.0, 0.0).item() - cross_entropy(z, labels).item()) < 1e-7


def test_kd_teacher_gets_no_gradient(rng):
    z = _logits(rng)
    t = _logits(rng)
    backward(kd_loss(z, t, [0, 1, 2, 3], 2.0, 0.5))
    assert t.grad is None or not np.any(t.grad)
    assert np.any(z.grad)


def test_kd_rejects_bad_temperature(rng):
    z = _logits(rng)
    for tau in (0.0, -1.0):
        with pytest.raises(ValueError):
            kd_loss(z, z.data, [0, 0, 0, 0], temperature=tau)
        with pytest.raises(ValueError):
            DistillConfig(object(), temperature=tau)
    with pytest.raises(ValueError):
        DistillConfig(object(), weight=1.5)


def test_kl_gradient_matches_finite_difference(rng):
    z = rng.normal(size=(3, 4, 1, 1))
    t = rng.normal(size=(3, 4, 1, 1))
    s = Tensor(z, dtype=HIGH, requires_grad=True)
    backward(kl_divergence(s, t, 3.0))
    h = 1e-6
    num = np.zeros_like(z)
    for i in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        num[i] = (kl_divergence(Tensor(zp, dtype=HIGH), t, 3.0).item() - kl_divergence(Tensor(zm, dtype=HIGH), t, 3.0).item()) / (2 * h)
    np.testing.assert_allclose(s.grad, num, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-20, 20), min_size=6, max_size=6),
    st.lists(st.floats(-20, 20), min_size=6, max_size=6),
    st.floats(0.1, 10),
    st.floats(0, 1),
)
def test_kd_is_non_negative(zs, zt, tau, lam):
    s = Tensor(np.array(zs).reshape(2, 3, 1, 1), dtype=HIGH)
    t = np.array(zt).reshape(2, 3, 1, 1)
    assert kd_loss(s, t, [0, 2], tau, lam).item() >= 0


# ------------------------------------------------------------------ schedule


def test_cosine_endpoints_and_midpoint():
    cfg = TrainConfig(base_lr=1e-3, min_lr=1e-5)
    total, warm = 1000, 100
    assert cosine_lr(0, total, cfg, warm) == 0.0
    assert cosine_lr(50, total, cfg, warm) == pytest.approx(5e-4)
    assert cosine_lr(warm, total, cfg, warm) == cfg.base_lr
    assert cosine_lr(total, total, cfg, warm) == cfg.min_lr
    assert cosine_lr(550, total, cfg, warm) == pytest.approx((cfg.base_lr + cfg.min_lr) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(total + 1, total, cfg, warm)


def test_cosine_non_increasing_after_warmup():
    cfg = TrainConfig(base_lr=2e-3, min_lr=0.0)
    lrs = [cosine_lr(t, 500, cfg, 37) for t in range(37, 501)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(base_lr=1e-5, min_lr=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(erase_prob=1.5)
    with pytest.raises(ValueError):
        TrainConfig(drop_path=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# ------------------------------------------------------------------ AdamW


def _params(rng, dtype=HIGH):
    return [Tensor(rng.normal(size=s), dtype=dtype) for s in ((3, 2, 1, 1), (1, 4, 1, 1))]


def test_adamw_zero_lr_is_identity(rng):
    ps = _params(rng)
    before = [p.data.copy() for p in ps]
    state = AdamWState.for_params(ps)
    adamw_step(ps, [rng.normal(size=p.shape) for p in ps], state, 0.0, TrainConfig())
    for p, b in zip(ps, before):
        np.testing.assert_array_equal(p.data, b)


def test_adamw_zero_grad_no_decay_is_identity(rng):
    ps = _params(rng)
    before = [p.data.copy() for p in ps]
    state = AdamWState.for_params(ps)
    cfg = TrainConfig(weight_decay=0.0)
    for _ in range(5):
        adamw_step(ps, [np.zeros(p.shape) for p in ps], state, 1e-2, cfg)
    for p, b in zip(ps, before):
        np.testing.assert_array_equal(p.data, b)


def test_adamw_pure_decay(rng):
    ps = _params(rng)
    before = [p.data.copy() for p in ps]
    state = AdamWState.for_params(ps)
    lr, wd = 1e-2, 0.1
    cfg = TrainConfig(weight_decay=wd)
    for k in range(1, 11):
        adamw_step(ps, [None, np.zeros(ps[1].shape)], state, lr, cfg)
        for p, b in zip(ps, before):
            np.testing.assert_allclose(p.data, b * (1 - lr * wd) ** k, atol=1e-9, rtol=0)


def test_adamw_decay_mask(rng):
    ps = _params(rng)
    before = ps[1].data.copy()
    state = AdamWState.for_params(ps)
    adamw_step(ps, [None, None], state, 1e-2, TrainConfig(weight_decay=0.5), decay=[True, False])
    np.testing.assert_array_equal(ps[1].data, before)


def test_adamw_constant_gradient_steps_by_sign(rng):
    ps = _params(rng)
    g = [rng.normal(size=p.shape) for p in ps]
    state = AdamWState.for_params(ps)
    lr = 1e-3
    cfg = TrainConfig(weight_decay=0.0)
    for _ in range(20):
        before = [p.data.copy() for p in ps]
        adamw_step(ps, g, state, lr, cfg)
    for p, b, gi in zip(ps, before, g):
        np.testing.assert_allclose(p.data - b, -lr * np.sign(gi), rtol=1e-5)


def test_adamw_rejects_non_finite_gradient(rng):
    ps = _params(rng)
    state = AdamWState.for_params(ps)
    bad = np.full(ps[0].shape, np.nan)
    with pytest.raises(FloatingPointError, match="w1"):
        adamw_step(ps, [bad, np.zeros(ps[1].shape)], state, 1e-3, TrainConfig(), names=["w1", "w2"])


# ------------------------------------------------------------------ augmentation


def test_mixup_lambda_one_is_identity(rng):
    x = rng.normal(size=(4, 3, 8, 8))
    np.testing.assert_array_equal(mixup(x, rng.permutation(4), 1.0), x)


def test_mixup_half_with_reverse_gives_pairwise_means(rng):
    x = rng.normal(size=(4, 3, 5, 5))
    out = mixup(x, np.arange(4)[::-1], 0.5)
    np.testing.assert_allclose(out, (x + x[::-1]) / 2)


def test_cutmix_lambda_from_area(rng):
    x = rng.normal(size=(2, 3, 32, 32))
    out, lam = cutmix(x, np.array([1, 0]), (8, 24, 8, 24))
    assert lam == 0.75
    np.testing.assert_array_equal(out[0, :, 8:24, 8:24], x[1, :, 8:24, 8:24])
    np.testing.assert_array_equal(out[0, :, :8], x[0, :, :8])


def test_cutmix_lambda_one_is_identity(rng):
    x = rng.normal(size=(3, 1, 16, 16))
    box = _cut_box(16, 16, 1.0, rng)
    out, lam = cutmix(x, np.array([2, 0, 1]), box)
    assert lam == 1.0
    np.testing.assert_array_equal(out, x)


def test_mixup_cutmix_disabled_returns_batch(rng):
    x = rng.normal(size=(4, 3, 8, 8))
    y = np.arange(4)
    cfg = TrainConfig(mixup_alpha=0, cutmix_alpha=0)
    xm, ya, yb, lam = mixup_cutmix(x, y, cfg, rng)
    assert xm is x and lam == 1.0 and (ya == yb).all()


def test_mixup_cutmix_targets_match_permutation():
    rng = np.random.default_rng(5)
    x = np.arange(4, dtype=float)[:, None, None, None] * np.ones((4, 1, 4, 4))
    y = np.arange(4)
    xm, ya, yb, lam = mixup_cutmix(x, y, TrainConfig(mixup_alpha=0.8, cutmix_alpha=0), rng)
    np.testing.assert_allclose(xm[:, 0, 0, 0], lam * ya + (1 - lam) * yb)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_mixup_stays_within_source_range(seed, lam):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 2, 4, 4))
    perm = rng.permutation(5)
    out = mixup(x, perm, lam)
    lo, hi = np.minimum(x, x[perm]), np.maximum(x, x[perm])
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_erasing_prob_zero_is_identity(rng):
    x = rng.normal(size=(6, 3, 16, 16))
    np.testing.assert_array_equal(random_erasing(x, 0.0, rng), x)


def test_erasing_prob_one_touches_exactly_one_rectangle(rng):
    x = rng.normal(size=(20, 3, 16, 16)) + 5.0  # noise lies in [0, 1)
    out, boxes = random_erasing(x, 1.0, rng, return_boxes=True)
    for i, box in enumerate(boxes):
        assert box is not None
        y0, y1, x0, x1 = box
        mask = np.zeros((16, 16), bool)
        mask[y0:y1, x0:x1] = True
        np.testing.assert_array_equal(out[i][:, ~mask], x[i][:, ~mask])
        assert np.all(out[i][:, mask] != x[i][:, mask])


def test_erasing_rate():
    rng = np.random.default_rng(0)
    x = np.zeros((10_000, 1, 8, 8))
    _, boxes = random_erasing(x, 0.25, rng, return_boxes=True)
    rate = sum(b is not None for b in boxes) / len(boxes)
    assert abs(rate - 0.25) <= 0.02

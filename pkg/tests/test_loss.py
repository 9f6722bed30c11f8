import numpy as np
import pytest

from kitsseg.loss import (
    LEVEL_WEIGHTS,
    deep_supervision_loss,
    deep_supervision_terms,
    downsample_nn,
    level_shape,
    soft_dice_grad,
    soft_dice_loss,
)
from oracles import central_difference_grad


def test_perfect_prediction():
    t = np.zeros((3, 8, 8, 8))
    t[:, 1:7, 1:7, 1:5] = 1  # 144 voxels per channel
    assert soft_dice_loss(t, t) < 1e-4


def test_empty_prediction():
    t = np.zeros((1, 10, 1, 1))
    t[0, :10] = 1
    expected = 1 - (0 + 1e-5) / (10 + 1e-5)
    assert soft_dice_loss(np.zeros_like(t), t, 1e-5) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.999999, abs=1e-6)


def test_two_voxel_hand_value():
    p = np.array([[0.5, 0.5]])
    t = np.array([[1.0, 0.0]])
    assert soft_dice_loss(p, t, 0.0) == pytest.approx(0.5)


def test_two_voxel_gradient():
    p = np.array([[0.5, 0.5]])
    t = np.array([[1.0, 0.0]])
    g = soft_dice_grad(p, t, 0.0)
    fd = central_difference_grad(lambda x: soft_dice_loss(x, t, 0.0), p)
    # L(p1) = 1 - 2 p1 / (p1 + 1.5)  ->  dL/dp1 = -3 / (p1 + 1.5)^2 = -0.75 at p1 = 0.5
    assert g[0, 0] == pytest.approx(-0.75)
    assert g == pytest.approx(fd, rel=1e-6)


def test_gradient_random_instances():
    r = np.random.default_rng(7)
    for _ in range(20):
        p = r.random((3, 4, 4, 4))
        t = (r.random((3, 4, 4, 4)) < 0.4).astype(float)
        g = soft_dice_grad(p, t)
        fd = central_difference_grad(lambda x: soft_dice_loss(x, t), p, 1e-4)
        rel = np.abs(g - fd).max() / np.abs(fd).max()
        assert rel < 1e-4


def test_gradient_near_zero_at_optimum():
    t = np.zeros((1, 20, 20, 20))
    t[0, 2:18, 2:18, 2:18] = 1
    g = soft_dice_grad(t, t, 0.0)
    n = t.sum()
    # at p = t the fg derivative is -(4N - 2N) / (2N)^2 = -1 / (2N)
    assert g[t == 1] == pytest.approx(-1 / (2 * n))
    assert np.abs(g[t == 1]).max() < 1e-3


def test_loss_range():
    r = np.random.default_rng(3)
    for _ in range(50):
        p = r.random((2, 3, 3, 3))
        t = (r.random((2, 3, 3, 3)) < 0.5).astype(float)
        t[:, 0, 0, 0] = 1
        assert 0.0 <= soft_dice_loss(p, t, 0.0) <= 1.0


def test_loss_decreases_with_overlap_at_fixed_sums():
    # same sum(p) and sum(t); moving prediction mass onto the target raises sum(p*t)
    t = np.array([[1.0, 1.0, 0.0, 0.0]])
    losses = [soft_dice_loss(np.array([[a, a, 1 - a, 1 - a]]), t, 0.0) for a in (0.0, 0.3, 0.6, 1.0)]
    assert all(x > y for x, y in zip(losses, losses[1:]))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        soft_dice_loss(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3)))


def test_downsample():
    t = np.array([1.0, 0.0, 1.0, 0.0]).reshape(1, 4, 1, 1)
    assert downsample_nn(t, 1).ravel().tolist() == [1.0, 1.0]
    assert downsample_nn(t, 0) is not None and np.array_equal(downsample_nn(t, 0), t)
    c = np.ones((2, 9, 7, 5))
    for lvl in range(5):
        d = downsample_nn(c, lvl)
        assert d.shape[1:] == level_shape((9, 7, 5), lvl)
        assert (d == 1).all()
    assert level_shape((9, 7, 5), 4) == (1, 1, 1)


def _stack_for(t):
    return [downsample_nn(t, i).copy() for i in range(5)]


def _target():
    t = np.zeros((3, 32, 32, 32))
    t[:, 0:32:2, :, :] = 1  # every level's nearest sample is foreground
    t[1, :, 16:, :] = 0
    t[2, :, :, 16:] = 0
    return t


def test_weights_exact():
    assert LEVEL_WEIGHTS == (1.0, 0.5, 0.25, 0.125, 0.0625)


def test_perfect_stack():
    t = _target()
    assert deep_supervision_loss(_stack_for(t), t) < 1e-4


def test_uniform_unit_losses():
    t = _target()
    stack = [1.0 - s for s in _stack_for(t)]  # disjoint from every target: loss ~1
    terms = deep_supervision_terms(stack, t, epsilon=0.0)
    assert terms == pytest.approx([1.0] * 5, abs=0)
    assert deep_supervision_loss(stack, t, epsilon=0.0) == pytest.approx(1.9375, abs=1e-9)


def test_only_level0_wrong():
    t = _target()
    stack = _stack_for(t)
    stack[0] = 1.0 - stack[0]
    assert deep_supervision_loss(stack, t) == pytest.approx(1.0, abs=1e-4)


def test_malformed_stack():
    t = _target()
    with pytest.raises(ValueError):
        deep_supervision_loss(_stack_for(t)[:4], t)
    bad = _stack_for(t)
    bad[2] = bad[1]
    with pytest.raises(ValueError):
        deep_supervision_loss(bad, t)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbnet.errors import ShapeError
from cbnet.losses import (
    cross_entropy_batch,
    cross_entropy_grad_logits,
    cross_entropy_loss,
    l1_activity_penalty,
    mse_loss,
)
from cbnet.optim import SGD, Adam, adam_step, sgd_step


class TestCrossEntropy:
    def test_one_hot_correct_label_is_zero(self):
        probs = np.zeros(10)
        probs[3] = 1.0
        assert cross_entropy_loss(probs, 3).total == 0.0

    def test_uniform_is_ln10(self):
        loss = cross_entropy_loss(np.full(10, 0.1), 0)
        assert loss.total == pytest.approx(np.log(10.0), abs=1e-9)
        assert loss.total == pytest.approx(2.302585, abs=1e-6)

    def test_point_nine_point_one(self):
        loss = cross_entropy_loss(np.array([0.9, 0.1]), 1)
        assert loss.total == pytest.approx(-np.log(0.1), rel=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy_loss(np.full(10, 0.1), 10)

    def test_fused_gradient_is_probs_minus_onehot(self):
        probs = np.array([[0.2, 0.5, 0.3]])
        g = cross_entropy_grad_logits(probs, np.array([1]))
        np.testing.assert_allclose(g, [[0.2, -0.5, 0.3]])

    def test_nonnegative_and_zero_iff_onehot(self, rng):
        for _ in range(20):
            raw = rng.random(10) + 1e-3
            probs = raw / raw.sum()
            label = int(rng.integers(0, 10))
            loss = cross_entropy_loss(probs, label)
            assert loss.total > 0.0  # never exactly one-hot for random draws
        one_hot = np.eye(10)[4]
        assert cross_entropy_loss(one_hot, 4).total == 0.0


class TestMse:
    def test_identical_is_zero(self, rng):
        x = rng.standard_normal(12)
        loss, grad = mse_loss(x, x)
        assert loss.total == 0.0 and not grad.any()

    def test_unit_example(self):
        loss, _ = mse_loss(np.zeros(2), np.ones(2))
        assert loss.total == 1.0

    def test_arithmetic_example(self):
        loss, grad = mse_loss(np.array([0.2, 0.8]), np.array([0.0, 1.0]))
        assert loss.total == pytest.approx(0.04, rel=1e-6)
        np.testing.assert_allclose(grad, [0.2, -0.2])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros(2), np.zeros(3))

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8),
           st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, a, b):
        n = min(len(a), len(b))
        loss, _ = mse_loss(np.array(a[:n]), np.array(b[:n]))
        assert loss.total >= 0.0


class TestL1Activity:
    def test_example(self):
        loss, grad = l1_activity_penalty(np.array([1.0, -2.0, 3.0]), 1e-8)
        assert loss.total == pytest.approx(6e-8, rel=1e-9)
        np.testing.assert_array_equal(grad, [1e-8, -1e-8, 1e-8])

    def test_zero_coefficient(self, rng):
        loss, grad = l1_activity_penalty(rng.standard_normal(30), 0.0)
        assert loss.total == 0.0 and not grad.any()

    def test_784_halves(self):
        loss, _ = l1_activity_penalty(np.full(784, 0.5), 1e-8)
        assert loss.total == pytest.approx(3.92e-6, rel=1e-9)

    def test_subgradient_zero_at_zero(self):
        _, grad = l1_activity_penalty(np.zeros(4), 1e-2)
        assert not grad.any()

    def test_decomposition(self):
        loss, _ = l1_activity_penalty(np.ones(3), 0.5)
        assert loss.total == loss.data_term + loss.reg_term
        assert loss.data_term == 0.0


class TestSgd:
    def test_zero_lr_is_identity(self, rng):
        p = rng.standard_normal(5)
        before = p.copy()
        sgd_step(p, rng.standard_normal(5), 0.0)
        np.testing.assert_array_equal(p, before)

    def test_scalar_rule(self):
        p = np.array([1.0])
        sgd_step(p, np.array([2.0]), 0.1)
        assert p[0] == pytest.approx(0.8)

    def test_applies_elementwise_across_tensors(self, rng):
        params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}
        grads = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        expected = {k: params[k] - 0.05 * grads[k] for k in params}
        SGD(lr=0.05).step(params, grads)
        for k in params:
            np.testing.assert_allclose(params[k], expected[k])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step(np.zeros(3), np.zeros(4), 0.1)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = np.array([1.5, -2.0])
        opt = Adam(lr=1e-3)
        for _ in range(3):
            opt.step({"p": p}, {"p": np.zeros(2)})
        np.testing.assert_array_equal(p, [1.5, -2.0])

    def test_first_step_hand_derived(self):
        # t=1: mhat = g, vhat = g^2, update = lr * g / (|g| + eps)
        p = np.zeros(1)
        opt = Adam(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
        opt.step({"p": p}, {"p": np.array([0.5])})
        assert p[0] == pytest.approx(-9.9999998e-4, rel=1e-7)

    def test_constant_gradient_moves_monotonically(self):
        p = np.zeros(1)
        opt = Adam(lr=1e-3)
        prev = 0.0
        for _ in range(5):
            opt.step({"p": p}, {"p": np.array([0.5])})
            assert p[0] < prev
            prev = p[0]

    def test_step_counter_increments(self):
        opt = Adam()
        p = np.zeros(2)
        for t in range(1, 5):
            opt.step({"p": p}, {"p": np.ones(2)})
            assert opt.t == t

    def test_moment_shapes_track_params(self, rng):
        opt = Adam()
        params = {"w": rng.standard_normal((3, 2))}
        opt.step(params, {"w": rng.standard_normal((3, 2))})
        assert opt.m["w"].shape == (3, 2)
        assert opt.v["w"].shape == (3, 2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1)


def test_batch_cross_entropy_matches_mean_of_singles(rng):
    probs = rng.random((6, 10)) + 1e-3
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, 10, size=6)
    singles = [cross_entropy_loss(probs[i], labels[i]).total for i in range(6)]
    assert cross_entropy_batch(probs, labels).total == pytest.approx(np.mean(singles))

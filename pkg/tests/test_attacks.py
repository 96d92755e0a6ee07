import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segrobust.attacks import AttackSpec, Method, fgsm, ifgsm, input_gradient, run_attack, target_labels, tifgsm
from segrobust.autodiff import Tensor, softmax_temperature
from segrobust.data import one_hot
from segrobust.errors import ConfigError, ShapeError
from segrobust.unet import UNetConfig, build


def linear_model(weights):
    """Per-voxel softmax of a fixed linear map over channels: a smooth toy segmenter."""
    def model(x):
        c = x.shape[0]
        flat = x.reshape(c, -1)
        z = Tensor(weights) * 1.0
        # logits[n, v] = sum_c W[n, c] x[c, v]
        logits = (z.reshape(*weights.shape, 1) * flat.reshape(1, c, -1)).sum(axis=1)
        return softmax_temperature(logits.reshape(weights.shape[0], *x.shape[1:]), 1.0)
    return model


def quadratic_loss(center):
    """loss(pred, target) ignores the model output path and is (x - c)^2 through an identity model."""
    def loss(pred, target):
        d = pred - Tensor(center)
        return (d * d).sum()
    return loss


def identity(x):
    return x


W = np.random.default_rng(0).normal(size=(4, 4))


def sample(seed, ext=3):
    r = np.random.default_rng(seed)
    return r.normal(size=(4, ext, ext, ext)), r.choice([0, 1, 2, 4], size=(ext,) * 3).astype(np.uint8)


class TestBudget:
    def test_hundred_random_runs(self):
        r = np.random.default_rng(1)
        model = linear_model(W)
        for run in range(100):
            x, y = sample(run)
            method = [Method.FGSM, Method.IFGSM, Method.TIFGSM][run % 3]
            steps = 1 if method is Method.FGSM else int(r.integers(1, 6))
            eps = float(r.uniform(0.001, 0.1))
            spec = AttackSpec(method, eps, steps)
            res = run_attack(model, x, y, spec)
            step = spec.scaled(x)
            assert np.abs(res.adversarial - x).max() <= step * steps + 1e-12
            if method is Method.FGSM:
                _, g = input_gradient(model, x, one_hot(y))
                if np.all(g != 0):
                    assert np.abs(res.adversarial - x).max() == pytest.approx(step, abs=1e-12)
                    np.testing.assert_allclose(np.abs(res.adversarial - x), step, atol=1e-12)

    def test_zero_epsilon_is_identity(self):
        x, y = sample(0)
        res = run_attack(linear_model(W), x, y, AttackSpec(Method.IFGSM, 0.0, 4))
        np.testing.assert_array_equal(res.adversarial, x)

    def test_clip_to_input_range(self):
        x, y = sample(3)
        res = run_attack(linear_model(W), x, y, AttackSpec(Method.IFGSM, 0.2, 5, clip_to_input_range=True))
        assert res.adversarial.min() >= x.min() and res.adversarial.max() <= x.max()


class TestSignSteps:
    def test_fgsm_is_sign_of_analytic_gradient(self):
        # identity model, loss (x - c)^2: gradient 2(x - c)
        x = np.array([[[[0.3, -1.0, 2.0]]]])
        c = np.array([[[[1.0, 0.0, 2.5]]]])
        res = fgsm(identity, x, np.zeros_like(x), 0.1, loss_fn=quadratic_loss(c))
        np.testing.assert_allclose(res.adversarial, x + 0.1 * np.sign(x - c))

    def test_ifgsm_recurrence_on_toy(self):
        x = np.array([[[[0.0, 0.05, -0.3]]]])
        c = np.full_like(x, 0.12)
        res = ifgsm(identity, x, np.zeros_like(x), 0.05, 4, loss_fn=quadratic_loss(c))
        expected = x.copy()
        for _ in range(4):
            expected = expected + 0.05 * np.sign(expected - c)
        np.testing.assert_allclose(res.adversarial, expected, atol=1e-15)
        # loss is tracked per step and rises when moving away from c
        assert np.all(np.diff(res.per_step_loss) > 0)

    def test_tifgsm_descends_toward_target_by_default(self):
        x = np.array([[[[0.0, 0.5, -0.3]]]])
        c = np.full_like(x, 0.2)
        res = tifgsm(identity, x, np.zeros_like(x), 0.05, 3, loss_fn=quadratic_loss(c))
        assert np.abs(res.adversarial - c).sum() < np.abs(x - c).sum()
        printed = tifgsm(identity, x, np.zeros_like(x), 0.05, 3, loss_fn=quadratic_loss(c), printed_sign=True)
        assert np.abs(printed.adversarial - c).sum() > np.abs(x - c).sum()

    def test_on_step_sees_every_prefix(self):
        model = linear_model(W)
        x, y = sample(5)
        seen = {}
        full = ifgsm(model, x, one_hot(y), 0.01, 5, on_step=lambda k, xk: seen.__setitem__(k, xk.copy()))
        assert sorted(seen) == [1, 2, 3, 4, 5]
        np.testing.assert_array_equal(seen[5], full.adversarial)
        np.testing.assert_array_equal(seen[2], ifgsm(model, x, one_hot(y), 0.01, 2).adversarial)
        np.testing.assert_array_equal(seen[1], fgsm(model, x, one_hot(y), 0.01).adversarial)


class TestSpec:
    def test_defaults(self):
        assert AttackSpec().epsilon == 0.05 and AttackSpec().method is Method.FGSM
        ti = AttackSpec(Method.TIFGSM, 0.005, 10)
        assert ti.target_code == 1 and ti.budget == pytest.approx(0.05)

    def test_target_is_all_label_one(self):
        t = target_labels((2, 2, 2))
        np.testing.assert_array_equal(t[1], 1.0)
        assert t.sum() == 8

    def test_scaled_by_max_magnitude(self):
        assert AttackSpec(epsilon=0.05).scaled(np.array([-4.0, 2.0])) == pytest.approx(0.2)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            AttackSpec(epsilon=-0.1)
        with pytest.raises(ConfigError):
            AttackSpec(Method.FGSM, 0.1, 3)
        with pytest.raises(ConfigError):
            AttackSpec(Method.IFGSM, 0.1, 0)
        with pytest.raises(ShapeError):
            fgsm(identity, np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3)), 0.1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.001, 0.05))
def test_fgsm_does_not_decrease_loss_of_small_net_much(seed, eps):
    # First-order ascent: for a small step the Dice loss should not drop by more
    # than second-order terms.
    model = build(UNetConfig(depth=1, base_width=2), seed % 5)
    x, y = sample(seed, ext=4)
    target = one_hot(y)
    before, _ = input_gradient(model, x, target)
    after, _ = input_gradient(model, fgsm(model, x, target, eps * 0.01).adversarial, target)
    assert after >= before - 1e-6

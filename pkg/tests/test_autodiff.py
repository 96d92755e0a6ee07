import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segrobust.autodiff import (
    Adam, Tensor, adam_step, AdamState, concat, conv3d, dropout3d, instance_norm, leaky_relu, no_grad,
    resolve_padding, softmax_temperature, upsample_nearest,
)
from segrobust.errors import ConfigError, ShapeError

from oracles import conv3d_loops, numerical_gradient, relative_error

TOL = 1e-4


def check_grad(build, *arrays, seed=0):
    """``build(*tensors) -> Tensor``; compares d(sum(out * probe))/d(input) for every input."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    probe = rng.normal(size=out.shape)
    (out * probe).sum().backward()
    for t, a in zip(tensors, arrays):
        num = numerical_gradient(lambda: float((build(*[Tensor(b) for b in arrays]).data * probe).sum()), a)
        assert relative_error(t.grad, num) < TOL


rng = np.random.default_rng(42)


def away_from_zero(shape, seed):
    r = np.random.default_rng(seed)
    return r.uniform(0.2, 1.5, size=shape) * r.choice([-1.0, 1.0], size=shape)


class TestElementwise:
    def test_arithmetic_with_broadcast(self):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        check_grad(lambda x, y: x * y + x / (y * y + 2.0) - y, a, b)

    def test_pow_exp_log(self):
        a = rng.uniform(0.5, 2.0, size=(5,))
        check_grad(lambda x: (x**3).exp().log() + x**0.5, a)

    def test_reductions_and_indexing(self):
        a = rng.normal(size=(3, 4, 2))
        check_grad(lambda x: x.sum(axis=(1, 2)) * x.mean(axis=1)[:, 0] + x[np.array([0, 2])].sum(), a)

    def test_reshape(self):
        a = rng.normal(size=(2, 6))
        check_grad(lambda x: x.reshape(3, 4) * 2.0, a)

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        (x * x * x).sum().backward()
        assert x.grad[0] == pytest.approx(12.0)

    def test_nonscalar_backward_needs_seed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf


class TestNetworkPrimitives:
    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2)])
    def test_conv3d_gradient(self, k, stride):
        x = rng.normal(size=(2, 4, 4, 4))
        w = rng.normal(size=(3, 2, k, k, k))
        check_grad(lambda a, b: conv3d(a, b, stride=stride), x, w)

    def test_instance_norm_gradient(self):
        check_grad(instance_norm, rng.normal(size=(2, 3, 3, 3)))

    def test_leaky_relu_gradient(self):
        check_grad(lambda x: leaky_relu(x, 0.01), away_from_zero((2, 3, 3, 3), 1))

    def test_leaky_relu_subgradient_at_zero_is_slope(self):
        x = Tensor(np.zeros(4), requires_grad=True)
        leaky_relu(x, 0.01).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full(4, 0.01))

    @pytest.mark.parametrize("temperature", [1.0, 3.0, 20.0])
    def test_softmax_gradient(self, temperature):
        check_grad(lambda x: softmax_temperature(x, temperature), rng.normal(size=(4, 2, 2, 2)) * 3)

    def test_upsample_gradient(self):
        check_grad(upsample_nearest, rng.normal(size=(2, 2, 3, 2)))

    def test_concat_gradient(self):
        check_grad(lambda a, b: concat([a, b]) * 1.5, rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(3, 2, 2, 2)))

    def test_dropout_gradient_uses_same_mask(self):
        check_grad(lambda x: dropout3d(x, 0.5, rng=7), rng.normal(size=(6, 2, 2, 2)))


class TestConvolution:
    def test_matches_loop_reference(self):
        r = np.random.default_rng(0)
        for case in range(50):
            k = int(r.choice([1, 3]))
            stride = int(r.choice([1, 2]))
            pads = resolve_padding("same", k, stride)
            shape = tuple(int(v) for v in r.integers(2, 7, size=3))
            x = r.normal(size=(int(r.integers(1, 4)),) + shape)
            w = r.normal(size=(int(r.integers(1, 4)), x.shape[0], k, k, k))
            got = conv3d(Tensor(x), Tensor(w), stride=stride).data
            assert np.abs(got - conv3d_loops(x, w, stride, pads)).max() < 1e-12, case

    def test_same_padding_keeps_extent_and_stride_two_halves(self):
        x = Tensor(np.zeros((1, 8, 6, 4)))
        assert conv3d(x, Tensor(np.zeros((2, 1, 3, 3, 3)))).shape == (2, 8, 6, 4)
        assert conv3d(x, Tensor(np.zeros((2, 1, 3, 3, 3))), stride=2).shape == (2, 4, 3, 2)

    def test_literal_downsample_padding_adds_one(self):
        x = Tensor(np.zeros((1, 8, 8, 8)))
        assert conv3d(x, Tensor(np.zeros((1, 1, 3, 3, 3))), stride=2, padding="asymmetric").shape == (1, 5, 5, 5)

    def test_rejects_bad_arguments(self):
        x = Tensor(np.zeros((2, 4, 4, 4)))
        with pytest.raises(ShapeError):
            conv3d(x, Tensor(np.zeros((1, 3, 3, 3, 3))))
        with pytest.raises((ShapeError, ConfigError)):
            conv3d(x, Tensor(np.zeros((1, 2, 5, 5, 5))))
        with pytest.raises((ShapeError, ConfigError)):
            conv3d(x, Tensor(np.zeros((1, 2, 3, 3, 3))), stride=3)


class TestSoftmax:
    def test_known_values(self):
        p = softmax_temperature(Tensor(np.array([1.0, 0.0])), 1.0).data
        np.testing.assert_allclose(p, [0.7310585786, 0.2689414214], atol=1e-9)
        p = softmax_temperature(Tensor(np.array([1.0, 0.0])), 100.0).data
        np.testing.assert_allclose(p, [0.5024999792, 0.4975000208], atol=1e-9)

    @pytest.mark.parametrize("temperature", [1, 20, 100, 500, 5000])
    def test_rows_sum_to_one(self, temperature):
        z = np.random.default_rng(temperature).normal(scale=50, size=(4, 3, 3, 3))
        p = softmax_temperature(Tensor(z), temperature).data
        assert np.abs(p.sum(axis=0) - 1).max() <= 1e-12

    def test_large_logits_do_not_overflow(self):
        p = softmax_temperature(Tensor(np.array([1e4, 0.0, -1e4])), 1.0).data
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 1e4))
    def test_argmax_invariant_to_temperature(self, seed, temperature):
        z = np.random.default_rng(seed).normal(size=(4, 2, 2, 2))
        np.testing.assert_array_equal(
            softmax_temperature(Tensor(z), temperature).data.argmax(0), softmax_temperature(Tensor(z), 1.0).data.argmax(0)
        )

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ConfigError):
            softmax_temperature(Tensor(np.zeros((2, 1))), 0.0)


class TestDropout:
    def test_drop_fraction_near_rate(self):
        x = Tensor(np.ones((2000, 1, 1, 1)))
        y = dropout3d(x, 0.5, rng=3)
        frac = float((y.data == 0).mean())
        assert 0.45 <= frac <= 0.55
        np.testing.assert_array_equal(np.unique(y.data), [0.0, 2.0])

    def test_identity_in_eval_mode(self):
        x = Tensor(np.ones((4, 2, 2, 2)))
        assert dropout3d(x, 0.3, rng=0, training=False) is x


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        p = {"w": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
        p["w"].grad = np.array([0.5, -4.0, 1e-3])
        state = AdamState()
        adam_step(p, {"w": p["w"].grad}, state, lr=0.1)
        # bias-corrected m/sqrt(v) is sign(g) on step 1 (up to eps)
        np.testing.assert_allclose(p["w"].data, [0.9, -1.9, 2.9], atol=1e-6)

    def test_second_step_matches_hand_computation(self):
        w = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam({"w": w}, lr=0.01)
        for g in (1.0, 3.0):
            w.grad = np.array([g])
            opt.step()
        m = (0.1 * 0.9 + 0.1 * 3.0) / (1 - 0.9**2)
        v = (0.001 * 0.999 * 1.0 + 0.001 * 9.0) / (1 - 0.999**2)
        expected = -0.01 - 0.01 * m / (np.sqrt(v) + 1e-8)
        assert w.data[0] == pytest.approx(expected, rel=1e-6)

    def test_minimizes_quadratic(self):
        w = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = Adam({"w": w}, lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            ((w - 1.0) * (w - 1.0)).sum().backward()
            opt.step()
        np.testing.assert_allclose(w.data, [1.0, 1.0], atol=1e-2)


class TestWorkedExamples:
    def test_delta_kernel_scales(self):
        k = np.zeros((1, 1, 3, 3, 3))
        k[0, 0, 1, 1, 1] = 3.0
        assert conv3d(Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(k)).data.item() == 6.0

    def test_all_ones_interior_and_corner(self):
        out = conv3d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 1, 3, 3, 3)))).data
        assert out[0, 1, 1, 1] == 27.0 and out[0, 0, 0, 0] == 8.0

    def test_zero_input_gives_zero_output(self):
        out = conv3d(Tensor(np.zeros((2, 4, 4, 4))), Tensor(rng.normal(size=(3, 2, 3, 3, 3))), stride=2)
        assert not out.data.any()

    def test_instance_norm_examples(self):
        np.testing.assert_array_equal(instance_norm(Tensor(np.full((1, 2, 2, 2), 7.0))).data, 0.0)
        y = instance_norm(Tensor(np.arange(1.0, 9.0).reshape(1, 2, 2, 2))).data
        assert abs(y.mean()) < 1e-15 and y.var() == pytest.approx(1.0, abs=1e-5)
        z = np.random.default_rng(0).normal(size=(1, 4, 4, 4))
        z = (z - z.mean()) / z.std()
        # only the eps term separates output from input: factor 1/sqrt(1 + eps)
        np.testing.assert_allclose(instance_norm(Tensor(z)).data, z / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_leaky_relu_examples(self):
        np.testing.assert_allclose(leaky_relu(Tensor(np.array([3.0, -2.0])), 0.01).data, [3.0, -0.02])
        x = Tensor(np.array([-1.0]), requires_grad=True)
        leaky_relu(x, 0.01).sum().backward()
        assert x.grad[0] == pytest.approx(0.01)

    def test_softmax_symmetric_logits(self):
        for t in (0.1, 1.0, 77.0):
            np.testing.assert_array_equal(softmax_temperature(Tensor(np.zeros(2)), t).data, [0.5, 0.5])

    def test_upsample_examples(self):
        x = Tensor(np.full((1, 1, 1, 1), 5.0), requires_grad=True)
        y = upsample_nearest(x)
        np.testing.assert_array_equal(y.data, np.full((1, 2, 2, 2), 5.0))
        y.sum().backward()
        assert x.grad.item() == 8.0
        down = conv3d(Tensor(np.zeros((1, 6, 4, 8))), Tensor(np.zeros((1, 1, 3, 3, 3))), stride=2)
        assert upsample_nearest(down).shape == (1, 6, 4, 8)

    def test_backward_examples(self):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
        a = rng.normal(size=(3,))
        check_grad(lambda t: t * 2.0 + (t * t).exp(), a)

    def test_two_class_toy_dice(self):
        from segrobust.losses import DiceConfig, dice_loss

        t = np.zeros((2, 2, 2, 2))
        t[1, 0] = 1
        t[0, 1] = 1
        z = rng.normal(size=(2, 2, 2, 2))
        cfg = DiceConfig()
        x = Tensor(z, requires_grad=True)
        dice_loss(softmax_temperature(x, 1.0), t, cfg).backward()
        num = numerical_gradient(lambda: float(dice_loss(softmax_temperature(Tensor(z), 1.0), t, cfg).data), z)
        assert relative_error(x.grad, num) < TOL

    def test_adam_zero_gradient_and_monotone_movement(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam({"w": w}, lr=0.1)
        w.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(w.data, [1.0, 2.0])
        s = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam({"s": s}, lr=0.1)
        trail = []
        for _ in range(5):
            s.grad = np.array([1.0])
            opt.step()
            trail.append(s.data[0])
        assert trail[0] == pytest.approx(-0.1, rel=1e-6)
        assert np.all(np.diff(trail) < 0)

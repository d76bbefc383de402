import math

import numpy as np
import pytest

from conftest import assert_gradients
from div2x import nn


def _naive_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    k = kernel.shape[0]
    pad = k // 2
    h, w, _ = x.shape
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    out_h, out_w = -(-h // stride), -(-w // stride)
    out = np.zeros((out_h, out_w, kernel.shape[3]))
    for r in range(out_h):
        for c in range(out_w):
            window = padded[r * stride:r * stride + k, c * stride:c * stride + k]
            out[r, c] = np.einsum("ijc,ijco->o", window, kernel) + bias
    return out


def _param(rng, *shape, name=""):
    return nn.Parameter(rng.normal(size=shape), name=name)


class TestConv2d:

    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (5, 1), (5, 2)])
    def test_matches_naive_loop(self, f64, k, stride):
        rng = np.random.default_rng(k * 10 + stride)
        x = rng.normal(size=(7, 6, 3))
        kernel = rng.normal(size=(k, k, 3, 4))
        bias = rng.normal(size=4)
        out = nn.conv2d(nn.Tensor(x), nn.Tensor(kernel), nn.Tensor(bias), stride=stride)
        np.testing.assert_allclose(out.data, _naive_conv(x, kernel, bias, stride), atol=1e-10)

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            nn.conv2d(nn.Tensor(np.zeros((4, 4, 1))), nn.Tensor(np.zeros((2, 2, 1, 1))))

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ValueError):
            nn.conv2d(nn.Tensor(np.zeros((4, 4, 2))), nn.Tensor(np.zeros((3, 3, 1, 1))))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, f64, stride):
        rng = np.random.default_rng(stride)
        x = _param(rng, 5, 6, 2, name="x")
        kernel = _param(rng, 3, 3, 2, 3, name="kernel")
        bias = _param(rng, 3, name="bias")
        weights = rng.normal(size=(-(-5 // stride), -(-6 // stride), 3))

        def loss():
            return nn.sum_all(nn.mul(nn.conv2d(x, kernel, bias, stride), nn.Tensor(weights)))

        assert_gradients(loss, [x, kernel, bias])

    def test_module_seeded_by_name(self):
        a = nn.Conv2d("enc", 2, 3, 3, seed=5)
        b = nn.Conv2d("enc", 2, 3, 3, seed=5)
        c = nn.Conv2d("other", 2, 3, 3, seed=5)
        np.testing.assert_array_equal(a.weight.data, b.weight.data)
        assert not np.array_equal(a.weight.data, c.weight.data)

    def test_zero_init_and_bias_init(self):
        conv = nn.Conv2d("head", 4, 1, 1, zero_init=True, bias_init=-2.0)
        assert not conv.weight.data.any()
        np.testing.assert_allclose(conv.bias.data, [-2.0])


class TestElementwise:

    def test_softmax_rows_sum_to_one(self, f64):
        x = nn.Tensor(np.random.default_rng(0).normal(scale=50, size=(4, 5, 3)))
        y = nn.softmax_axis(x, -1).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(y >= 0)

    def test_sigmoid_saturates_without_overflow(self, f64):
        s = nn.sigmoid(nn.Tensor([-800.0, 0.0, 800.0])).data
        np.testing.assert_allclose(s, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(nn.log_sigmoid(nn.Tensor([-800.0, 800.0])).data))

    def test_pow_scalar_rejects_negative_base(self):
        with pytest.raises(ValueError):
            nn.pow_scalar(nn.Tensor([-1.0]), 2.0)

    def test_max_over_axes_routes_gradient_to_first_max(self, f64):
        x = nn.Parameter(np.array([[[1.0, 3.0], [3.0, 0.0]]]))
        nn.sum_all(nn.max_over_axes(x, (1, 2))).backward()
        np.testing.assert_array_equal(x.grad, [[[0.0, 1.0], [0.0, 0.0]]])

    @pytest.mark.parametrize("op", ["sigmoid", "log_sigmoid", "softmax", "relu", "pow", "max", "stack", "concat"])
    def test_gradients(self, f64, op):
        rng = np.random.default_rng(1)
        a = _param(rng, 3, 4, 2, name="a")
        b = _param(rng, 3, 4, 2, name="b")
        weights = nn.Tensor(rng.normal(size=(3, 4, 2)))

        def loss():
            if op == "sigmoid":
                out = nn.sigmoid(a)
            elif op == "log_sigmoid":
                out = nn.log_sigmoid(a)
            elif op == "softmax":
                out = nn.softmax_axis(a, -1)
            elif op == "relu":
                out = nn.relu(a)
            elif op == "pow":
                out = nn.pow_scalar(nn.sigmoid(a), 2.0)
            elif op == "max":
                return nn.sum_all(nn.mul(nn.max_over_axes(a, (2,)), nn.Tensor(weights.data[..., 0])))
            elif op == "stack":
                return nn.sum_all(nn.mul(nn.stack([a, b], axis=-1), nn.Tensor(np.stack([weights.data] * 2, -1))))
            else:
                return nn.sum_all(nn.mul(nn.concat_axis([a, b], 2),
                                         nn.Tensor(np.concatenate([weights.data] * 2, axis=2))))
            return nn.sum_all(nn.mul(out, weights))

        assert_gradients(loss, [a, b] if op in ("stack", "concat") else [a])

    def test_gradients_accumulate_over_shared_use(self, f64):
        a = nn.Parameter(np.array([2.0, -1.0]))
        nn.sum_all(nn.mul(a, a) + a).backward()
        np.testing.assert_allclose(a.grad, [5.0, -1.0])

    def test_detach_blocks_gradient(self, f64):
        a = nn.Parameter(np.array([1.0, 2.0]))
        b = nn.Parameter(np.array([3.0, 4.0]))
        nn.sum_all(nn.mul(a.detach(), b)).backward()
        assert a.grad is None
        np.testing.assert_allclose(b.grad, [1.0, 2.0])


class TestBilinearSample:

    def test_zero_offsets_is_identity(self, f64):
        feature = np.random.default_rng(2).normal(size=(5, 4, 3))
        out = nn.bilinear_sample(nn.Tensor(feature), nn.Tensor(np.zeros((5, 4, 2))))
        np.testing.assert_allclose(out.data, feature, atol=1e-12)

    def test_integer_shift(self, f64):
        feature = np.random.default_rng(3).normal(size=(5, 4, 3))
        offsets = np.zeros((5, 4, 2))
        offsets[..., 0] = 1.0
        out = nn.bilinear_sample(nn.Tensor(feature), nn.Tensor(offsets)).data
        np.testing.assert_allclose(out[:-1], feature[1:], atol=1e-12)
        np.testing.assert_allclose(out[-1], feature[-1], atol=1e-12)

    def test_half_cell_is_average(self, f64):
        feature = np.arange(12.0).reshape(4, 3, 1)
        offsets = np.zeros((4, 3, 2))
        offsets[..., 1] = 0.5
        out = nn.bilinear_sample(nn.Tensor(feature), nn.Tensor(offsets)).data
        np.testing.assert_allclose(out[0, 0, 0], 0.5)

    def test_gradients(self, f64):
        rng = np.random.default_rng(4)
        feature = _param(rng, 5, 6, 2, name="feature")
        offsets = nn.Parameter(rng.uniform(-0.8, 0.8, size=(5, 6, 2)) + 0.13, name="offsets")
        weights = nn.Tensor(rng.normal(size=(5, 6, 2)))

        def loss():
            return nn.sum_all(nn.mul(nn.bilinear_sample(feature, offsets), weights))

        assert_gradients(loss, [feature, offsets], h=1e-6, rtol=1e-3, atol=1e-7)


class TestMaskedL1:

    def test_hand_computed(self, f64):
        a = nn.Tensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
        b = nn.Tensor(np.zeros((2, 2, 1)))
        mask = np.array([[1, 0], [1, 1]])
        assert nn.masked_l1(a, b, mask, normalizer=3.2).item() == pytest.approx(8.0 / 3.2)
        assert nn.masked_l1(a, b, mask).item() == pytest.approx(2.0)

    def test_zero_mask(self, f64):
        a = nn.Parameter(np.ones((2, 2, 3)))
        loss = nn.masked_l1(a, nn.Tensor(np.zeros((2, 2, 3))), np.zeros((2, 2)))
        loss.backward()
        assert loss.item() == 0.0
        assert not a.grad.any()

    def test_rejects_mask_shape(self):
        with pytest.raises(ValueError):
            nn.masked_l1(nn.Tensor(np.zeros((2, 2, 1))), nn.Tensor(np.zeros((2, 2, 1))), np.ones((3, 2)))

    def test_gradients(self, f64):
        rng = np.random.default_rng(5)
        a = _param(rng, 4, 3, 2, name="a")
        b = _param(rng, 4, 3, 2, name="b")
        mask = rng.integers(0, 2, size=(4, 3))
        assert_gradients(lambda: nn.masked_l1(a, b, mask, normalizer=5.0), [a, b])


class TestModule:

    class _Pair(nn.Module):
        def __init__(self):
            self.first = nn.Conv2d("first", 2, 2, 1)
            self.second = nn.Conv2d("second", 2, 1, 3)

    def test_named_parameters_are_nested(self):
        names = [name for name, _ in self._Pair().named_parameters()]
        assert names == ["first.weight", "first.bias", "second.weight", "second.bias"]

    def test_state_dict_round_trip(self):
        source, target = self._Pair(), self._Pair()
        for p in source.parameters():
            p.data = p.data + 1.0
        target.load_state_dict(source.state_dict())
        for (_, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_load_rejects_wrong_shape(self):
        state = self._Pair().state_dict()
        state["second.weight"] = np.zeros((1, 1, 2, 1))
        with pytest.raises(ValueError):
            self._Pair().load_state_dict(state)

    def test_freeze(self):
        model = self._Pair()
        model.freeze()
        assert not any(p.requires_grad for p in model.parameters())


class TestOptimizer:

    def test_plain_sgd_shrinks_quadratic_bowl(self, f64):
        p = nn.Parameter(np.array([1.0, -2.0]))
        opt = nn.SGD([p], lr=0.2, momentum=0.0)
        for _ in range(3):
            opt.zero_grad()
            nn.mul(nn.sum_all(nn.mul(p, p)), 0.5).backward()
            assert opt.step()
        np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * 0.8 ** 3)

    def test_momentum_accumulates(self, f64):
        p = nn.Parameter(np.array([0.0]))
        velocities = {}
        nn.sgd_step([p], [np.array([1.0])], 0.1, 0.9, velocities)
        nn.sgd_step([p], [np.array([1.0])], 0.1, 0.9, velocities)
        np.testing.assert_allclose(p.data, [-0.1 - 0.19])

    def test_non_finite_gradient_rejected(self, f64):
        p = nn.Parameter(np.array([1.0, 2.0]))
        p.grad = np.array([np.nan, 0.0])
        opt = nn.SGD([p], lr=0.1)
        assert not opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        assert opt.rejected_steps == 1

    def test_gradient_clipping(self, f64):
        p = nn.Parameter(np.array([0.0, 0.0]))
        p.grad = np.array([30.0, 40.0])
        nn.SGD([p], lr=1.0, momentum=0.0, grad_clip=5.0).step()
        np.testing.assert_allclose(p.data, [-3.0, -4.0])

    def test_rejects_non_positive_lr(self):
        with pytest.raises(ValueError):
            nn.sgd_step([], [], 0.0, 0.9, {})

    def test_cosine_schedule(self):
        assert nn.cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
        assert nn.cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
        assert nn.cosine_lr(0.1, 100, 100) == pytest.approx(0.0, abs=1e-12)
        assert nn.cosine_lr(0.1, 0, 1) == 0.1
        assert math.isfinite(nn.cosine_lr(0.1, 7, 13))

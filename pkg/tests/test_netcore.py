"""Engine tests: forward oracles, gradient checks, flattening, BN behavior."""

import numpy as np
import pytest

from swaat import netcore
from swaat.netcore import (
    BN_EPS, EVAL, TRAIN, BatchNorm, Conv2d, Dense, Flatten, MaxPool, Network,
    NetworkError, ReLU, grad_check, make_net, net_from_descriptor, softmax,
    softmax_cross_entropy,
)


def _dense_identity(n):
    rng = np.random.default_rng(0)
    layer = Dense(n, n, rng)
    layer.w = np.eye(n)
    layer.b = np.zeros(n)
    return layer


class TestForwardOracles:
    def test_dense_identity(self):
        net = Network([_dense_identity(2)], (2,), "d")
        out, _ = net.forward(np.array([[1.0, 2.0]]))
        assert np.array_equal(out, [[1.0, 2.0]])

    def test_conv_1x1_doubling(self):
        rng = np.random.default_rng(0)
        conv = Conv2d(1, 1, 1, 0, rng)
        conv.w = np.full((1, 1, 1, 1), 2.0)
        conv.b = np.zeros(1)
        x = rng.random((3, 1, 5, 5))
        net = Network([conv], (1, 5, 5), "c")
        out, _ = net.forward(x)
        assert np.allclose(out, 2.0 * x, atol=1e-12)

    def test_two_layer_hand_unrolled(self):
        """Dense -> ReLU -> Dense on a fixed 3x3 input vs straight-line math."""
        rng = np.random.default_rng(5)
        l1 = Dense(9, 4, rng)
        l2 = Dense(4, 2, rng)
        net = Network([Flatten(), l1, ReLU(), l2], (1, 3, 3), "h")
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3) / 10.0

        # independent oracle: explicit loops, no matmul
        v = x.reshape(9)
        h = np.zeros(4)
        for j in range(4):
            acc = l1.b[j]
            for i in range(9):
                acc += v[i] * l1.w[i, j]
            h[j] = acc if acc > 0 else 0.0
        expect = np.zeros(2)
        for j in range(2):
            acc = l2.b[j]
            for i in range(4):
                acc += h[i] * l2.w[i, j]
            expect[j] = acc

        out, _ = net.forward(x)
        assert np.allclose(out[0], expect, atol=1e-12)

    def test_shape_mismatch_raises(self):
        net = make_net("mlp-tiny", (1, 4, 4), 3)
        with pytest.raises(NetworkError):
            net.forward(np.zeros((1, 1, 5, 5)))

    def test_nonfinite_activation_raises(self):
        net = make_net("linear", (1, 2, 2), 2)
        net.layers[1].w[:] = np.inf
        with pytest.raises(NetworkError):
            net.forward(np.ones((1, 1, 2, 2)))


class TestLossProperties:
    def test_uniform_logits_loss_is_log_classes(self):
        logits = np.zeros((5, 7))
        loss, _, per_ex = softmax_cross_entropy(logits, np.zeros(5, dtype=int))
        assert abs(loss - np.log(7)) < 1e-12
        assert np.all(per_ex >= 0)

    def test_loss_nonnegative_random(self, rng):
        logits = rng.standard_normal((40, 5)) * 3
        labels = rng.integers(0, 5, 40)
        loss, _, per_ex = softmax_cross_entropy(logits, labels)
        assert loss >= 0 and np.all(per_ex >= -1e-12)

    def test_saturated_softmax_gradient_vanishes(self):
        labels = np.array([1])
        for margin in (10.0, 30.0, 60.0):
            logits = np.array([[0.0, margin]])
            _, dlogits, _ = softmax_cross_entropy(logits, labels)
            assert np.abs(dlogits).max() < np.exp(-margin) * 2

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(rng.standard_normal((10, 6)) * 50)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


class TestBackwardOracles:
    def test_linear_binary_ce_input_grad_closed_form(self, rng):
        """2-class linear model: grad_x = (sigma(f) - y) * w."""
        d = 6
        w = rng.standard_normal(d)
        net = make_net("linear", (1, 1, d), 2)
        dense = net.layers[1]
        dense.w = np.stack([np.zeros(d), w], axis=1)  # logits [0, w.x]
        dense.b = np.zeros(2)
        x = rng.random((1, 1, 1, d))
        for y in (0, 1):
            dx, _, _ = net.input_grad(x, np.array([y]))
            f = float(w @ x.reshape(d))
            sig = 1.0 / (1.0 + np.exp(-f))
            expect = (sig - y) * w
            assert np.allclose(dx.reshape(d), expect, atol=1e-10)

    @pytest.mark.parametrize("arch", ["linear", "mlp-tiny", "mlp-small", "cnn-small"])
    def test_grad_check_presets(self, arch):
        net = make_net(arch, (1, 8, 8), 3, seed=1)
        rng = np.random.default_rng(2)
        x = rng.random((4, 1, 8, 8))
        y = rng.integers(0, 3, 4)
        report = grad_check(net, x, y)
        assert report["passed"], report

    def test_grad_check_negative_control(self, monkeypatch):
        net = make_net("mlp-tiny", (1, 4, 4), 3, seed=0)
        orig = Dense.backward

        def corrupted(self, dy, cache, mode):
            dx, (dw, db) = orig(self, dy, cache, mode)
            return dx, [dw * 1.5, db]

        monkeypatch.setattr(Dense, "backward", corrupted)
        rng = np.random.default_rng(1)
        report = grad_check(net, rng.random((3, 1, 4, 4)), rng.integers(0, 3, 3))
        assert not report["passed"]


class TestFlattening:
    def test_round_trip(self):
        net = make_net("cnn-small", (1, 8, 8), 4, seed=9)
        v = net.flatten()
        net.unflatten(v)
        assert np.array_equal(net.flatten(), v)

    def test_unflatten_zeros_keeps_bn_state(self):
        net = make_net("mlp-small", (1, 4, 4), 3, seed=0)
        bn = net.layers[2]
        bn.running_mean = np.full(256, 0.7)
        bn.running_var = np.full(256, 2.0)
        net.unflatten(np.zeros(net.num_params()))
        assert np.all(net.flatten() == 0)
        assert np.all(bn.running_mean == 0.7) and np.all(bn.running_var == 2.0)

    def test_same_arch_same_length(self):
        a = make_net("cnn-small", (1, 8, 8), 5, seed=1)
        b = make_net("cnn-small", (1, 8, 8), 5, seed=2)
        assert a.num_params() == b.num_params()
        assert not np.array_equal(a.flatten(), b.flatten())

    def test_length_mismatch_raises(self):
        net = make_net("mlp-tiny", (1, 4, 4), 3)
        with pytest.raises(NetworkError):
            net.unflatten(np.zeros(net.num_params() + 1))


class TestBatchNorm:
    def test_train_mode_moments(self, rng):
        """High-variance inputs: output mean ~ beta, variance ~ gamma^2."""
        bn = BatchNorm(5)
        bn.gamma = rng.random(5) + 0.5
        bn.beta = rng.standard_normal(5)
        x = rng.standard_normal((4000, 5)) * 30.0
        y, _ = bn.forward(x, TRAIN, update_stats=False)
        assert np.allclose(y.mean(axis=0), bn.beta, atol=1e-6)
        assert np.allclose(y.var(axis=0), bn.gamma ** 2, atol=1e-6)

    def test_eval_uses_running_stats(self, rng):
        bn = BatchNorm(3)
        bn.running_mean = np.array([1.0, 2.0, 3.0])
        bn.running_var = np.array([4.0, 9.0, 16.0])
        x = rng.standard_normal((10, 3))
        y, _ = bn.forward(x, EVAL, update_stats=False)
        expect = (x - bn.running_mean) / np.sqrt(bn.running_var + BN_EPS)
        assert np.allclose(y, expect, atol=1e-12)

    def test_running_stat_momentum_update(self):
        bn = BatchNorm(1, momentum=0.1)
        x = np.full((8, 1), 10.0)
        bn.forward(x, TRAIN, update_stats=True)
        assert np.allclose(bn.running_mean, 0.9 * 0.0 + 0.1 * 10.0)
        assert np.allclose(bn.running_var, 0.9 * 1.0 + 0.1 * 0.0)

    def test_variance_never_negative(self):
        bn = BatchNorm(2)
        assert np.all(bn.running_var >= 0)


class TestEvalPurity:
    def test_eval_forward_deterministic(self, rng):
        net = make_net("cnn-small", (1, 8, 8), 4, seed=4)
        x = rng.random((3, 1, 8, 8))
        a, _ = net.forward(x, EVAL, update_stats=False)
        b, _ = net.clone().forward(x, EVAL, update_stats=False)
        assert np.array_equal(a, b)

    def test_relu_derivative_zero_at_zero(self):
        relu = ReLU()
        y, cache = relu.forward(np.array([[-1.0, 0.0, 2.0]]), EVAL)
        dx, _ = relu.backward(np.ones((1, 3)), cache, EVAL)
        assert np.array_equal(dx, [[0.0, 0.0, 1.0]])

    def test_maxpool_first_max_wins(self):
        mp = MaxPool()
        x = np.array([[[[1.0, 1.0], [1.0, 1.0]]]])  # four-way tie
        _, cache = mp.forward(x, EVAL)
        dx, _ = mp.backward(np.array([[[[5.0]]]]), cache, EVAL)
        assert np.array_equal(dx, [[[[5.0, 0.0], [0.0, 0.0]]]])


class TestDescriptor:
    def test_descriptor_round_trip(self):
        net = make_net("cnn-small", (1, 8, 8), 4, dtype=np.float32, seed=0)
        rebuilt = net_from_descriptor(net.descriptor)
        assert rebuilt.descriptor == net.descriptor
        assert rebuilt.num_params() == net.num_params()
        assert rebuilt.dtype == np.float32

    def test_unknown_arch_raises(self):
        with pytest.raises(NetworkError):
            make_net("resnet-152", (1, 8, 8), 4)


class TestInputGradFastPath:
    def test_matches_full_backward(self, rng):
        """The attack fast path must agree with the full backward pass."""
        for arch in ("mlp-small", "cnn-small"):
            net = make_net(arch, (1, 8, 8), 4, seed=6)
            x = rng.random((5, 1, 8, 8))
            y = rng.integers(0, 4, 5)
            dx_full, _, _ = net.input_grad(x, y, EVAL)
            dx_fast, _, _ = netcore.input_grad_only(net, x, y, EVAL)
            assert np.allclose(dx_full, dx_fast, atol=1e-12)

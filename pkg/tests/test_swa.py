"""Aggregator and BN-recalibration tests."""

import numpy as np
import pytest

import swaat
from swaat.netcore import BN_EPS, EVAL, make_net
from swaat.swa import (
    ADVERSARIAL, AggregatorError, EXACT_SMA, NATURAL, RECURRENCE,
    WeightAggregator, adjust_bn, swap_in,
)
from swaat.attack import AttackConfig


class TestAggregator:
    def test_first_update_both_modes(self):
        theta = np.array([1.0, -2.0])
        for mode in (RECURRENCE, EXACT_SMA):
            agg = WeightAggregator(4, mode)
            agg.update(theta)
            assert np.array_equal(agg.theta_swa, theta)
            assert agg.w == 1

    def test_constant_stream_fixed_point(self):
        c = np.array([3.0, 7.0])
        for mode in (RECURRENCE, EXACT_SMA):
            agg = WeightAggregator(3, mode)
            for _ in range(10):
                agg.update(c)
            assert np.allclose(agg.theta_swa, c, atol=1e-14)

    def test_divergence_example_stream_1_to_5_window_4(self):
        """ExactSMA -> 3.5; the recurrence -> 3.125. Exact arithmetic."""
        exact = WeightAggregator(4, EXACT_SMA)
        rec = WeightAggregator(4, RECURRENCE)
        for v in (1.0, 2.0, 3.0, 4.0, 5.0):
            exact.update(np.array([v]))
            rec.update(np.array([v]))
        assert exact.theta_swa[0] == 3.5
        assert rec.theta_swa[0] == 3.125

    def test_exact_sma_equals_ring_mean(self, rng):
        agg = WeightAggregator(7, EXACT_SMA)
        stream = []
        for i in range(200):
            theta = rng.standard_normal(5)
            stream.append(theta)
            agg.update(theta)
            expect = np.mean(stream[-7:] if i >= 6 else stream, axis=0)
            assert np.allclose(agg.theta_swa, expect, atol=1e-12)

    def test_recurrence_matches_exact_sma_in_cumulative_phase(self, rng):
        window = 9
        a = WeightAggregator(window, RECURRENCE)
        b = WeightAggregator(window, EXACT_SMA)
        for i in range(window):
            theta = rng.standard_normal(4)
            a.update(theta)
            b.update(theta)
            assert np.array_equal(a.theta_swa, b.theta_swa)  # bitwise

    def test_w_tracks_min_count_window(self):
        agg = WeightAggregator(3, RECURRENCE)
        for i in range(1, 6):
            agg.update(np.zeros(2))
            assert agg.w == min(i, 3)

    def test_length_mismatch_raises(self):
        agg = WeightAggregator(2)
        agg.update(np.zeros(3))
        with pytest.raises(AggregatorError):
            agg.update(np.zeros(4))

    def test_bad_window_or_mode(self):
        with pytest.raises(AggregatorError):
            WeightAggregator(0)
        with pytest.raises(AggregatorError):
            WeightAggregator(2, "median")


class TestSwapIn:
    def test_swap_assigns_theta_exactly(self, rng):
        net = make_net("mlp-tiny", (1, 4, 4), 3, seed=1)
        agg = WeightAggregator(4)
        for _ in range(3):
            agg.update(rng.standard_normal(net.num_params()))
        swap_in(agg, net)
        assert np.array_equal(net.flatten(), agg.theta_swa)

    def test_swap_leaves_aggregator_unchanged_and_idempotent(self, rng):
        net = make_net("mlp-tiny", (1, 4, 4), 3, seed=1)
        agg = WeightAggregator(4)
        agg.update(rng.standard_normal(net.num_params()))
        before = agg.theta_swa.copy()
        swap_in(agg, net)
        swap_in(agg, net)
        assert np.array_equal(agg.theta_swa, before)
        assert agg.count == 1
        assert np.array_equal(net.flatten(), before)

    def test_empty_aggregator_raises(self):
        net = make_net("mlp-tiny", (1, 4, 4), 3)
        with pytest.raises(AggregatorError):
            swap_in(WeightAggregator(4), net)

    def test_bn_running_stats_untouched_by_swap(self, rng):
        net = make_net("mlp-small", (1, 4, 4), 3, seed=2)
        bn = net.layers[2]
        bn.running_mean = np.full(256, 5.0)
        agg = WeightAggregator(2)
        agg.update(rng.standard_normal(net.num_params()))
        swap_in(agg, net)
        assert np.all(bn.running_mean == 5.0)


class TestAdjustBn:
    def _two_pass_oracle(self, net, images, layer_idx):
        pre, _ = net.forward(images, EVAL, update_stats=False, upto=layer_idx)
        axes = (0,) if pre.ndim == 2 else (0, 2, 3)
        return pre.mean(axis=axes), pre.var(axis=axes)

    def test_constant_dataset_degenerate_stats(self):
        """Per-feature BN on identical examples: mean = activation, var = 0."""
        net = make_net("mlp-small", (1, 8, 8), 3, seed=0)
        images = np.full((12, 1, 8, 8), 0.25)
        labels = np.zeros(12, dtype=np.int64)
        ds = swaat.Dataset(images, labels, 3)
        adjust_bn(net, ds, NATURAL, batch_size=5)
        idx, bn = net.bn_layers()[0]
        pre, _ = net.forward(images[:1], EVAL, update_stats=False, upto=idx)
        assert np.allclose(bn.running_mean, pre[0], atol=1e-10)
        assert np.allclose(bn.running_var, 0.0, atol=1e-10)

    def test_streaming_equals_two_pass(self, tiny_dataset):
        net = make_net("cnn-small", (1, 8, 8), tiny_dataset.classes, seed=3)
        adjust_bn(net, tiny_dataset, NATURAL, batch_size=32)
        for idx, bn in net.bn_layers():
            mean, var = self._two_pass_oracle(net, tiny_dataset.images, idx)
            assert np.allclose(bn.running_mean, mean, atol=1e-10)
            assert np.allclose(bn.running_var, var, atol=1e-10)

    def test_batch_size_invariance(self, tiny_dataset):
        stats = []
        for bs in (16, 64, 200):
            net = make_net("cnn-small", (1, 8, 8), tiny_dataset.classes, seed=4)
            adjust_bn(net, tiny_dataset, NATURAL, batch_size=bs)
            stats.append(net.bn_state())
        for other in stats[1:]:
            for (m0, v0), (m1, v1) in zip(stats[0], other):
                assert np.allclose(m0, m1, atol=1e-10)
                assert np.allclose(v0, v1, atol=1e-10)

    def test_natural_recalibration_is_pure(self, tiny_dataset):
        net = make_net("cnn-small", (1, 8, 8), tiny_dataset.classes, seed=5)
        adjust_bn(net, tiny_dataset, NATURAL)
        first = net.bn_state()
        adjust_bn(net, tiny_dataset, NATURAL)
        for (m0, v0), (m1, v1) in zip(first, net.bn_state()):
            assert np.array_equal(m0, m1) and np.array_equal(v0, v1)

    def test_adversarial_mode_differs_from_natural(self, trained_mlp, tiny_dataset):
        net = make_net("cnn-small", (1, 8, 8), tiny_dataset.classes, seed=6)
        cfg = AttackConfig(epsilon=0.1, alpha=0.025, steps=3)
        adjust_bn(net, tiny_dataset, NATURAL)
        nat = net.bn_state()
        adjust_bn(net, tiny_dataset, ADVERSARIAL, cfg,
                  rng=np.random.default_rng(0))
        adv = net.bn_state()
        assert any(not np.allclose(m0, m1) for (m0, _), (m1, _) in zip(nat, adv))

    def test_adversarial_without_config_raises(self, tiny_dataset):
        net = make_net("cnn-small", (1, 8, 8), tiny_dataset.classes, seed=0)
        with pytest.raises(AggregatorError):
            adjust_bn(net, tiny_dataset, ADVERSARIAL)

    def test_empty_dataset_raises(self):
        net = make_net("mlp-small", (1, 4, 4), 2)
        ds = swaat.Dataset(np.zeros((0, 1, 4, 4)), np.zeros(0, dtype=np.int64), 2)
        with pytest.raises(AggregatorError):
            adjust_bn(net, ds, NATURAL)


class TestLinearAveragingEquivalence:
    def test_averaged_weights_equal_averaged_outputs(self, rng):
        """For affine networks, forward(mean theta) == mean forward(theta_i)."""
        members = [make_net("linear", (1, 6, 6), 5, seed=s) for s in range(4)]
        avg_net = make_net("linear", (1, 6, 6), 5, seed=99)
        avg_net.unflatten(np.mean([m.flatten() for m in members], axis=0))
        x = rng.random((50, 1, 6, 6))
        member_mean = np.mean(
            [m.forward(x, update_stats=False)[0] for m in members], axis=0)
        out, _ = avg_net.forward(x, update_stats=False)
        assert np.allclose(out, member_mean, atol=1e-10)

    def test_nonlinear_divergence_is_nonzero(self, rng):
        """The same identity fails for ReLU nets; measured, not asserted small."""
        members = [make_net("mlp-tiny", (1, 4, 4), 3, seed=s) for s in range(3)]
        avg_net = make_net("mlp-tiny", (1, 4, 4), 3, seed=99)
        avg_net.unflatten(np.mean([m.flatten() for m in members], axis=0))
        x = rng.random((20, 1, 4, 4))
        member_mean = np.mean(
            [m.forward(x, update_stats=False)[0] for m in members], axis=0)
        out, _ = avg_net.forward(x, update_stats=False)
        gap = np.abs(out - member_mean).max()
        assert gap > 1e-6  # documents that the equivalence is linear-only

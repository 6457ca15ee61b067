import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inas import controller as ctl
from inas.controller import (
    ControllerNet,
    bernoulli_entropy,
    encourage,
    log_prob_of_actions,
    policy_forward,
    policy_gradient_update,
    policy_loss,
    sample_actions,
    threshold_baseline,
)
from inas.metagraph import MetaGraphSpec
from inas.nn import SGDMomentum

from reference import conv2d_scipy


def tiny_spec(kinds=("BasicConv", "MBConv-3F-3K"), input_size=8):
    return MetaGraphSpec.build([4, 4], [1], 4, 2, kinds=kinds,
                               input_channels=1, input_size=input_size)


class SmallController(ControllerNet):
    CHANNELS = (2, 3, 4)


class TestPolicyForward:
    def test_zero_output_layer_gives_half(self):
        net = ControllerNet(tiny_spec(), seed=0)
        net.params["controller.fc.w"].data[:] = 0.0
        net.params["controller.fc.b"].data[:] = 0.0
        p = policy_forward(net, np.random.default_rng(0).normal(size=(3, 1, 8, 8)))
        np.testing.assert_array_equal(p, np.full((3, 2), 0.5))

    def test_deterministic(self):
        net = ControllerNet(tiny_spec(), seed=1)
        x = np.random.default_rng(1).normal(size=(2, 1, 8, 8))
        assert np.array_equal(policy_forward(net, x), policy_forward(net, x))

    def test_distinct_inputs_give_distinct_outputs(self):
        rng = np.random.default_rng(2)
        distinct = 0
        for seed in range(10):
            net = ControllerNet(tiny_spec(), seed=seed)
            a = policy_forward(net, rng.normal(size=(1, 1, 8, 8)))
            b = policy_forward(net, rng.normal(size=(1, 1, 8, 8)))
            distinct += not np.array_equal(a, b)
        assert distinct == 10

    def test_resolution_mismatch_rejected(self):
        net = ControllerNet(tiny_spec(input_size=8), seed=0)
        with pytest.raises(ValueError, match="resolution 8x8"):
            net.forward(np.zeros((1, 1, 16, 16)))

    def test_output_width_matches_module_count(self):
        spec = tiny_spec(kinds=("BasicConv", "MBConv-3F-3K", "MBConv-5F-6K"))
        net = ControllerNet(spec, seed=0)
        p = policy_forward(net, np.zeros((2, 1, 8, 8)))
        assert p.shape == (2, spec.module_count)
        assert np.all((p >= 0) & (p <= 1))


class TestEncourage:
    def test_alpha_one_is_identity(self):
        p = np.array([0.1, 0.5, 0.9])
        np.testing.assert_array_equal(encourage(p, 1.0), p)

    def test_alpha_half_fully_mixes(self):
        p = np.array([0.0, 0.3, 1.0])
        np.testing.assert_allclose(encourage(p, 0.5), 0.5)

    def test_arithmetic_example(self):
        assert encourage(np.array([0.8]), 0.9)[0] == pytest.approx(0.74)

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_half_is_fixed_point(self, alpha):
        assert encourage(np.array([0.5]), alpha)[0] == pytest.approx(0.5)

    def test_range_preserved(self):
        rng = np.random.default_rng(3)
        p = rng.random(100)
        out = encourage(p, 0.8)
        assert np.all((out >= 0.0) & (out <= 1.0))

    def test_bad_alpha_rejected(self):
        with pytest.raises(ValueError, match="alpha"):
            encourage(np.array([0.5]), 1.5)


class TestSampling:
    def test_all_ones_probs(self):
        spec = tiny_spec()
        p = np.ones((1, spec.module_count))
        s = sample_actions(spec, p, p, np.random.default_rng(0))
        assert np.all(s.actions == 1)
        assert s.log_prob_sum[0] == 0.0

    def test_all_zero_probs_repaired_to_defaults(self):
        spec = tiny_spec()
        p = np.zeros((1, spec.module_count))
        s = sample_actions(spec, p, p, np.random.default_rng(0))
        assert np.all(s.actions == 0)
        assert s.selections[0].active_count() == len(spec.cells)

    def test_half_probs_log_prob_and_monte_carlo(self):
        spec = MetaGraphSpec.build([4] * 9, [1] * 8, 4, 2,
                                   kinds=("BasicConv", "MBConv-3F-3K", "MBConv-3F-6K",
                                          "MBConv-5F-3K", "MBConv-5F-6K"))
        assert spec.module_count == 40
        p = np.full((1, 40), 0.5)
        rng = np.random.default_rng(7)
        s = sample_actions(spec, p, p, rng)
        assert s.log_prob_sum[0] == pytest.approx(40 * math.log(0.5))
        draws = np.concatenate([sample_actions(spec, p, p, rng).actions for _ in range(250)])
        assert abs(draws.mean() - 0.5) < 0.02  # 10^4 Bernoulli draws

    def test_baseline_strict_threshold(self):
        p = np.array([[0.5, 0.5 + 1e-12, 0.49, 0.51]])
        np.testing.assert_array_equal(threshold_baseline(p), [[0, 1, 0, 1]])

    def test_baseline_deterministic_function_of_p(self):
        rng = np.random.default_rng(4)
        p = rng.random((5, 8))
        assert np.array_equal(threshold_baseline(p), threshold_baseline(p.copy()))

    def test_log_prob_matches_manual(self):
        probs = np.array([[0.7, 0.2, 0.9]])
        actions = np.array([[1, 0, 0]])
        want = math.log(0.7) + math.log(0.8) + math.log(0.1)
        assert log_prob_of_actions(probs, actions)[0] == pytest.approx(want)


class TestEntropy:
    def test_uniform_policy(self):
        assert bernoulli_entropy(np.full(40, 0.5)) == pytest.approx(40 * math.log(2))

    def test_deterministic_policy_zero(self):
        assert bernoulli_entropy(np.array([0.0, 1.0, 1.0, 0.0])) == 0.0

    def test_point_nine(self):
        assert bernoulli_entropy(np.array([0.9])) == pytest.approx(0.3251, abs=1e-4)

    def test_rows_for_batches(self):
        h = bernoulli_entropy(np.array([[0.5, 0.5], [1.0, 0.0]]))
        np.testing.assert_allclose(h, [2 * math.log(2), 0.0])


def numpy_policy_loss(weights, x, actions, advantage, alpha, entropy_coef):
    """Independent numpy replica of the REINFORCE objective (scipy convs)."""
    h = conv2d_scipy(x, weights["controller.conv1.w"], stride=2, padding=3)
    h = np.clip(h + weights["controller.conv1.b"][None, :, None, None], 0, 6)
    h = conv2d_scipy(h, weights["controller.conv2.w"], stride=2, padding=2)
    h = np.clip(h + weights["controller.conv2.b"][None, :, None, None], 0, 6)
    h = conv2d_scipy(h, weights["controller.conv3.w"], stride=2, padding=2)
    h = h + weights["controller.conv3.b"][None, :, None, None]
    pooled = h.mean(axis=(2, 3))
    logits = pooled @ weights["controller.fc.w"] + weights["controller.fc.b"]
    p = 1.0 / (1.0 + np.exp(-logits))
    p_mut = alpha * p + (1 - alpha) * (1 - p)
    logp = actions * np.log(p_mut) + (1 - actions) * np.log(1 - p_mut)
    pg = -(advantage * logp.sum(axis=1)).mean()
    ent = -(p * np.log(p) + (1 - p) * np.log(1 - p)).sum(axis=1).mean()
    return pg + entropy_coef * ent


class TestPolicyGradientUpdate:
    def test_loss_gradient_matches_finite_differences(self):
        spec = tiny_spec()
        net = SmallController(spec, seed=5, entropy_coef=0.05)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 1, 8, 8))
        actions = rng.integers(0, 2, size=(3, spec.module_count)).astype(np.float64)
        advantage = rng.normal(size=3)
        alpha = 0.8

        loss, _ = policy_loss(net, x, actions, advantage, alpha)
        loss.backward()
        analytic = {name: t.grad.copy() for name, t in net.params.items()}

        weights = {name: t.data for name, t in net.params.items()}
        step = 1e-5
        for name, arr in weights.items():
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = numpy_policy_loss(weights, x, actions, advantage, alpha, net.entropy_coef)
                flat[i] = orig - step
                lo = numpy_policy_loss(weights, x, actions, advantage, alpha, net.entropy_coef)
                flat[i] = orig
                num = (hi - lo) / (2 * step)
                ana = analytic[name].reshape(-1)[i]
                denom = max(abs(num), abs(ana), 1e-3)
                assert abs(num - ana) / denom < 1e-4, f"{name}[{i}]: {ana} vs {num}"

    def test_positive_advantage_raises_selected_probs(self):
        spec = tiny_spec()
        net = ControllerNet(spec, seed=6, entropy_coef=0.0)
        x = np.random.default_rng(6).normal(size=(1, 1, 8, 8))
        before = policy_forward(net, x)[0]
        actions = np.ones((1, spec.module_count), dtype=np.uint8)
        sample = ctl.PolicySample(
            actions=actions, mutated_probs=encourage(before[None], 0.8),
            baseline=threshold_baseline(before[None]),
            log_prob_sum=np.zeros(1), selections=[], baseline_selections=[],
        )
        policy_gradient_update(net, x, sample, np.array([10.0]), np.array([0.0]),
                               SGDMomentum(lr=1e-3), alpha=0.8)
        after = policy_forward(net, x)[0]
        assert np.all(after > before)

    def test_zero_advantage_only_entropy_updates(self):
        spec = tiny_spec()
        net = ControllerNet(spec, seed=7, entropy_coef=0.02)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 1, 8, 8))
        opt = SGDMomentum(lr=0.05)
        entropies = []
        for _ in range(5):
            p = policy_forward(net, x)
            s = sample_actions(spec, encourage(p, 0.8), p, rng)
            diag = policy_gradient_update(net, x, s, np.zeros(4), np.zeros(4), opt, alpha=0.8)
            entropies.append(diag["mean_entropy"])
        assert all(a >= b - 1e-12 for a, b in zip(entropies, entropies[1:]))
        assert entropies[-1] < entropies[0]

    def test_nonfinite_rewards_dropped(self, caplog):
        spec = tiny_spec()
        net = ControllerNet(spec, seed=8)
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 1, 8, 8))
        p = policy_forward(net, x)
        s = sample_actions(spec, encourage(p, 0.8), p, rng)
        with caplog.at_level("WARNING"):
            diag = policy_gradient_update(net, x, s, np.array([1.0, np.nan, 2.0]),
                                          np.zeros(3), SGDMomentum(lr=1e-3), alpha=0.8)
        assert "non-finite" in caplog.text
        assert np.isfinite(diag["loss"])

    def test_update_reports_diagnostics(self):
        spec = tiny_spec()
        net = ControllerNet(spec, seed=9)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 1, 8, 8))
        p = policy_forward(net, x)
        s = sample_actions(spec, encourage(p, 0.8), p, rng)
        r = np.array([3.0, 1.0, 0.0, 2.0])
        rb = np.array([1.0, 1.0, 1.0, 1.0])
        diag = policy_gradient_update(net, x, s, r, rb, SGDMomentum(lr=1e-3), alpha=0.8)
        assert diag["mean_advantage"] == pytest.approx((r - rb).mean())
        assert diag["advantage_variance"] == pytest.approx((r - rb).var())
        assert diag["mean_entropy"] > 0

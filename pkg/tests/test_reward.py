import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inas.reward import (
    RewardConfig,
    RewardSchedule,
    bounds_at,
    combine,
    combine_batch,
    init_bounds,
    latency_reward,
    latency_reward_batch,
    task_reward,
)


class TestSchedule:
    def test_u0_is_twice_sampled_mean(self):
        sched = init_bounds(0.5, reference_latency_ms=0.8, total_epochs=10)
        assert sched.u0 == 1.0
        assert sched.u_final == 0.4

    def test_degenerate_final_held_constant(self, caplog):
        with caplog.at_level("WARNING"):
            sched = init_bounds(0.5, reference_latency_ms=10.0, total_epochs=10)
        assert sched.u_final == sched.u0 == 1.0
        assert "degenerate" in caplog.text

    def test_nonpositive_reference_rejected(self):
        with pytest.raises(ValueError, match="reference latency"):
            init_bounds(0.5, reference_latency_ms=0.0, total_epochs=10)

    def test_bounds_interpolation(self):
        sched = RewardSchedule(u0=2.0, u_final=1.0, l0=0.5, l_final=0.0, total_epochs=10)
        assert bounds_at(sched, 0) == (2.0, 0.5)
        assert bounds_at(sched, 10) == (1.0, 0.0)
        u, lo = bounds_at(sched, 5)
        assert u == pytest.approx(1.5)
        assert lo == pytest.approx(0.25)

    def test_static_mode_pins_final(self):
        sched = RewardSchedule(2.0, 1.0, 0.0, 0.0, 10, static=True)
        for t in (0, 3, 10):
            assert bounds_at(sched, t) == (1.0, 0.0)

    def test_upper_monotone_non_increasing(self):
        sched = init_bounds(0.7, reference_latency_ms=0.9, total_epochs=40)
        us = [bounds_at(sched, t)[0] for t in range(41)]
        assert all(a >= b for a, b in zip(us, us[1:]))
        assert all(bounds_at(sched, t)[0] > bounds_at(sched, t)[1] for t in range(41))


class TestLatencyReward:
    def test_vertex_exactly_one(self):
        assert latency_reward(1.5, 2.0, 1.0) == 1.0

    def test_roots_exactly_zero(self):
        assert latency_reward(2.0, 2.0, 1.0) == 0.0
        assert latency_reward(1.0, 2.0, 1.0) == 0.0
        # positive zero, so serialized metrics never show "-0.0"
        assert str(latency_reward(2.0, 2.0, 1.0)) == "0.0"

    def test_outside_band_clamped(self):
        # raw value is -(1/0.25)*0.5*1.5 = -3.0
        assert latency_reward(2.5, 2.0, 1.0) == 0.0
        assert latency_reward(2.5, 2.0, 1.0, clamp=False) == pytest.approx(-3.0)

    def test_degenerate_band_rejected(self):
        with pytest.raises(ValueError, match="must exceed"):
            latency_reward(1.0, 1.0, 1.0)

    @given(st.floats(-10, 10), st.floats(0.1, 5.0), st.floats(0.0, 0.09))
    @settings(max_examples=200, deadline=None)
    def test_symmetry_about_midpoint(self, z, width, lower):
        upper = lower + width
        a = latency_reward(z, upper, lower)
        b = latency_reward(upper + lower - z, upper, lower)
        assert a == pytest.approx(b, abs=1e-9)

    def test_strictly_decreasing_away_from_midpoint(self):
        upper, lower = 3.0, 1.0
        mid = 2.0
        zs = np.linspace(mid, upper, 50)
        vals = [latency_reward(z, upper, lower) for z in zs]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_batch_matches_scalar(self):
        zs = np.array([0.5, 1.0, 1.5, 2.0, 2.5])
        batch = latency_reward_batch(zs, 2.0, 1.0)
        for z, v in zip(zs, batch):
            assert v == latency_reward(float(z), 2.0, 1.0)


class TestTaskReward:
    def test_correct_pays_default_30(self):
        cfg = RewardConfig()
        assert task_reward(np.array([0.1, 3.0, -1.0]), 1, cfg) == 30.0

    def test_incorrect_pays_zero(self):
        assert task_reward(np.array([0.1, 3.0, -1.0]), 0, RewardConfig()) == 0.0

    def test_configurable_magnitude(self):
        assert task_reward(np.array([5.0, 1.0]), 0, RewardConfig(task_reward=1.0)) == 1.0

    def test_tie_broken_by_lowest_index(self):
        logits = np.array([2.0, 2.0, 1.0])
        assert task_reward(logits, 0, RewardConfig()) == 30.0
        assert task_reward(logits, 1, RewardConfig()) == 0.0

    def test_argmax_invariant_under_positive_scaling(self):
        rng = np.random.default_rng(0)
        cfg = RewardConfig()
        for _ in range(20):
            logits = rng.normal(size=5)
            label = int(rng.integers(0, 5))
            assert task_reward(logits, label, cfg) == task_reward(3.7 * logits, label, cfg)

    def test_nonpositive_task_reward_rejected(self):
        with pytest.raises(ValueError):
            RewardConfig(task_reward=0.0)


class TestCombine:
    @pytest.mark.parametrize("r_t,r_a,expected", [
        (30.0, 0.5, 15.0),
        (0.0, 0.9, 0.0),   # non-positive task reward passes through
        (30.0, 1.0, 30.0),
        (30.0, 0.0, 0.0),
        (0.0, 0.0, 0.0),
    ])
    def test_truth_table(self, r_t, r_a, expected):
        assert combine(r_t, r_a) == expected

    def test_batch_matches_scalar(self):
        r_t = np.array([30.0, 0.0, 30.0])
        r_a = np.array([0.25, 0.9, 1.0])
        np.testing.assert_array_equal(combine_batch(r_t, r_a), [7.5, 0.0, 30.0])

    def test_bounded_and_positive_implies_correct(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            r_a = latency_reward(float(rng.uniform(-1, 4)), 2.0, 1.0)
            correct = bool(rng.integers(0, 2))
            r_t = 30.0 if correct else 0.0
            r = combine(r_t, r_a)
            assert 0.0 <= r <= 30.0
            if r > 0:
                assert correct

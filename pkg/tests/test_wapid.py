from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdmpo.wapid import WapidState, cost_signal, wapid_update


class TestWorkedExamples:
    def test_proportional_only(self):
        state = WapidState(k_p=1.0, k_i=0.0, k_d=0.0)
        lam, _ = wapid_update(state, j_c=30.0, d=25.0)
        assert lam == 5.0

    def test_cost_below_threshold_gives_zero(self):
        # fresh controller, any gains: every term is non-positive
        for gains in [(1.0, 1.0, 1.0), (0.3, 2.0, 5.0), (0.0, 0.1, 9.0)]:
            state = WapidState(k_p=gains[0], k_i=gains[1], k_d=gains[2], w=0.5)
            lam, _ = wapid_update(state, j_c=20.0, d=25.0)
            assert lam == 0.0

    def test_integral_only_rectified(self):
        state = WapidState(k_p=0.0, k_i=1.0, k_d=0.0, w=0.5)
        lam, state = wapid_update(state, j_c=30.0, d=25.0)
        assert state.integral == pytest.approx(2.5)
        assert lam == pytest.approx(2.5)

    def test_w_one_tracks_running_maximum(self, rng):
        state = WapidState(k_p=0.0, k_i=1.0, k_d=0.0, w=1.0)
        d = 25.0
        running_max = -np.inf
        for _ in range(200):
            j_c = float(rng.uniform(0, 60))
            _, state = wapid_update(state, j_c, d)
            running_max = max(running_max, max(j_c - d, 0.0))
            # integral starts at 0 and can only move up toward delta
            assert state.integral == pytest.approx(max(running_max, 0.0))

    def test_unrectified_constant_delta_geometric_form(self):
        w = 0.3
        delta = 4.0
        d = 25.0
        state = WapidState(k_p=0.0, k_i=1.0, k_d=0.0, w=w, rectified_integral=False)
        for k in range(1, 40):
            _, state = wapid_update(state, d + delta, d)
            closed_form = delta * (1.0 - (1.0 - w) ** k)
            assert state.integral == pytest.approx(closed_form, abs=1e-12)


class TestInvariants:
    def test_lambda_never_negative(self, rng):
        state = WapidState(k_p=0.5, k_i=0.2, k_d=0.3, w=0.4)
        for _ in range(500):
            lam, state = wapid_update(state, float(rng.normal(25, 20)), 25.0)
            assert lam >= 0.0

    def test_rectified_integral_monotone(self, rng):
        state = WapidState(w=0.2, rectified_integral=True)
        prev = state.integral
        for _ in range(500):
            _, state = wapid_update(state, float(rng.normal(25, 15)), 25.0)
            assert state.integral >= prev
            prev = state.integral

    def test_unrectified_integral_bounded_by_delta_range(self, rng):
        lo, hi = -5.0, 12.0
        d = 25.0
        state = WapidState(w=0.7, rectified_integral=False)
        for _ in range(500):
            delta = float(rng.uniform(lo, hi))
            _, state = wapid_update(state, d + delta, d)
            assert min(0.0, lo) - 1e-12 <= state.integral <= max(0.0, hi) + 1e-12

    def test_unrectified_matches_weighted_average_expansion(self, rng):
        w = 0.15
        d = 25.0
        deltas = rng.uniform(-10, 30, size=1000)
        state = WapidState(k_p=0.0, k_i=1.0, k_d=0.0, w=w, rectified_integral=False)
        for k, delta in enumerate(deltas, start=1):
            _, state = wapid_update(state, d + float(delta), d)
            expansion = float(
                sum(w * (1 - w) ** (k - i) * deltas[i - 1] for i in range(1, k + 1))
            )
            assert abs(state.integral - expansion) < 1e-9

    def test_zero_ki_kd_reduces_to_proportional(self, rng):
        wapid = WapidState(k_p=0.4, k_i=0.0, k_d=0.0, w=0.3, mode="wapid")
        prop = WapidState(k_p=0.4, k_i=0.0, k_d=0.0, mode="p")
        for _ in range(300):
            j_c = float(rng.uniform(0, 80))
            lam_w, _ = wapid_update(wapid, j_c, 25.0)
            lam_p, _ = wapid_update(prop, j_c, 25.0)
            assert lam_w == lam_p == max(0.4 * (j_c - 25.0), 0.0)

    def test_pid_mode_accumulates_raw_delta(self):
        state = WapidState(k_p=0.0, k_i=1.0, k_d=0.0, mode="pid")
        for j_c, expected in [(30.0, 5.0), (28.0, 8.0), (20.0, 3.0)]:
            _, state = wapid_update(state, j_c, 25.0)
            assert state.integral == pytest.approx(expected)

    def test_derivative_uses_raw_cost_difference(self):
        state = WapidState(k_p=0.0, k_i=0.0, k_d=1.0, w=0.5)
        lam, state = wapid_update(state, 30.0, 25.0)
        assert lam == 0.0  # first update: no previous cost, derivative zero
        lam, state = wapid_update(state, 42.0, 25.0)
        assert lam == pytest.approx(12.0)
        lam, state = wapid_update(state, 35.0, 25.0)
        assert lam == 0.0  # falling cost rectifies to zero


@settings(max_examples=80, deadline=None)
@given(
    costs=st.lists(st.floats(0.0, 200.0), min_size=1, max_size=60),
    gains=st.tuples(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.floats(0.0, 3.0)),
    w=st.floats(0.01, 1.0),
)
def test_lambda_nonnegative_property(costs, gains, w):
    state = WapidState(k_p=gains[0], k_i=gains[1], k_d=gains[2], w=w)
    for j_c in costs:
        lam, state = wapid_update(state, j_c, 25.0)
        assert lam >= 0.0


class TestCostSignal:
    def test_single_episode(self):
        assert cost_signal([30.0], window=10, d=25.0) == 30.0

    def test_window_mean(self):
        assert cost_signal([10.0, 40.0], window=2, d=25.0) == 25.0

    def test_window_larger_than_history(self):
        assert cost_signal([3.0, 6.0, 9.0], window=100, d=25.0) == pytest.approx(6.0)

    def test_only_trailing_window_counts(self):
        assert cost_signal([100.0, 10.0, 20.0], window=2, d=25.0) == 15.0

    def test_empty_history_is_neutral(self):
        assert cost_signal([], window=5, d=25.0) == 25.0

    def test_rejects_bad_window(self):
        with pytest.raises(ValueError):
            cost_signal([1.0], window=0, d=25.0)


def test_state_validation():
    with pytest.raises(ValueError):
        WapidState(mode="banana")
    with pytest.raises(ValueError):
        WapidState(k_p=-0.1)
    with pytest.raises(ValueError):
        WapidState(w=0.0)

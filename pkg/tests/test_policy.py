from __future__ import annotations

import numpy as np
import pytest

from cdmpo.nets import Mlp
from cdmpo.policy import (
    GaussianPolicy,
    conservative_select,
    kl_gaussian,
    log_prob,
    log_prob_grads,
    policy_head,
    sample_action_set,
    sample_candidates,
    softplus,
)
from conftest import finite_diff, flat_grads


def constant_policy(mean, scale, bounds=None):
    """Single-linear-layer policy whose head is state-independent."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    scale = np.atleast_1d(np.asarray(scale, dtype=np.float64))
    d = mean.size
    floor = 1e-6
    bound = 5.0
    # invert the mean clamp and the softplus so the head lands exactly
    raw_mean = bound * np.arctanh(mean / bound)
    pre = np.log(np.expm1(scale - floor))
    net = Mlp([np.zeros((3, 2 * d))], [np.concatenate([raw_mean, pre])], ())
    return GaussianPolicy(net, d, scale_floor=floor, bounds=bounds, mean_bound=bound)


class FixedTableCritic:
    """Stubbed cost critic returning a fixed value per candidate row."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def expected(self, states, actions, use_target=False):
        return self.values[: len(actions)]


class AffineCritic:
    def __init__(self, inner, a, b):
        self.inner, self.a, self.b = inner, a, b

    def expected(self, states, actions, use_target=False):
        return self.a * self.inner.expected(states, actions, use_target) + self.b


class TestSampling:
    def test_single_candidate(self, rng):
        policy = constant_policy([0.0], [1.0], bounds=(np.array([-1.0]), np.array([1.0])))
        actions = sample_action_set(policy, np.zeros(3), 1, rng)
        assert actions.shape == (1, 1)

    def test_rejects_nonpositive_n(self, rng):
        policy = constant_policy([0.0], [1.0])
        with pytest.raises(ValueError):
            sample_action_set(policy, np.zeros(3), 0, rng)

    def test_floor_scale_concentrates_on_squashed_mean(self, rng):
        bounds = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        policy = constant_policy([0.3, -0.7], [1e-6 + 1e-9, 1e-6 + 1e-9], bounds=bounds)
        actions = sample_action_set(policy, np.zeros(3), 64, rng)
        center = policy.squash(np.array([0.3, -0.7]))
        assert np.max(np.abs(actions - center)) < 1e-4

    def test_seeded_replay_is_bit_identical(self):
        policy = constant_policy([0.1], [0.5], bounds=(np.array([-1.0]), np.array([1.0])))
        a = sample_action_set(policy, np.zeros(3), 5, np.random.default_rng(77))
        b = sample_action_set(policy, np.zeros(3), 5, np.random.default_rng(77))
        np.testing.assert_array_equal(a, b)

    def test_actions_stay_in_box(self, rng):
        bounds = (np.array([-0.5]), np.array([2.0]))
        policy = constant_policy([5.0], [3.0], bounds=bounds)
        actions = sample_action_set(policy, np.zeros(3), 100, rng)
        assert np.all(actions >= -0.5) and np.all(actions <= 2.0)

    def test_batched_candidates_shape(self, rng):
        policy = constant_policy([0.0, 0.0], [1.0, 1.0])
        cands = sample_candidates(policy, rng.normal(size=(7, 3)), 4, rng)
        assert cands.shape == (7, 4, 2)


class TestConservativeSelect:
    def test_single_candidate_returned(self):
        critic = FixedTableCritic([3.3])
        action, index = conservative_select(critic, np.zeros(2), np.array([[0.4]]))
        assert index == 0
        np.testing.assert_array_equal(action, [0.4])

    def test_argmin_by_inspection(self):
        critic = FixedTableCritic([2.0, 1.0, 3.0])
        cands = np.array([[0.1], [0.2], [0.3]])
        action, index = conservative_select(critic, np.zeros(2), cands)
        assert index == 1
        np.testing.assert_array_equal(action, [0.2])

    def test_tie_breaks_to_lowest_index(self):
        critic = FixedTableCritic([1.5, 2.0, 1.5])
        _, index = conservative_select(critic, np.zeros(2), np.array([[0.1], [0.2], [0.3]]))
        assert index == 0

    def test_rejects_empty_candidates(self):
        with pytest.raises(ValueError):
            conservative_select(FixedTableCritic([]), np.zeros(2), np.zeros((0, 1)))

    def test_always_attains_minimum(self, rng):
        for _ in range(300):
            k = int(rng.integers(1, 12))
            values = rng.normal(size=k)
            critic = FixedTableCritic(values)
            _, index = conservative_select(critic, np.zeros(2), rng.normal(size=(k, 2)))
            assert values[index] == values.min()

    def test_invariant_under_positive_affine_rescaling(self, rng):
        for _ in range(100):
            k = int(rng.integers(2, 10))
            base = FixedTableCritic(rng.normal(size=k))
            cands = rng.normal(size=(k, 2))
            _, idx = conservative_select(base, np.zeros(2), cands)
            scaled = AffineCritic(base, float(rng.uniform(0.1, 10)), float(rng.normal()))
            _, idx2 = conservative_select(scaled, np.zeros(2), cands)
            assert idx == idx2

    def test_nested_candidate_sets_weakly_improve(self, rng):
        values = rng.normal(size=12)
        critic = FixedTableCritic(values)
        cands = rng.normal(size=(12, 2))
        prev = np.inf
        for n in (3, 6, 12):
            _, idx = conservative_select(critic, np.zeros(2), cands[:n])
            assert values[idx] <= prev
            prev = values[idx]


class TestLogProb:
    def test_gaussian_peak_no_squash(self):
        for d in (1, 2, 5):
            policy = constant_policy(np.zeros(d), np.ones(d), bounds=None)
            lp = log_prob(policy, np.zeros(3), np.zeros(d))
            assert lp == pytest.approx(-0.5 * d * np.log(2 * np.pi), abs=1e-9)

    def test_translation_invariance(self):
        shift = 1.37
        p0 = constant_policy([0.2], [0.8])
        p1 = constant_policy([0.2 + shift], [0.8])
        a = np.array([0.5])
        assert log_prob(p0, np.zeros(3), a) == pytest.approx(
            log_prob(p1, np.zeros(3), a + shift), abs=1e-12
        )

    def test_matches_per_dimension_product_oracle(self, rng):
        bounds = (np.array([-2.0, 0.0]), np.array([2.0, 4.0]))
        policy = constant_policy([0.3, -0.5], [0.7, 1.2], bounds=bounds)
        u_raw = rng.normal(size=2)
        action = policy.squash(np.array([0.3, -0.5]) + np.array([0.7, 1.2]) * u_raw)

        # independent per-dimension density product with change of variables
        center = (bounds[0] + bounds[1]) / 2
        half = (bounds[1] - bounds[0]) / 2
        v = (action - center) / half
        u = np.arctanh(v)
        expect = 0.0
        for mu, sd, ui, vi, hi in zip([0.3, -0.5], [0.7, 1.2], u, v, half):
            dens = np.exp(-0.5 * ((ui - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
            jac = hi * (1 - vi**2)
            expect += np.log(dens / jac)
        assert log_prob(policy, np.zeros(3), action) == pytest.approx(expect, abs=1e-10)

    def test_param_grads_match_finite_differences(self, rng):
        net = Mlp.create((2, 3, 4), "tanh", rng)  # 2-dim action head
        policy = GaussianPolicy(net, 2, scale_floor=0.01,
                                bounds=(np.array([-1.0, -1.0]), np.array([1.0, 1.0])))
        state = rng.normal(size=2)
        action = sample_action_set(policy, state, 1, rng)[0]
        _, grads = log_prob_grads(policy, state, action)
        numeric = finite_diff(lambda: log_prob(policy, state, action), policy.net)
        np.testing.assert_allclose(flat_grads(grads), numeric, rtol=1e-5, atol=1e-8)


class TestKl:
    def test_identical_is_zero(self, rng):
        m = rng.normal(size=3)
        s = rng.uniform(0.5, 2.0, size=3)
        assert kl_gaussian(m, s, m, s) == pytest.approx(0.0, abs=1e-15)

    def test_unit_scale_mean_shift(self):
        d = 4
        delta = 0.73
        m0 = np.zeros(d)
        m1 = np.full(d, delta)
        ones = np.ones(d)
        assert kl_gaussian(m0, ones, m1, ones) == pytest.approx(d * delta**2 / 2)

    def test_non_negative(self, rng):
        for _ in range(200):
            mp, mq = rng.normal(size=(2, 3))
            sp, sq = rng.uniform(0.2, 3.0, size=(2, 3))
            assert kl_gaussian(mp, sp, mq, sq) >= 0.0

    def test_matches_monte_carlo(self, rng):
        mp = np.array([0.3, -0.2])
        sp = np.array([0.8, 1.4])
        mq = np.array([-0.1, 0.5])
        sq = np.array([1.1, 0.6])
        n = 200_000
        x = mp + sp * rng.standard_normal((n, 2))

        def logpdf(x, m, s):
            z = (x - m) / s
            return -0.5 * (z * z).sum(axis=1) - np.log(s).sum() - np.log(2 * np.pi)

        samples = logpdf(x, mp, sp) - logpdf(x, mq, sq)
        mc = samples.mean()
        se = samples.std(ddof=1) / np.sqrt(n)
        exact = float(kl_gaussian(mp, sp, mq, sq))
        assert abs(exact - mc) < 3 * se

    def test_batch_rows(self, rng):
        mp, mq = rng.normal(size=(2, 5, 3))
        sp, sq = rng.uniform(0.5, 2.0, size=(2, 5, 3))
        rows = kl_gaussian(mp, sp, mq, sq)
        assert rows.shape == (5,)
        for i in range(5):
            assert rows[i] == pytest.approx(float(kl_gaussian(mp[i], sp[i], mq[i], sq[i])))


def test_head_scale_respects_floor(rng):
    net = Mlp.create((3, 4, 4), "tanh", rng)
    policy = GaussianPolicy(net, 2, scale_floor=0.05)
    head = policy_head(policy, rng.normal(size=(10, 3)) * 10)
    assert np.all(head.scale >= 0.05)


def test_softplus_matches_reference(rng):
    x = rng.normal(size=100) * 20
    np.testing.assert_allclose(softplus(x), np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0))

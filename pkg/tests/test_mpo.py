from __future__ import annotations

import numpy as np
import pytest

from cdmpo.mpo import (
    MpoConfig,
    dual_value,
    estep_weights,
    minimize_dual,
    mstep_loss_and_grads,
    mstep_update,
)
from cdmpo.nets import Adam, Mlp, clone, flatten
from cdmpo.policy import GaussianPolicy, policy_head, sample_candidates
from conftest import finite_diff, flat_grads


def random_batch(rng, m=6, k=5, scale=2.0):
    q = rng.normal(size=(m, k)) * scale
    c = rng.uniform(0, 3, size=(m, k))
    return q, c


class TestEstepWeights:
    def test_equal_q_gives_uniform(self):
        q = np.full((3, 4), 1.7)
        c = np.zeros((3, 4))
        w = estep_weights(q, c, lam=0.0, d=0.0, eta=0.5)
        np.testing.assert_allclose(w, np.full((3, 4), 0.25))

    def test_lambda_zero_reduces_to_unconstrained(self, rng):
        q, c = random_batch(rng)
        eta = 0.7
        w = estep_weights(q, c, lam=0.0, d=5.0, eta=eta)
        e = np.exp(q / eta - (q / eta).max(axis=1, keepdims=True))
        np.testing.assert_allclose(w, e / e.sum(axis=1, keepdims=True), atol=1e-12)

    def test_hand_computed_two_candidate_case(self):
        q = np.array([[1.0, 0.0]])
        c = np.array([[0.0, 2.0]])
        w = estep_weights(q, c, lam=1.0, d=0.0, eta=1.0)
        np.testing.assert_allclose(w[0], [0.9526, 0.0474], atol=1e-3)

    def test_normalized_per_state(self, rng):
        q, c = random_batch(rng, m=10, k=8)
        w = estep_weights(q, c, lam=0.3, d=1.0, eta=0.2)
        np.testing.assert_allclose(w.sum(axis=1), np.ones(10), atol=1e-9)

    def test_shift_invariance(self, rng):
        q, c = random_batch(rng)
        w = estep_weights(q, c, 0.5, 2.0, 0.9)
        shifted = estep_weights(q + rng.normal(size=(q.shape[0], 1)), c, 0.5, 2.0, 0.9)
        np.testing.assert_allclose(w, shifted, atol=1e-12)

    def test_ordering_matches_advantage(self, rng):
        q, c = random_batch(rng)
        lam, d, eta = 0.8, 1.0, 0.4
        w = estep_weights(q, c, lam, d, eta)
        adv = q - lam * (c - d)
        for i in range(q.shape[0]):
            assert np.all(np.argsort(w[i]) == np.argsort(adv[i]))

    def test_rejects_nonpositive_eta(self, rng):
        q, c = random_batch(rng)
        with pytest.raises(ValueError):
            estep_weights(q, c, 0.0, 0.0, 0.0)


class TestDualValue:
    def test_single_state_single_candidate(self):
        q = np.array([[2.0]])
        c = np.array([[1.5]])
        lam, d, eps = 0.7, 1.0, 0.1
        for eta in (0.01, 1.0, 50.0):
            expected = (2.0 - lam * (1.5 - d)) + eta * eps
            assert dual_value(eta, q, c, lam, d, eps) == pytest.approx(expected)

    def test_flat_advantages(self):
        q = np.full((4, 6), 3.0)
        c = np.zeros((4, 6))
        for eta in (0.1, 2.0, 100.0):
            assert dual_value(eta, q, c, 0.0, 0.0, 0.05) == pytest.approx(3.0 + eta * 0.05)

    def test_convexity_on_random_triples(self, rng):
        q, c = random_batch(rng, m=5, k=7)
        for _ in range(20):
            e1, e2 = rng.uniform(0.01, 50.0, size=2)
            t = rng.random()
            mid = dual_value(t * e1 + (1 - t) * e2, q, c, 0.4, 1.0, 0.1)
            hull = t * dual_value(e1, q, c, 0.4, 1.0, 0.1) + (1 - t) * dual_value(
                e2, q, c, 0.4, 1.0, 0.1
            )
            assert mid <= hull + 1e-9

    def test_stable_for_large_advantages(self):
        q = np.array([[1e5, -1e5]])
        c = np.zeros((1, 2))
        assert np.isfinite(dual_value(1e-3, q, c, 0.0, 0.0, 0.1))

    def test_rejects_nonpositive_eta(self):
        with pytest.raises(ValueError):
            dual_value(-1.0, np.zeros((1, 1)), np.zeros((1, 1)), 0.0, 0.0, 0.1)


def grid_minimizer(q, c, lam, d, eps, bounds, points=1000):
    etas = np.exp(np.linspace(np.log(bounds[0]), np.log(bounds[1]), points))
    values = [dual_value(e, q, c, lam, d, eps) for e in etas]
    return etas[int(np.argmin(values))], min(values)


class TestMinimizeDual:
    BOUNDS = (1e-3, 1e3)

    def test_flat_batch_returns_lower_bound(self):
        q = np.full((3, 5), 1.0)
        c = np.zeros((3, 5))
        eta = minimize_dual(q, c, 0.0, 0.0, 0.1, self.BOUNDS)
        assert eta == pytest.approx(self.BOUNDS[0], rel=1e-6)

    def test_single_candidate_returns_lower_bound(self, rng):
        q = rng.normal(size=(4, 1))
        c = rng.uniform(0, 2, size=(4, 1))
        eta = minimize_dual(q, c, 0.5, 1.0, 0.1, self.BOUNDS)
        assert eta == pytest.approx(self.BOUNDS[0], rel=1e-6)

    def test_agrees_with_grid_search(self, rng):
        for _ in range(25):
            q, c = random_batch(rng, m=4, k=6, scale=3.0)
            lam = float(rng.uniform(0, 2))
            eta = minimize_dual(q, c, lam, 1.0, 0.1, self.BOUNDS)
            eta_grid, g_grid = grid_minimizer(q, c, lam, 1.0, 0.1, self.BOUNDS)
            assert abs(eta - eta_grid) / eta_grid < 0.01
            assert dual_value(eta, q, c, lam, 1.0, 0.1) <= g_grid + 1e-6

    def test_result_no_worse_than_any_grid_point(self, rng):
        q, c = random_batch(rng, m=3, k=4)
        eta = minimize_dual(q, c, 0.2, 0.5, 0.1, self.BOUNDS)
        etas = np.exp(np.linspace(np.log(self.BOUNDS[0]), np.log(self.BOUNDS[1]), 1000))
        g_star = dual_value(eta, q, c, 0.2, 0.5, 0.1)
        for e in etas:
            assert g_star <= dual_value(e, q, c, 0.2, 0.5, 0.1) + 1e-6


def small_policy(rng, state_dim=2, action_dim=1):
    net = Mlp.create((state_dim, 3, 2 * action_dim), "tanh", rng)
    bounds = (np.full(action_dim, -1.0), np.full(action_dim, 1.0))
    return GaussianPolicy(net, action_dim, scale_floor=0.01, bounds=bounds)


class TestMstep:
    def test_one_hot_weights_reduce_to_log_likelihood(self, rng):
        policy = small_policy(rng)
        states = rng.normal(size=(4, 2))
        cands = sample_candidates(policy, states, 3, rng)
        u = policy.presquash(cands)
        weights = np.zeros((4, 3))
        weights[:, 1] = 1.0
        head = policy_head(policy, states)
        loss, _, _ = mstep_loss_and_grads(
            policy, states, u, weights, head.mean, head.scale, penalty=0.0
        )
        z = (u[:, 1, :] - head.mean) / head.scale
        nll = float(
            np.mean((0.5 * z * z + np.log(head.scale)).sum(axis=1))
        ) + 0.5 * policy.action_dim * np.log(2 * np.pi)
        assert loss == pytest.approx(nll, abs=1e-12)

    def test_zero_steps_leaves_kl_zero(self, rng):
        policy = small_policy(rng)
        states = rng.normal(size=(5, 2))
        cands = sample_candidates(policy, states, 4, rng)
        weights = np.full((5, 4), 0.25)
        cfg = MpoConfig(mstep_steps=0)
        old = GaussianPolicy(clone(policy.net), 1, policy.scale_floor, policy.bounds)
        diag, _ = mstep_update(
            policy, old, states, cands, weights, cfg, Adam(1e-3), cfg.kl_penalty_init
        )
        assert diag["mstep_kl"] == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_array_equal(flatten(policy.net), flatten(old.net))

    def test_loss_gradient_matches_finite_differences(self, rng):
        policy = small_policy(rng)
        states = rng.normal(size=(3, 2))
        cands = sample_candidates(policy, states, 4, rng)
        u = policy.presquash(cands)
        w = rng.random((3, 4))
        w /= w.sum(axis=1, keepdims=True)
        old = policy_head(policy, states)
        old_mean, old_scale = old.mean.copy(), old.scale.copy()

        def loss():
            value, _, _ = mstep_loss_and_grads(
                policy, states, u, w, old_mean, old_scale, penalty=0.8
            )
            return value

        _, grads, _ = mstep_loss_and_grads(
            policy, states, u, w, old_mean, old_scale, penalty=0.8
        )
        numeric = finite_diff(loss, policy.net)
        np.testing.assert_allclose(flat_grads(grads), numeric, rtol=1e-5, atol=1e-8)

    def test_one_step_objective_change_matches_linearization(self, rng):
        policy = small_policy(rng)
        states = rng.normal(size=(3, 2))
        cands = sample_candidates(policy, states, 4, rng)
        u = policy.presquash(cands)
        w = np.full((3, 4), 0.25)
        old = policy_head(policy, states)

        loss0, grads, _ = mstep_loss_and_grads(
            policy, states, u, w, old.mean, old.scale, penalty=0.5
        )
        g = flat_grads(grads)
        step = 1e-6
        from cdmpo.nets import set_flat

        set_flat(policy.net, flatten(policy.net) - step * g)
        loss1, _, _ = mstep_loss_and_grads(
            policy, states, u, w, old.mean, old.scale, penalty=0.5
        )
        predicted = -step * float(g @ g)
        assert (loss1 - loss0) == pytest.approx(predicted, rel=1e-4)

    def test_kl_overshoot_aborts_and_restores(self, rng):
        policy = small_policy(rng)
        states = rng.normal(size=(4, 2))
        cands = sample_candidates(policy, states, 3, rng)
        weights = np.full((4, 3), 1.0 / 3.0)
        cfg = MpoConfig(epsilon_m=1e-9, mstep_steps=5)
        old = GaussianPolicy(clone(policy.net), 1, policy.scale_floor, policy.bounds)
        before = flatten(policy.net).copy()
        diag, _ = mstep_update(
            policy, old, states, cands, weights, cfg, Adam(0.5), cfg.kl_penalty_init
        )
        assert diag["mstep_aborted"] == 1.0
        np.testing.assert_array_equal(flatten(policy.net), before)

    def test_penalty_adapts_both_ways(self, rng):
        policy = small_policy(rng)
        states = rng.normal(size=(4, 2))
        cands = sample_candidates(policy, states, 3, rng)
        weights = np.full((4, 3), 1.0 / 3.0)
        old = GaussianPolicy(clone(policy.net), 1, policy.scale_floor, policy.bounds)
        # tiny lr: KL stays below budget, penalty decays
        _, penalty = mstep_update(
            policy, old, states, cands, weights, MpoConfig(), Adam(1e-9), 1.0
        )
        assert penalty < 1.0
        # big lr with a loose abort bound: KL overshoots, penalty rises
        cfg = MpoConfig(epsilon_m=1e-6, mstep_steps=3)
        _, penalty = mstep_update(
            policy, old, states, cands, weights, cfg, Adam(0.05), 1.0
        )
        assert penalty > 1.0


def test_mpo_config_validation():
    with pytest.raises(ValueError):
        MpoConfig(epsilon_e=0.0)
    with pytest.raises(ValueError):
        MpoConfig(eta_bounds=(0.0, 1.0))
    with pytest.raises(ValueError):
        MpoConfig(eta_bounds=(2.0, 1.0))

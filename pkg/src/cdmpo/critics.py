"""Distributional and scalar state-action critics with their TD losses.

A distributional critic maps (state, action) to logits over a fixed atom
grid; its point estimate is the expectation of the softmax distribution.
The cost critic is additionally trained with a conservative regularizer that
pushes predicted cost down on actions that were actually executed (the
replay buffer holds only those) and up on fresh samples from the current
policy. Gradients of the regularizer flow only into the critic parameters,
never into the policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distribution import (
    AtomGrid,
    CategoricalDistribution,
    log_softmax,
    project_batch,
)
from .nets import Mlp, add_grads, clone, target_sync

__all__ = ["DistributionalCritic", "ScalarCritic", "CdclConfig", "td_loss", "cdcl_loss"]


@dataclass
class CdclConfig:
    """Weight and sample count for the conservative cost regularizer."""

    beta: float = 1.0
    n_policy_samples: int = 8

    def __post_init__(self) -> None:
        if self.beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.n_policy_samples < 1:
            raise ValueError("n_policy_samples must be positive")


@dataclass
class DistributionalCritic:
    """Categorical value head over a fixed grid, with a target copy."""

    net: Mlp
    target_net: Mlp
    grid: AtomGrid

    def __post_init__(self) -> None:
        for wo, wt in zip(self.net.weights, self.target_net.weights):
            if wo.shape != wt.shape:
                raise ValueError("online and target nets must have identical shapes")
        if self.net.out_dim != self.grid.n_atoms:
            raise ValueError(
                f"net output width {self.net.out_dim} must equal the grid's "
                f"{self.grid.n_atoms} atoms"
            )

    @classmethod
    def create(
        cls,
        obs_dim: int,
        action_dim: int,
        hidden: tuple[int, ...],
        activation: str,
        grid: AtomGrid,
        rng: np.random.Generator,
    ) -> "DistributionalCritic":
        net = Mlp.create((obs_dim + action_dim, *hidden, grid.n_atoms), activation, rng)
        return cls(net, clone(net), grid)

    def _net(self, use_target: bool) -> Mlp:
        return self.target_net if use_target else self.net

    def logits(self, states: np.ndarray, actions: np.ndarray, use_target: bool = False):
        x = np.concatenate(
            [np.atleast_2d(states), np.atleast_2d(actions)], axis=1
        )
        return self._net(use_target).forward(x)

    def probs(
        self, states: np.ndarray, actions: np.ndarray, use_target: bool = False
    ) -> np.ndarray:
        logits, _ = self.logits(states, actions, use_target)
        return np.exp(log_softmax(logits))

    def predict(
        self, state: np.ndarray, action: np.ndarray, use_target: bool = False
    ) -> CategoricalDistribution:
        """Predicted value distribution at one (state, action) pair."""
        probs = self.probs(state[None, :], action[None, :], use_target)[0]
        return CategoricalDistribution(self.grid, probs)

    def expected(
        self, states: np.ndarray, actions: np.ndarray, use_target: bool = False
    ) -> np.ndarray:
        """Expectation of the predicted distribution, one scalar per row."""
        return self.probs(states, actions, use_target) @ self.grid.atoms

    def sync_target(self, tau: float) -> None:
        target_sync(self.net, self.target_net, tau)


@dataclass
class ScalarCritic:
    """Plain scalar value head used by the non-distributional ablation."""

    net: Mlp
    target_net: Mlp

    @classmethod
    def create(
        cls,
        obs_dim: int,
        action_dim: int,
        hidden: tuple[int, ...],
        activation: str,
        rng: np.random.Generator,
    ) -> "ScalarCritic":
        net = Mlp.create((obs_dim + action_dim, *hidden, 1), activation, rng)
        return cls(net, clone(net))

    def _forward(self, states: np.ndarray, actions: np.ndarray, use_target: bool):
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        net = self.target_net if use_target else self.net
        return net.forward(x)

    def expected(
        self, states: np.ndarray, actions: np.ndarray, use_target: bool = False
    ) -> np.ndarray:
        out, _ = self._forward(states, actions, use_target)
        return out[:, 0]

    def sync_target(self, tau: float) -> None:
        target_sync(self.net, self.target_net, tau)


def _projected_targets(
    critic: DistributionalCritic,
    signal: np.ndarray,
    gamma: float,
    next_states: np.ndarray,
    next_actions: np.ndarray,
    dones: np.ndarray,
) -> np.ndarray:
    """Target distributions: shift the target net's atoms by one backup and
    project back onto the grid. Terminal transitions collapse to a point mass
    at the raw signal (gamma treated as 0)."""
    next_probs = critic.probs(next_states, next_actions, use_target=True)
    cont = gamma * (1.0 - dones.astype(np.float64))
    locations = signal[:, None] + cont[:, None] * critic.grid.atoms[None, :]
    return project_batch(critic.grid, locations, next_probs)


def td_loss(
    critic: DistributionalCritic,
    states: np.ndarray,
    actions: np.ndarray,
    signal: np.ndarray,
    next_states: np.ndarray,
    next_actions: np.ndarray,
    dones: np.ndarray,
    gamma: float,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean cross-entropy between projected Bellman targets and online logits.

    ``signal`` is the per-transition reward or cost, depending on which
    critic is being trained. Returns the loss and parameter gradients.
    """
    target_probs = _projected_targets(
        critic, signal, gamma, next_states, next_actions, dones
    )
    logits, tape = critic.logits(states, actions)
    ls = log_softmax(logits)
    batch = states.shape[0]
    loss = -float((target_probs * ls).sum()) / batch
    d_logits = (np.exp(ls) - target_probs) / batch
    return loss, critic.net.backward(tape, d_logits)


def _expectation_grads(
    critic: DistributionalCritic,
    states: np.ndarray,
    actions: np.ndarray,
    coeff: float,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Sum of predicted expectations and gradients of ``coeff * sum``."""
    logits, tape = critic.logits(states, actions)
    p = np.exp(log_softmax(logits))
    values = p @ critic.grid.atoms
    # d E / d logit_j = p_j * (z_j - E)
    d_logits = coeff * p * (critic.grid.atoms[None, :] - values[:, None])
    return float(values.sum()), critic.net.backward(tape, d_logits)


def cdcl_loss(
    critic: DistributionalCritic,
    states: np.ndarray,
    actions: np.ndarray,
    costs: np.ndarray,
    next_states: np.ndarray,
    next_actions: np.ndarray,
    dones: np.ndarray,
    policy_actions: np.ndarray,
    cfg: CdclConfig,
    gamma: float,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]], dict[str, float]]:
    """Conservative cost-critic loss: regularizer plus distributional TD.

    The regularizer is ``beta * (mean E[C(s, a_buffer)] - mean E[C(s,
    a_policy)])`` where ``policy_actions`` holds ``n_policy_samples`` fresh
    draws per state, shaped (B, K, da). With ``beta = 0`` this is exactly the
    TD loss.
    """
    base_loss, grads = td_loss(
        critic, states, actions, costs, next_states, next_actions, dones, gamma
    )
    parts = {"td": base_loss, "regularizer": 0.0}
    if cfg.beta > 0.0:
        batch, k, da = policy_actions.shape
        buf_sum, buf_grads = _expectation_grads(
            critic, states, actions, cfg.beta / batch
        )
        tiled_states = np.repeat(states, k, axis=0)
        flat_actions = policy_actions.reshape(batch * k, da)
        pol_sum, pol_grads = _expectation_grads(
            critic, tiled_states, flat_actions, -cfg.beta / (batch * k)
        )
        reg = cfg.beta * (buf_sum / batch - pol_sum / (batch * k))
        parts["regularizer"] = reg
        grads = add_grads(add_grads(grads, buf_grads), pol_grads)
        base_loss += reg
    return base_loss, grads, parts


def scalar_td_loss(
    critic: ScalarCritic,
    states: np.ndarray,
    actions: np.ndarray,
    signal: np.ndarray,
    next_states: np.ndarray,
    next_actions: np.ndarray,
    dones: np.ndarray,
    gamma: float,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Squared-error TD loss for the scalar-critic ablation."""
    next_q = critic.expected(next_states, next_actions, use_target=True)
    targets = signal + gamma * (1.0 - dones.astype(np.float64)) * next_q
    out, tape = critic._forward(states, actions, use_target=False)
    resid = out[:, 0] - targets
    batch = states.shape[0]
    loss = float(resid @ resid) / batch
    d_out = (2.0 * resid / batch)[:, None]
    return loss, critic.net.backward(tape, d_out)

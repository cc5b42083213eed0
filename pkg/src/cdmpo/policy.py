"""Parametric Gaussian policy and conservative action selection.

The policy net maps a state to a mean vector and a pre-scale vector; the
per-dimension scale is ``softplus(pre_scale) + scale_floor``. When the
environment has a bounded action box, samples are squashed into it through a
tanh map with the standard log-density correction. Exploration draws a
candidate set of ``n`` actions and executes the one whose predicted long-term
cost expectation is smallest (ties broken by lowest index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import Mlp, Tape

__all__ = [
    "GaussianPolicy",
    "PolicyHead",
    "sample_action_set",
    "sample_candidates",
    "conservative_select",
    "log_prob",
    "log_prob_grads",
    "kl_gaussian",
    "softplus",
    "sigmoid",
]

_ATANH_CLIP = 1.0 - 1e-12


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian policy head.

    ``net`` maps a state to ``2 * action_dim`` outputs (raw mean, pre-scale).
    The mean is soft-clamped to ``(-mean_bound, mean_bound)`` through a tanh,
    which keeps pre-squash samples away from the arctanh singularity however
    far the raw head drifts. ``bounds`` is the environment's action box as
    (low, high) arrays, or None for an unsquashed policy.
    """

    net: Mlp
    action_dim: int
    scale_floor: float = 0.01
    bounds: tuple[np.ndarray, np.ndarray] | None = None
    mean_bound: float = 5.0

    def __post_init__(self) -> None:
        if self.net.out_dim != 2 * self.action_dim:
            raise ValueError(
                f"policy net output width {self.net.out_dim} must be "
                f"2 * action_dim = {2 * self.action_dim}"
            )
        if self.bounds is not None:
            low, high = (np.asarray(b, dtype=np.float64) for b in self.bounds)
            if low.shape != (self.action_dim,) or high.shape != (self.action_dim,):
                raise ValueError("bounds must be (low, high) vectors of action_dim")
            if np.any(high <= low):
                raise ValueError("action box must have high > low")
            self.bounds = (low, high)

    # Squash geometry. The box map is a = center + half * tanh(u); it is a
    # fixed bijection, so log-densities pick up a parameter-free correction.
    def _center_half(self) -> tuple[np.ndarray, np.ndarray]:
        low, high = self.bounds  # type: ignore[misc]
        return (low + high) / 2.0, (high - low) / 2.0

    def squash(self, u: np.ndarray) -> np.ndarray:
        if self.bounds is None:
            return u
        center, half = self._center_half()
        return center + half * np.tanh(u)

    def presquash(self, action: np.ndarray) -> np.ndarray:
        if self.bounds is None:
            return np.asarray(action, dtype=np.float64)
        center, half = self._center_half()
        v = np.clip((action - center) / half, -_ATANH_CLIP, _ATANH_CLIP)
        return np.arctanh(v)


@dataclass
class PolicyHead:
    """Mean/scale head evaluated at a batch of states, with its tape."""

    mean: np.ndarray
    scale: np.ndarray
    pre_scale: np.ndarray
    tape: Tape


def policy_head(policy: GaussianPolicy, states: np.ndarray) -> PolicyHead:
    """Evaluate mean and scale at ``states`` (a vector or a (B, ds) batch)."""
    out, tape = policy.net.forward(states)
    out2 = np.atleast_2d(out)
    d = policy.action_dim
    mean = policy.mean_bound * np.tanh(out2[:, :d] / policy.mean_bound)
    pre_scale = out2[:, d:]
    scale = softplus(pre_scale) + policy.scale_floor
    return PolicyHead(mean, scale, pre_scale, tape)


def head_backward(
    policy: GaussianPolicy,
    head: PolicyHead,
    d_mean: np.ndarray,
    d_scale: np.ndarray,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Backpropagate gradients w.r.t. mean and scale into the policy net."""
    d_raw = d_mean * (1.0 - (head.mean / policy.mean_bound) ** 2)
    d_pre = d_scale * sigmoid(head.pre_scale)
    out_grad = np.concatenate([d_raw, d_pre], axis=1)
    if head.tape.squeezed:
        out_grad = out_grad[0]
    return policy.net.backward(head.tape, out_grad)


def sample_action_set(
    policy: GaussianPolicy, state: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``n`` independent actions from the policy at one state."""
    if n < 1:
        raise ValueError(f"need at least one candidate, got n={n}")
    head = policy_head(policy, state)
    u = head.mean[0] + head.scale[0] * rng.standard_normal((n, policy.action_dim))
    return policy.squash(u)


def sample_candidates(
    policy: GaussianPolicy, states: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``n`` actions per state for a (B, ds) batch; returns (B, n, da)."""
    if n < 1:
        raise ValueError(f"need at least one candidate, got n={n}")
    head = policy_head(policy, states)
    noise = rng.standard_normal((head.mean.shape[0], n, policy.action_dim))
    u = head.mean[:, None, :] + head.scale[:, None, :] * noise
    return policy.squash(u)


def conservative_select(
    c_critic, state: np.ndarray, candidates: np.ndarray
) -> tuple[np.ndarray, int]:
    """Pick the candidate with the smallest predicted cost expectation.

    ``c_critic`` must expose ``expected(states, actions)`` returning one cost
    expectation per row. Ties break toward the lowest index.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if candidates.shape[0] == 0:
        raise ValueError("candidate set must be non-empty")
    states = np.broadcast_to(state, (candidates.shape[0], len(state)))
    values = np.asarray(c_critic.expected(states, candidates))
    index = int(np.argmin(values))
    return candidates[index], index


def log_prob(policy: GaussianPolicy, state: np.ndarray, action: np.ndarray) -> float:
    """Log-density of ``action`` under the (possibly squashed) policy."""
    head = policy_head(policy, state)
    mean, scale = head.mean[0], head.scale[0]
    u = policy.presquash(np.asarray(action, dtype=np.float64))
    z = (u - mean) / scale
    logp = -0.5 * float(z @ z) - float(np.log(scale).sum())
    logp -= 0.5 * policy.action_dim * np.log(2.0 * np.pi)
    if policy.bounds is not None:
        center, half = policy._center_half()
        v = np.clip((action - center) / half, -_ATANH_CLIP, _ATANH_CLIP)
        logp -= float(np.sum(np.log(half) + np.log1p(-v * v)))
    return logp


def log_prob_grads(
    policy: GaussianPolicy, state: np.ndarray, action: np.ndarray
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Log-density and its gradients w.r.t. the policy net parameters.

    The squash correction does not depend on the parameters, so gradients
    flow only through the Gaussian term.
    """
    head = policy_head(policy, state)
    mean, scale = head.mean, head.scale
    u = policy.presquash(np.asarray(action, dtype=np.float64))[None, :]
    z = (u - mean) / scale
    d_mean = z / scale
    d_scale = (z * z - 1.0) / scale
    grads = head_backward(policy, head, d_mean, d_scale)
    logp = log_prob(policy, state, action)
    return logp, grads


def kl_gaussian(
    mean_p: np.ndarray,
    scale_p: np.ndarray,
    mean_q: np.ndarray,
    scale_q: np.ndarray,
) -> np.ndarray:
    """Closed-form KL(p || q) between diagonal Gaussians, summed over the
    last axis. Accepts batches; returns a scalar per batch row."""
    var_ratio = (scale_p / scale_q) ** 2
    mahal = ((mean_p - mean_q) / scale_q) ** 2
    per_dim = np.log(scale_q / scale_p) + 0.5 * (var_ratio + mahal - 1.0)
    return per_dim.sum(axis=-1)

"""Constrained policy improvement: E-step weighting and M-step fitting.

The E-step turns per-candidate value estimates into a non-parametric
improved action distribution: weights proportional to
``exp((Q - lambda * (C - d)) / eta)``, normalized within each state. The
temperature ``eta`` comes from minimizing a convex dual with a fixed KL
budget. The M-step then fits the parametric Gaussian policy to those
weighted samples by gradient ascent on the weighted log-likelihood, with an
adaptive penalty holding the mean KL to the previous policy near its budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .nets import Adam, set_flat, flatten
from .policy import GaussianPolicy, head_backward, kl_gaussian, policy_head

__all__ = [
    "MpoConfig",
    "estep_weights",
    "dual_value",
    "minimize_dual",
    "mstep_loss_and_grads",
    "mstep_update",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_PENALTY_MIN = 1e-4
_PENALTY_MAX = 1e8


@dataclass
class MpoConfig:
    """Budgets and search bounds for the E- and M-steps."""

    epsilon_e: float = 0.1
    epsilon_m: float = 0.01
    kl_penalty_init: float = 1.0
    max_dual_iters: int = 80
    eta_bounds: tuple[float, float] = (1e-3, 1e3)
    n_candidates: int = 20
    mstep_steps: int = 1

    def __post_init__(self) -> None:
        if self.epsilon_e <= 0.0 or self.epsilon_m <= 0.0:
            raise ValueError("KL budgets must be positive")
        lo, hi = self.eta_bounds
        if not (0.0 < lo < hi):
            raise ValueError(f"invalid eta bounds ({lo}, {hi})")


def _scores(
    q_values: np.ndarray, c_values: np.ndarray, lam: float, d: float
) -> np.ndarray:
    return np.asarray(q_values, dtype=np.float64) - lam * (
        np.asarray(c_values, dtype=np.float64) - d
    )


def estep_weights(
    q_values: np.ndarray,
    c_values: np.ndarray,
    lam: float,
    d: float,
    eta: float,
) -> np.ndarray:
    """Per-state softmax of ``(Q - lambda * (C - d)) / eta`` over candidates.

    ``q_values`` and ``c_values`` are (M, K): M states, K candidates each.
    """
    if eta <= 0.0:
        raise ValueError(f"eta must be positive, got {eta}")
    s = _scores(q_values, c_values, lam, d) / eta
    s = s - s.max(axis=1, keepdims=True)
    w = np.exp(s)
    return w / w.sum(axis=1, keepdims=True)


def dual_value(
    eta: float,
    q_values: np.ndarray,
    c_values: np.ndarray,
    lam: float,
    d: float,
    epsilon_e: float,
) -> float:
    """Sampled dual ``g(eta)``: temperature times the mean log of the mean
    exponentiated advantage, plus ``eta * epsilon_e``. Stable via max-shifted
    log-sum-exp."""
    if eta <= 0.0:
        raise ValueError(f"eta must be positive, got {eta}")
    s = _scores(q_values, c_values, lam, d) / eta
    m = s.max(axis=1, keepdims=True)
    log_mean = m[:, 0] + np.log(np.exp(s - m).mean(axis=1))
    return float(eta * log_mean.mean() + eta * epsilon_e)


def minimize_dual(
    q_values: np.ndarray,
    c_values: np.ndarray,
    lam: float,
    d: float,
    epsilon_e: float,
    bounds: tuple[float, float],
    max_iters: int = 80,
) -> float:
    """Golden-section search for the dual minimizer on a log-eta bracket.

    ``g`` is convex in eta, hence unimodal in log eta, so the section search
    converges to the global minimizer; monotone cases collapse to a bound.
    """

    def g(t: float) -> float:
        value = dual_value(math.exp(t), q_values, c_values, lam, d, epsilon_e)
        if not math.isfinite(value):
            raise NumericalError(f"dual value not finite at eta={math.exp(t)}")
        return value

    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = g(x1), g(x2)
    best_t, best_f = (x1, f1) if f1 <= f2 else (x2, f2)
    for _ in range(max_iters):
        if b - a <= 1e-8:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = g(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = g(x2)
        if f1 < best_f:
            best_t, best_f = x1, f1
        if f2 < best_f:
            best_t, best_f = x2, f2
    # the bracket may have collapsed onto a boundary minimum
    for t, f in ((lo, g(lo)), (hi, g(hi))):
        if f < best_f:
            best_t, best_f = t, f
    return math.exp(best_t)


def mstep_loss_and_grads(
    policy: GaussianPolicy,
    states: np.ndarray,
    u_candidates: np.ndarray,
    weights: np.ndarray,
    old_mean: np.ndarray,
    old_scale: np.ndarray,
    penalty: float,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]], float]:
    """Weighted negative log-likelihood plus a KL penalty, with gradients.

    ``u_candidates`` holds pre-squash actions, shape (M, K, da); ``weights``
    is (M, K) and normalized per state. Returns (loss, parameter gradients,
    mean KL(old || new)).
    """
    m_states = states.shape[0]
    head = policy_head(policy, states)
    mean, scale = head.mean, head.scale
    z = (u_candidates - mean[:, None, :]) / scale[:, None, :]

    w = weights[:, :, None]
    nll = float(
        (w * (0.5 * z * z + np.log(scale)[:, None, :])).sum()
    ) / m_states + 0.5 * policy.action_dim * math.log(2.0 * math.pi)

    d_mean = -(weights[:, :, None] * z / scale[:, None, :]).sum(axis=1) / m_states
    d_scale = (
        (weights[:, :, None] * (1.0 - z * z) / scale[:, None, :]).sum(axis=1)
        / m_states
    )

    kl_rows = kl_gaussian(old_mean, old_scale, mean, scale)
    kl = float(kl_rows.mean())
    loss = nll + penalty * kl

    d_mean += penalty * (mean - old_mean) / (scale * scale) / m_states
    d_scale += (
        penalty
        * (1.0 / scale - (old_scale**2 + (old_mean - mean) ** 2) / scale**3)
        / m_states
    )
    grads = head_backward(policy, head, d_mean, d_scale)
    return loss, grads, kl


def mstep_update(
    policy: GaussianPolicy,
    old_policy: GaussianPolicy,
    states: np.ndarray,
    candidates: np.ndarray,
    weights: np.ndarray,
    cfg: MpoConfig,
    optimizer: Adam,
    kl_penalty: float,
) -> tuple[dict[str, float], float]:
    """Fit the policy to the weighted candidates under a KL trust region.

    Runs ``cfg.mstep_steps`` gradient steps. If the resulting mean KL to the
    snapshot exceeds ten times the budget, the step is aborted and the old
    parameters restored. The penalty multiplier adapts up when KL overshoots
    the budget and down otherwise.
    """
    old_head = policy_head(old_policy, states)
    backup = flatten(policy.net)
    u = policy.presquash(candidates)

    loss = 0.0
    kl = 0.0
    for _ in range(cfg.mstep_steps):
        loss, grads, kl = mstep_loss_and_grads(
            policy, states, u, weights, old_head.mean, old_head.scale, kl_penalty
        )
        optimizer.step(policy.net, grads)

    new_head = policy_head(policy, states)
    kl = float(kl_gaussian(old_head.mean, old_head.scale, new_head.mean, new_head.scale).mean())

    aborted = False
    if kl > 10.0 * cfg.epsilon_m:
        set_flat(policy.net, backup)
        aborted = True

    if kl > cfg.epsilon_m:
        kl_penalty = min(kl_penalty * 1.5, _PENALTY_MAX)
    else:
        kl_penalty = max(kl_penalty / 1.5, _PENALTY_MIN)

    diagnostics = {
        "mstep_loss": loss,
        "mstep_kl": kl,
        "mstep_aborted": float(aborted),
        "kl_penalty": kl_penalty,
    }
    return diagnostics, kl_penalty

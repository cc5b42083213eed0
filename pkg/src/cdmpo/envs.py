"""Desk-scale constrained-MDP environments.

Two tasks live here. ``ChainCmdpSpec`` is a small tabular CMDP with exact
policy-evaluation oracles, used for correctness tests and the constrained
training acceptance run; ``ChainEnv`` wraps it with a one-hot observation
and a continuous action in [-1, 1] binned uniformly onto the discrete
actions, so the same Gaussian-policy trainer drives it. ``HazardWorld`` is a
continuous 2D navigation task: a velocity-controlled point robot, a
relocating goal paying a dense progress reward plus a sparse bonus, and
hazard discs that charge a unit cost per step of contact, all sensed through
coarse lidar histograms.

Environment instances are single-owner; run several instances with
independent seeds for parallel rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "Transition",
    "ChainCmdpSpec",
    "chain_reset",
    "chain_step",
    "chain_oracle",
    "policy_start_values",
    "search_deterministic_policies",
    "bridge_chain_spec",
    "ChainEnv",
    "HazardWorldConfig",
    "HazardWorld",
    "lidar_profile",
]


@dataclass
class Transition:
    """One environment step: (s, a, r, c, s', done)."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    cost: float
    next_state: np.ndarray
    done: bool


# --- tabular chain CMDP -------------------------------------------------------


@dataclass
class ChainCmdpSpec:
    """Tabular CMDP: transition, reward, and cost tables plus horizon."""

    transitions: np.ndarray  # (S, A, S), rows sum to 1
    rewards: np.ndarray  # (S, A)
    costs: np.ndarray  # (S, A)
    gamma: float
    horizon: int
    start_state: int = 0

    def __post_init__(self) -> None:
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.costs = np.asarray(self.costs, dtype=np.float64)
        s, a, s2 = self.transitions.shape
        if s != s2:
            raise ConfigError("transition table must be (S, A, S)")
        if self.rewards.shape != (s, a) or self.costs.shape != (s, a):
            raise ConfigError("reward/cost tables must be (S, A)")
        row_sums = self.transitions.sum(axis=2)
        if np.any(np.abs(row_sums - 1.0) > 1e-12):
            raise ConfigError("every transition row must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


def chain_reset(spec: ChainCmdpSpec) -> int:
    return spec.start_state


def chain_step(
    spec: ChainCmdpSpec, state: int, action: int, rng: np.random.Generator
) -> tuple[int, float, float]:
    """Sample a successor and read reward/cost from the tables."""
    row = spec.transitions[state, action]
    next_state = int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
    next_state = min(next_state, spec.n_states - 1)
    return next_state, float(spec.rewards[state, action]), float(spec.costs[state, action])


def chain_oracle(
    spec: ChainCmdpSpec, policy: np.ndarray, tol: float = 1e-12
) -> tuple[np.ndarray, np.ndarray]:
    """Exact policy evaluation of the reward and cost Bellman equations.

    ``policy`` is an (S, A) row-stochastic action distribution. Iterates both
    fixed points to ``tol`` in sup norm; returns (Q, C) tables of shape (S, A).
    """
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (spec.n_states, spec.n_actions):
        raise ValueError("policy table has the wrong shape")
    if np.any(np.abs(policy.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("policy rows must sum to 1")

    q = np.zeros((spec.n_states, spec.n_actions))
    c = np.zeros_like(q)
    # cap safely past the contraction bound for tol
    max_iters = 100 + int(np.ceil(np.log(max(tol, 1e-300)) / np.log(max(spec.gamma, 1e-12))))
    for _ in range(max_iters):
        vq = (policy * q).sum(axis=1)
        vc = (policy * c).sum(axis=1)
        q_new = spec.rewards + spec.gamma * spec.transitions @ vq
        c_new = spec.costs + spec.gamma * spec.transitions @ vc
        diff = max(np.abs(q_new - q).max(), np.abs(c_new - c).max())
        q, c = q_new, c_new
        if diff <= tol:
            break
    return q, c


def policy_start_values(
    spec: ChainCmdpSpec, policy: np.ndarray
) -> tuple[float, float]:
    """Expected discounted return and cost from the start state."""
    q, c = chain_oracle(spec, policy)
    pi0 = policy[spec.start_state]
    return float(pi0 @ q[spec.start_state]), float(pi0 @ c[spec.start_state])


def search_deterministic_policies(spec: ChainCmdpSpec, d: float) -> dict:
    """Exhaustive search over all deterministic stationary policies.

    Returns the unconstrained best (by return) and the best among policies
    whose expected discounted cost from the start state is at most ``d``.
    """
    s, a = spec.n_states, spec.n_actions
    best = {"return": -np.inf, "cost": None, "policy": None}
    best_feasible = {"return": -np.inf, "cost": None, "policy": None}
    assignment = np.zeros(s, dtype=np.int64)
    total = a**s
    for idx in range(total):
        x = idx
        for i in range(s):
            assignment[i] = x % a
            x //= a
        table = np.zeros((s, a))
        table[np.arange(s), assignment] = 1.0
        ret, cost = policy_start_values(spec, table)
        if ret > best["return"]:
            best = {"return": ret, "cost": cost, "policy": assignment.copy()}
        if cost <= d and ret > best_feasible["return"]:
            best_feasible = {"return": ret, "cost": cost, "policy": assignment.copy()}
    return {"unconstrained": best, "constrained": best_feasible}


def bridge_chain_spec(gamma: float = 0.9, horizon: int = 100) -> ChainCmdpSpec:
    """Eight-state bridge-or-detour chain.

    State 0 forks: action 1 crosses a two-step bridge (states 1, 2; unit
    cost each) to the pay state 7; action 0 takes a three-step costless
    detour (3, 4, 5). At state 7 action 1 stays and pays reward 1 per step;
    action 0 slips to the rest stop 6, one step off the pay state. Action 0
    elsewhere retreats toward the start. The reward-optimal policy crosses
    the bridge and violates any cost budget below its discounted bridge
    cost of gamma + gamma^2.
    """
    s, a = 8, 2
    forward = {0: 1, 1: 2, 2: 7, 3: 4, 4: 5, 5: 7, 6: 7, 7: 7}
    backward = {0: 3, 1: 0, 2: 1, 3: 0, 4: 3, 5: 4, 6: 0, 7: 6}
    transitions = np.zeros((s, a, s))
    for state in range(s):
        transitions[state, 1, forward[state]] = 1.0
        transitions[state, 0, backward[state]] = 1.0
    rewards = np.zeros((s, a))
    rewards[7, 1] = 1.0
    costs = np.zeros((s, a))
    costs[1, :] = 1.0
    costs[2, :] = 1.0
    return ChainCmdpSpec(transitions, rewards, costs, gamma, horizon)


class ChainEnv:
    """Continuous-interface view of a tabular chain CMDP.

    Observations are one-hot state indicators; the single continuous action
    in [-1, 1] is binned uniformly onto the discrete actions.
    """

    def __init__(self, spec: ChainCmdpSpec, seed: int = 0):
        self.spec = spec
        self.obs_dim = spec.n_states
        self.action_dim = 1
        self.action_low = np.array([-1.0])
        self.action_high = np.array([1.0])
        self.max_steps = spec.horizon
        self.r_max = float(spec.rewards.max())
        self._rng = np.random.default_rng(seed)
        self._state = spec.start_state
        self._steps = 0

    def _obs(self) -> np.ndarray:
        one_hot = np.zeros(self.obs_dim)
        one_hot[self._state] = 1.0
        return one_hot

    def action_index(self, action: np.ndarray) -> int:
        a = float(np.clip(action[0], -1.0, 1.0))
        idx = int((a + 1.0) / 2.0 * self.spec.n_actions)
        return min(idx, self.spec.n_actions - 1)

    def reset(self) -> np.ndarray:
        self._state = chain_reset(self.spec)
        self._steps = 0
        return self._obs()

    def step(self, action: np.ndarray) -> Transition:
        obs = self._obs()
        idx = self.action_index(action)
        next_state, reward, cost = chain_step(self.spec, self._state, idx, self._rng)
        self._state = next_state
        self._steps += 1
        done = self._steps >= self.spec.horizon
        return Transition(
            obs,
            np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0),
            reward,
            cost,
            self._obs(),
            done,
        )


# --- continuous hazard navigation ---------------------------------------------


@dataclass
class HazardWorldConfig:
    half_width: float = 2.0
    n_hazards: int = 6
    hazard_radius: float = 0.25
    goal_radius: float = 0.3
    lidar_bins: int = 16
    max_steps: int = 400
    dt: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.half_width, self.hazard_radius, self.goal_radius, self.dt) <= 0.0:
            raise ConfigError("radii, dt, and half_width must be positive")
        if max(self.hazard_radius, self.goal_radius) >= self.half_width:
            raise ConfigError("radii must be smaller than the arena half-width")
        if self.lidar_bins < 4:
            raise ConfigError(f"need at least 4 lidar bins, got {self.lidar_bins}")
        if self.n_hazards < 0:
            raise ConfigError("n_hazards must be non-negative")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")


def lidar_profile(points: np.ndarray, bins: int, max_range: float) -> np.ndarray:
    """Angular histogram of proximity readings.

    ``points`` holds object positions relative to the robot, shape (M, 2).
    Bin k is centered on angle ``k * 2 pi / bins``; each object contributes
    ``max(0, 1 - distance / max_range)`` and bins keep the maximum over
    their objects. Rotating the scene by a whole bin angle rolls the output.
    """
    out = np.zeros(bins)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.size == 0:
        return out
    dist = np.hypot(points[:, 0], points[:, 1])
    theta = np.arctan2(points[:, 1], points[:, 0])
    width = 2.0 * np.pi / bins
    idx = np.floor(((theta + width / 2.0) % (2.0 * np.pi)) / width).astype(int) % bins
    signal = np.maximum(0.0, 1.0 - dist / max_range)
    np.maximum.at(out, idx, signal)
    return out


class HazardWorld:
    """Velocity-controlled point robot among hazard discs.

    The action is a commanded velocity in [-1, 1]^2, integrated with step
    size ``dt``. Reward is the decrease in distance to the goal plus a unit
    bonus on reaching it, at which point the goal relocates and the episode
    continues; only running out of steps ends an episode. Each step spent
    inside any hazard disc costs 1.
    """

    GOAL_BONUS = 1.0
    SPAWN_HALF_WIDTH = 0.2
    PLACEMENT_RETRIES = 1000

    def __init__(self, cfg: HazardWorldConfig, seed: int | None = None):
        self.cfg = cfg
        self.obs_dim = 2 + 2 * cfg.lidar_bins
        self.action_dim = 2
        self.action_low = np.array([-1.0, -1.0])
        self.action_high = np.array([1.0, 1.0])
        self.max_steps = cfg.max_steps
        # dense reward per step is bounded by the step length; the sparse
        # bonus dominates the per-step maximum
        self.r_max = self.GOAL_BONUS + cfg.dt * np.sqrt(2.0)
        self._rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self._max_range = 2.0 * np.sqrt(2.0) * cfg.half_width
        self._pos = np.zeros(2)
        self._vel = np.zeros(2)
        self._goal = np.zeros(2)
        self._hazards = np.zeros((cfg.n_hazards, 2))
        self._steps = 0
        self._goal_dist = 0.0

    # placement ------------------------------------------------------------

    def _uniform_point(self, margin: float) -> np.ndarray:
        hw = self.cfg.half_width - margin
        return self._rng.uniform(-hw, hw, size=2)

    def _place_goal(self) -> np.ndarray:
        cfg = self.cfg
        for _ in range(self.PLACEMENT_RETRIES):
            goal = self._uniform_point(cfg.goal_radius)
            if np.linalg.norm(goal - self._pos) <= cfg.goal_radius + 0.1:
                continue
            if self._hazards.size and np.any(
                np.linalg.norm(self._hazards - goal, axis=1)
                < cfg.goal_radius + cfg.hazard_radius
            ):
                continue
            return goal
        raise ConfigError("could not place a goal; arena too crowded")

    def _place_hazards(self) -> np.ndarray:
        cfg = self.cfg
        hazards = []
        budget = self.PLACEMENT_RETRIES
        while len(hazards) < cfg.n_hazards:
            if budget <= 0:
                raise ConfigError("could not place hazards; arena too crowded")
            budget -= 1
            h = self._uniform_point(cfg.hazard_radius)
            if np.linalg.norm(h - self._pos) < cfg.hazard_radius:
                continue
            hazards.append(h)
        return np.array(hazards) if hazards else np.zeros((0, 2))

    # observation ------------------------------------------------------------

    def _obs(self) -> np.ndarray:
        goal_lidar = lidar_profile(
            (self._goal - self._pos)[None, :], self.cfg.lidar_bins, self._max_range
        )
        hazard_lidar = lidar_profile(
            self._hazards - self._pos, self.cfg.lidar_bins, self._max_range
        )
        return np.concatenate([self._vel, goal_lidar, hazard_lidar])

    def reset(self) -> np.ndarray:
        self._pos = self._rng.uniform(-self.SPAWN_HALF_WIDTH, self.SPAWN_HALF_WIDTH, size=2)
        self._vel = np.zeros(2)
        self._hazards = self._place_hazards()
        self._goal = self._place_goal()
        self._steps = 0
        self._goal_dist = float(np.linalg.norm(self._goal - self._pos))
        return self._obs()

    def step(self, action: np.ndarray) -> Transition:
        cfg = self.cfg
        obs = self._obs()
        clipped = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        new_pos = np.clip(
            self._pos + clipped * cfg.dt, -cfg.half_width, cfg.half_width
        )
        self._vel = (new_pos - self._pos) / cfg.dt
        self._pos = new_pos

        new_dist = float(np.linalg.norm(self._goal - self._pos))
        reward = self._goal_dist - new_dist
        if new_dist <= cfg.goal_radius:
            reward += self.GOAL_BONUS
            self._goal = self._place_goal()
            new_dist = float(np.linalg.norm(self._goal - self._pos))
        self._goal_dist = new_dist

        cost = 0.0
        if self._hazards.size and np.any(
            np.linalg.norm(self._hazards - self._pos, axis=1) < cfg.hazard_radius
        ):
            cost = 1.0

        self._steps += 1
        done = self._steps >= cfg.max_steps
        return Transition(obs, clipped, float(reward), cost, self._obs(), done)

"""End-to-end training loop with conservative exploration.

Each outer iteration collects environment steps (sampling a candidate action
set per step and executing the one with the lowest predicted cost), then runs
a block of learner steps: distributional TD update for the reward critic,
conservative TD update for the cost critic, E-step weighting of fresh policy
candidates under the Lagrangian advantage, an M-step policy fit, and finally
a multiplier update whenever a new episodic cost estimate has arrived.

Only executed (filtered) actions ever reach the replay buffer. Ablation
variants are plain config values: ``cdmpo-no-cdcl`` forces the regularizer
weight to zero, ``dmpo-lag`` drops the exploration filter, and ``mpo-lag``
additionally swaps the distributional critics for scalar ones.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig, config_to_dict, make_env
from .critics import CdclConfig, DistributionalCritic, ScalarCritic, cdcl_loss, scalar_td_loss, td_loss
from .distribution import make_grid
from .envs import Transition
from .errors import NumericalError
from .metrics import SCHEMA_VERSION, JsonlWriter
from .mpo import estep_weights, minimize_dual, mstep_update
from .nets import Adam, Mlp, clone, flatten, load_arrays, save_arrays
from .policy import (
    GaussianPolicy,
    conservative_select,
    policy_head,
    sample_action_set,
    sample_candidates,
)
from .wapid import WapidState, cost_signal, wapid_update

__all__ = ["ReplayBuffer", "TransitionBatch", "Trainer", "count_violations"]


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """Bounded ring of transitions; sampling covers only the filled region."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.costs = np.zeros(capacity)
        self.next_states = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def append(self, t: Transition) -> None:
        i = self.cursor
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.costs[i] = t.cost
        self.next_states[i] = t.next_state
        self.dones[i] = t.done
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self) -> int:
        return self.size

    def sample(self, rng: np.random.Generator, batch_size: int) -> TransitionBatch:
        idx = rng.integers(0, self.size, size=batch_size)
        return TransitionBatch(
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.costs[idx],
            self.next_states[idx],
            self.dones[idx],
        )


def count_violations(episode_costs, d: float) -> int:
    """Number of episodes whose total cost exceeds the threshold."""
    return int(sum(1 for c in episode_costs if c > d))


class Trainer:
    """Owns the environment, nets, replay, and controller for one run."""

    def __init__(self, run_cfg: RunConfig, env_factory=None):
        self.run_cfg = run_cfg
        cfg = run_cfg.trainer
        self.cfg = cfg

        seeds = np.random.SeedSequence(cfg.seed).spawn(6)
        self.rng_rollout = np.random.default_rng(seeds[0])
        self.rng_replay = np.random.default_rng(seeds[1])
        self.rng_learner = np.random.default_rng(seeds[2])
        self.rng_init = np.random.default_rng(seeds[3])
        env_seed = int(seeds[4].generate_state(1)[0])
        self._eval_seed_root = int(seeds[5].generate_state(1)[0]) % (2**31)

        if env_factory is None:
            env_factory = lambda seed: make_env(run_cfg.env, cfg.gamma, seed=seed)
        self._env_factory = env_factory
        self.env = env_factory(env_seed)

        # variant dispatch
        self.distributional = cfg.variant != "mpo-lag"
        self.filter_n = cfg.n_candidates if cfg.variant in ("cdmpo", "cdmpo-no-cdcl") else 1
        self.beta_eff = cfg.beta if cfg.variant == "cdmpo" else 0.0
        # the cost critic is inert when nothing consumes it: no exploration
        # filter, no regularizer, and the multiplier pinned to zero
        self.c_inert = (
            cfg.pin_lambda == 0.0 and self.filter_n == 1 and self.beta_eff == 0.0
        )

        obs_dim, action_dim = self.env.obs_dim, self.env.action_dim
        hidden = cfg.nets.hidden
        if self.distributional:
            q_grid = make_grid(*self._q_range(), cfg.grids.n_atoms)
            c_grid = make_grid(*self._c_range(), cfg.grids.n_atoms)
            self.q_critic = DistributionalCritic.create(
                obs_dim, action_dim, hidden, cfg.nets.critic_activation, q_grid, self.rng_init
            )
            self.c_critic = DistributionalCritic.create(
                obs_dim, action_dim, hidden, cfg.nets.critic_activation, c_grid, self.rng_init
            )
        else:
            self.q_critic = ScalarCritic.create(
                obs_dim, action_dim, hidden, cfg.nets.critic_activation, self.rng_init
            )
            self.c_critic = ScalarCritic.create(
                obs_dim, action_dim, hidden, cfg.nets.critic_activation, self.rng_init
            )

        policy_net = Mlp.create(
            (obs_dim, *hidden, 2 * action_dim), cfg.nets.policy_activation, self.rng_init
        )
        self.policy = GaussianPolicy(
            policy_net,
            action_dim,
            scale_floor=cfg.nets.scale_floor,
            bounds=(self.env.action_low, self.env.action_high),
        )

        self.q_opt = Adam(cfg.nets.critic_lr)
        self.c_opt = Adam(cfg.nets.critic_lr)
        self.policy_opt = Adam(cfg.nets.policy_lr)

        self.wapid_state = WapidState(
            k_p=cfg.wapid.k_p,
            k_i=cfg.wapid.k_i,
            k_d=cfg.wapid.k_d,
            w=cfg.wapid.w,
            mode=cfg.controller,
            rectified_integral=cfg.wapid.rectified_integral,
        )
        self.kl_penalty = cfg.mpo.kl_penalty_init
        self.last_eta = float(np.sqrt(cfg.mpo.eta_bounds[0] * cfg.mpo.eta_bounds[1]))

        self.replay = ReplayBuffer(cfg.buffer_capacity, obs_dim, action_dim)
        self.env_steps = 0
        self.episodes_completed = 0
        self.episode_returns: list[float] = []
        self.episode_costs: list[float] = []
        # the controller estimates the *policy's* episodic cost, so episodes
        # containing uniform warmup actions are excluded from its window
        self.policy_episode_costs: list[float] = []
        self.violations = 0
        self._pending_episode_records: list[dict] = []
        self._ctrl_episodes_seen = 0
        self._obs = None
        self._ep_return = 0.0
        self._ep_cost = 0.0
        self._ep_used_warmup = False

    # grid defaults: reward critic spans [0, r_max / (1 - gamma)], cost
    # critic spans [0, episode length]; both overridable in config
    def _q_range(self) -> tuple[float, float]:
        cfg = self.cfg
        v_min = cfg.grids.q_v_min if cfg.grids.q_v_min is not None else 0.0
        if cfg.grids.q_v_max is not None:
            v_max = cfg.grids.q_v_max
        else:
            r_max = getattr(self.env, "r_max", 1.0)
            v_max = r_max / (1.0 - cfg.gamma) if cfg.gamma > 0.0 else r_max
        if v_max <= v_min:
            v_max = v_min + 1.0
        return v_min, v_max

    def _c_range(self) -> tuple[float, float]:
        cfg = self.cfg
        v_min = cfg.grids.c_v_min if cfg.grids.c_v_min is not None else 0.0
        v_max = cfg.grids.c_v_max if cfg.grids.c_v_max is not None else float(self.env.max_steps)
        if v_max <= v_min:
            v_max = v_min + 1.0
        return v_min, v_max

    @property
    def current_lambda(self) -> float:
        if self.cfg.pin_lambda is not None:
            return self.cfg.pin_lambda
        return self.wapid_state.lam

    # --- rollout ---------------------------------------------------------

    def rollout_step(self) -> Transition:
        """Sample a candidate set, execute the lowest-cost candidate, store."""
        if self._obs is None:
            self._obs = self.env.reset()
            self._ep_return = 0.0
            self._ep_cost = 0.0
        if self.env_steps < self.cfg.warmup_steps:
            # seed the replay with uniform actions before the critics mean
            # anything; the filter would otherwise lock behavior onto the
            # untrained cost net's arbitrary preferences
            action = self.rng_rollout.uniform(
                self.env.action_low, self.env.action_high
            )
            self._ep_used_warmup = True
        else:
            candidates = sample_action_set(
                self.policy, self._obs, self.filter_n, self.rng_rollout
            )
            if self.filter_n == 1:
                action = candidates[0]
            else:
                action, _ = conservative_select(self.c_critic, self._obs, candidates)
        t = self.env.step(action)
        self.replay.append(t)
        self.env_steps += 1
        self._ep_return += t.reward
        self._ep_cost += t.cost
        if t.done:
            self._finish_episode()
        else:
            self._obs = t.next_state
        return t

    def _finish_episode(self) -> None:
        violation = self._ep_cost > self.cfg.d
        self.episodes_completed += 1
        self.episode_returns.append(self._ep_return)
        self.episode_costs.append(self._ep_cost)
        if violation:
            self.violations += 1
        self._pending_episode_records.append(
            {
                "episode": self.episodes_completed,
                "seed": self.cfg.seed,
                "env_steps": self.env_steps,
                "return": self._ep_return,
                "cost": self._ep_cost,
                "violation": bool(violation),
            }
        )
        self._obs = None

    # --- learning --------------------------------------------------------

    def _backup_actions(self, next_states: np.ndarray) -> np.ndarray:
        """Next-state actions for the Bellman targets: either a plain policy
        sample or the conservative pick among ``filter_n`` candidates."""
        n = self.filter_n if self.cfg.conservative_backup else 1
        cands = sample_candidates(self.policy, next_states, n, self.rng_learner)
        if n == 1:
            return cands[:, 0, :]
        b, _, da = cands.shape
        tiled = np.repeat(next_states, n, axis=0)
        values = self.c_critic.expected(
            tiled, cands.reshape(b * n, da), use_target=True
        ).reshape(b, n)
        return cands[np.arange(b), values.argmin(axis=1)]

    def learner_iteration(self) -> dict:
        """One full learner step; a no-op with a warning when replay is short."""
        cfg = self.cfg
        if len(self.replay) < cfg.batch_size:
            return {"skipped": 1.0}
        batch = self.replay.sample(self.rng_replay, cfg.batch_size)
        diag: dict[str, float] = {"skipped": 0.0}

        next_actions = self._backup_actions(batch.next_states)

        if self.distributional:
            q_loss, q_grads = td_loss(
                self.q_critic,
                batch.states,
                batch.actions,
                batch.rewards,
                batch.next_states,
                next_actions,
                batch.dones,
                cfg.gamma,
            )
        else:
            q_loss, q_grads = scalar_td_loss(
                self.q_critic,
                batch.states,
                batch.actions,
                batch.rewards,
                batch.next_states,
                next_actions,
                batch.dones,
                cfg.gamma,
            )
        self.q_opt.step(self.q_critic.net, q_grads)
        self.q_critic.sync_target(cfg.nets.target_tau)
        diag["q_loss"] = q_loss

        if not self.c_inert:
            if self.distributional:
                if self.beta_eff > 0.0:
                    policy_actions = sample_candidates(
                        self.policy, batch.states, cfg.n_cdcl_samples, self.rng_learner
                    )
                else:
                    policy_actions = np.zeros(
                        (cfg.batch_size, 1, self.env.action_dim)
                    )
                c_loss, c_grads, parts = cdcl_loss(
                    self.c_critic,
                    batch.states,
                    batch.actions,
                    batch.costs,
                    batch.next_states,
                    next_actions,
                    batch.dones,
                    policy_actions,
                    CdclConfig(self.beta_eff, max(cfg.n_cdcl_samples, 1)),
                    cfg.gamma,
                )
                diag["c_td"] = parts["td"]
                diag["c_reg"] = parts["regularizer"]
            else:
                c_loss, c_grads = scalar_td_loss(
                    self.c_critic,
                    batch.states,
                    batch.actions,
                    batch.costs,
                    batch.next_states,
                    next_actions,
                    batch.dones,
                    cfg.gamma,
                )
            self.c_opt.step(self.c_critic.net, c_grads)
            self.c_critic.sync_target(cfg.nets.target_tau)
            diag["c_loss"] = c_loss

        # E-step on the same replay states with fresh candidates
        k = cfg.mpo.n_candidates
        cands = sample_candidates(self.policy, batch.states, k, self.rng_learner)
        b, _, da = cands.shape
        tiled = np.repeat(batch.states, k, axis=0)
        flat = cands.reshape(b * k, da)
        q_vals = self.q_critic.expected(tiled, flat, use_target=True).reshape(b, k)
        if self.c_inert:
            c_vals = np.zeros_like(q_vals)
        else:
            c_vals = self.c_critic.expected(tiled, flat, use_target=True).reshape(b, k)
        lam = self.current_lambda
        eta = minimize_dual(
            q_vals,
            c_vals,
            lam,
            cfg.d,
            cfg.mpo.epsilon_e,
            cfg.mpo.eta_bounds,
            cfg.mpo.max_dual_iters,
        )
        self.last_eta = eta
        weights = estep_weights(q_vals, c_vals, lam, cfg.d, eta)
        entropy = -(weights * np.log(weights + 1e-300)).sum(axis=1)
        diag["eta"] = eta
        diag["weight_entropy_mean"] = float(entropy.mean())
        diag["weight_entropy_max"] = float(entropy.max())

        old_policy = GaussianPolicy(
            clone(self.policy.net),
            self.policy.action_dim,
            self.policy.scale_floor,
            self.policy.bounds,
        )
        mdiag, self.kl_penalty = mstep_update(
            self.policy,
            old_policy,
            batch.states,
            cands,
            weights,
            cfg.mpo,
            self.policy_opt,
            self.kl_penalty,
        )
        diag.update(mdiag)

        # multiplier update, once per fresh cost estimate
        diag["lambda_updated"] = 0.0
        if cfg.pin_lambda is None and self.episodes_completed > self._ctrl_episodes_seen:
            if cfg.wapid.signal == "critic":
                j_c = float(
                    np.mean(self.c_critic.expected(batch.states, batch.actions))
                )
            else:
                j_c = cost_signal(self.episode_costs, cfg.wapid.window, cfg.d)
            wapid_update(self.wapid_state, j_c, cfg.d)
            self._ctrl_episodes_seen = self.episodes_completed
            diag["lambda_updated"] = 1.0
        diag["lambda"] = self.current_lambda

        self._assert_finite()
        return diag

    def _assert_finite(self) -> None:
        for name, net in (
            ("policy", self.policy.net),
            ("q_critic", self.q_critic.net),
            ("c_critic", self.c_critic.net),
        ):
            if not np.isfinite(flatten(net)).all():
                raise NumericalError(f"{name} parameters became non-finite")

    # --- evaluation --------------------------------------------------------

    def _eval_action(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not self.cfg.eval_conservative:
            head = policy_head(self.policy, obs)
            return self.policy.squash(head.mean[0])
        candidates = sample_action_set(self.policy, obs, self.filter_n, rng)
        if self.filter_n == 1:
            return candidates[0]
        action, _ = conservative_select(self.c_critic, obs, candidates)
        return action

    def evaluate(self, episodes: int, seed: int) -> tuple[dict, list[dict]]:
        """Frozen-parameter episodes on a fresh environment; no replay writes."""
        if episodes < 1:
            raise ValueError("need at least one evaluation episode")
        env = self._env_factory(seed)
        rng = np.random.default_rng(seed)
        records = []
        for ep in range(episodes):
            obs = env.reset()
            ep_return = 0.0
            ep_cost = 0.0
            done = False
            while not done:
                t = env.step(self._eval_action(obs, rng))
                obs = t.next_state
                ep_return += t.reward
                ep_cost += t.cost
                done = t.done
            records.append(
                {
                    "episode": ep,
                    "seed": seed,
                    "return": ep_return,
                    "cost": ep_cost,
                    "violation": bool(ep_cost > self.cfg.d),
                }
            )
        returns = np.array([r["return"] for r in records])
        costs = np.array([r["cost"] for r in records])
        summary = {
            "episodes": episodes,
            "return_mean": float(returns.mean()),
            "return_median": float(np.median(returns)),
            "cost_mean": float(costs.mean()),
            "cost_median": float(np.median(costs)),
            "violation_rate": float(np.mean(costs > self.cfg.d)),
        }
        return summary, records

    # --- checkpoints -------------------------------------------------------

    def _net_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        named = [
            ("policy", self.policy.net),
            ("q", self.q_critic.net),
            ("q_target", self.q_critic.target_net),
            ("c", self.c_critic.net),
            ("c_target", self.c_critic.target_net),
        ]
        for prefix, net in named:
            for k, (w, b) in enumerate(zip(net.weights, net.biases)):
                arrays[f"{prefix}.w{k}"] = w
                arrays[f"{prefix}.b{k}"] = b
        arrays["meta.env_steps"] = np.array([float(self.env_steps)])
        arrays["meta.lambda"] = np.array([self.wapid_state.lam])
        return arrays

    def save_checkpoint(self, path: str | Path) -> None:
        save_arrays(str(path), self._net_arrays())

    def load_checkpoint(self, path: str | Path) -> None:
        arrays = load_arrays(str(path))
        named = {
            "policy": self.policy.net,
            "q": self.q_critic.net,
            "q_target": self.q_critic.target_net,
            "c": self.c_critic.net,
            "c_target": self.c_critic.target_net,
        }
        for prefix, net in named.items():
            for k in range(len(net.weights)):
                net.weights[k][...] = arrays[f"{prefix}.w{k}"]
                net.biases[k][...] = arrays[f"{prefix}.b{k}"]
        if "meta.lambda" in arrays:
            self.wapid_state.lam = float(arrays["meta.lambda"][0])

    # --- full run ----------------------------------------------------------

    def run(self, out_dir: str | Path) -> dict:
        """Train to ``total_steps``, writing metrics, episode log, and
        checkpoints under ``out_dir``. Returns a final summary."""
        cfg = self.cfg
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.yaml", "w", encoding="utf-8") as fh:
            yaml.safe_dump(config_to_dict(self.run_cfg), fh, sort_keys=True)
        manifest = {"started_unix": time.time()}

        iteration = 0
        with JsonlWriter(out / "metrics.jsonl") as metrics, JsonlWriter(
            out / "episodes.jsonl"
        ) as episodes:
            while self.env_steps < cfg.total_steps:
                budget = min(
                    cfg.steps_per_iteration, cfg.total_steps - self.env_steps
                )
                for _ in range(budget):
                    self.rollout_step()
                for record in self._pending_episode_records:
                    episodes.write(record)
                self._pending_episode_records.clear()

                diags = [
                    self.learner_iteration()
                    for _ in range(cfg.grad_steps_per_iteration)
                ]
                iteration += 1
                record = self._iteration_record(iteration, diags)
                if cfg.eval_interval > 0 and iteration % cfg.eval_interval == 0:
                    summary, _ = self.evaluate(
                        cfg.eval_episodes, self._eval_seed_root + iteration
                    )
                    record.update({f"eval_{k}": v for k, v in summary.items()})
                metrics.write(record)

                if (
                    cfg.checkpoint_interval > 0
                    and iteration % cfg.checkpoint_interval == 0
                ):
                    self.save_checkpoint(out / f"checkpoint_{iteration:06d}.ckpt")

            for record in self._pending_episode_records:
                episodes.write(record)
            self._pending_episode_records.clear()

        self.save_checkpoint(out / "checkpoint.ckpt")
        manifest["finished_unix"] = time.time()
        with open(out / "run.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh)
        return {
            "env_steps": self.env_steps,
            "episodes": self.episodes_completed,
            "violations": self.violations,
            "iterations": iteration,
        }

    def _iteration_record(self, iteration: int, diags: list[dict]) -> dict:
        keys = set()
        for d in diags:
            keys.update(d)
        record = {
            "schema": SCHEMA_VERSION,
            "iteration": iteration,
            "env_steps": self.env_steps,
            "episodes": self.episodes_completed,
            "violations": self.violations,
            "d": self.cfg.d,
        }
        for key in sorted(keys):
            values = [d[key] for d in diags if key in d]
            if key == "lambda_updated":
                record[key] = bool(any(values))
            else:
                record[key] = float(np.mean(values))
        recent_r = self.episode_returns[-10:]
        recent_c = self.episode_costs[-10:]
        record["return_mean"] = float(np.mean(recent_r)) if recent_r else None
        record["cost_mean"] = float(np.mean(recent_c)) if recent_c else None
        record["ctrl_delta"] = self.wapid_state.last_delta
        record["ctrl_integral"] = self.wapid_state.integral
        record["ctrl_deriv"] = self.wapid_state.last_deriv
        record["lambda"] = self.current_lambda
        return record

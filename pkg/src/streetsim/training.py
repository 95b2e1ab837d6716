"""Actor/learner training for the courier task.

Topology contract: N actor workers step their own environments and emit
fixed-length unrolls into a bounded FIFO; a single learner consumes batches,
applies the actor-critic update, and publishes immutable versioned parameter
snapshots that actors pick up at unroll boundaries.

Two drivers implement the contract:

  train_async   real threads, one env per actor; exercises the queue and
                snapshot machinery end to end
  train_sync    one thread, a batch of lockstep envs; bit-reproducible and
                faster on one machine, used by the scripted experiments

Both share the actor core, the loss, and the learner update, so they train
the same function.
"""

from __future__ import annotations

import csv
import hashlib
import math
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import agents, nn
from .agents import AgentState, ArchConfig
from .configio import ConfigError
from .courier import CourierEnv, CurriculumConfig, curriculum_radius, resolve_curriculum
from .panorama import PanoramaCache


class SinkClosed(Exception):
    """The unroll queue was closed under a producer."""


class SourceClosed(Exception):
    """The unroll queue was closed and drained under the consumer."""


class NonFiniteLoss(Exception):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 100_000
    n_actors: int = 8          # desk-scale default; a cluster run wants ~256
    batch_size: int = 8
    unroll_len: int = 50
    lr: float = 0.001
    lr_anneal_steps: int = 0   # 0 = anneal over total_steps
    gamma: float = 0.99
    entropy_cost: float = 0.004
    value_weight: float = 0.5
    heading_weight: float = 1.0
    reward_clip: float = 1.0
    rmsprop_decay: float = 0.99
    rmsprop_epsilon: float = 0.1
    momentum: float = 0.0
    frozen_groups: tuple = ()
    checkpoint_every: int = 0  # global steps; 0 = final checkpoint only
    checkpoint_keep: int = 3
    start_step: int = 0        # resume offset; total_steps stays the absolute target
    seed: int = 0
    lattice_start_headings: bool = True
    episode_window: int = 100
    # actors idle at unroll boundaries until the learner publishes a newer
    # snapshot; gives a deterministic interleaving and keeps lag at 0
    actors_wait_for_update: bool = True

    def __post_init__(self):
        if self.total_steps <= 0 or self.unroll_len <= 0:
            raise ConfigError("total_steps and unroll_len must be positive")
        if self.n_actors <= 0 or self.batch_size <= 0:
            raise ConfigError("n_actors and batch_size must be positive")
        if self.batch_size > 2 * self.n_actors:
            raise ConfigError("batch_size exceeds queue capacity (2 per actor)")
        if self.actors_wait_for_update and self.batch_size > self.n_actors:
            raise ConfigError("snapshot waiting needs batch_size <= n_actors")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must lie in [0, 1]")
        if self.lr < 0 or self.lr_anneal_steps < 0:
            raise ConfigError("lr and lr_anneal_steps must be >= 0")
        if self.start_step < 0:
            raise ConfigError("start_step must be >= 0")

    def anneal_horizon(self) -> int:
        return self.lr_anneal_steps or self.total_steps

    def lr_at(self, global_step: int) -> float:
        frac = 1.0 - global_step / self.anneal_horizon()
        return self.lr * max(0.0, frac)


@dataclass
class Unroll:
    city_id: str
    observations: np.ndarray   # [T, H, H, 3] float32
    goal_codes: np.ndarray     # [T, G]
    prev_actions: np.ndarray   # [T] int64, -1 = episode start
    prev_rewards: np.ndarray   # [T] float32, already clipped
    actions: np.ndarray        # [T]
    rewards: np.ndarray        # [T] clipped training rewards
    heading_bins: np.ndarray   # [T]
    init_state: dict           # name -> [1, units] float32
    bootstrap_obs: np.ndarray
    bootstrap_goal: np.ndarray
    bootstrap_prev_action: int
    bootstrap_prev_reward: float
    terminal: bool
    policy_version: int
    start_step: int            # episode step index of the first transition
    episode_goal_rewards: tuple = ()   # completed episodes' unclipped sums

    def __post_init__(self):
        t = len(self.actions)
        for name in ("observations", "goal_codes", "prev_actions", "prev_rewards", "rewards", "heading_bins"):
            if len(getattr(self, name)) != t:
                raise ValueError(f"{name} length != {t}")


def clip_reward(r: float, cap: float = 1.0) -> float:
    return min(r, cap)


def n_step_returns(rewards: np.ndarray, bootstrap: np.ndarray, gamma: float) -> np.ndarray:
    """R_t = r_t + gamma * R_{t+1}, seeded with the bootstrap value."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = np.asarray(bootstrap, dtype=np.float64).copy()
    for t in range(rewards.shape[-1] - 1, -1, -1):
        acc = rewards[..., t] + gamma * acc
        out[..., t] = acc
    return out


def prev_action_onehot(indices, width: int = 5, dtype=np.float32) -> np.ndarray:
    """One-hot rows; -1 encodes 'no previous action' as all zeros."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    out = np.zeros((idx.size, width), dtype)
    valid = idx >= 0
    out[np.nonzero(valid)[0], idx[valid]] = 1.0
    return out


class SnapshotStore:
    """Versioned, immutable parameter snapshots plus the learner's step count."""

    def __init__(self):
        self._cond = threading.Condition()
        self._version = 0
        self._arrays: dict | None = None
        self._global_step = 0

    def publish(self, arrays: dict, global_step: int) -> int:
        frozen = {}
        for name, arr in arrays.items():
            a = np.array(arr, copy=True)
            a.setflags(write=False)
            frozen[name] = a
        with self._cond:
            self._version += 1
            self._arrays = frozen
            self._global_step = global_step
            self._cond.notify_all()
            return self._version

    def latest(self):
        with self._cond:
            if self._arrays is None:
                raise RuntimeError("no snapshot published yet")
            return self._version, self._arrays, self._global_step

    def wait_newer(self, version: int, timeout=None):
        """Block until a snapshot newer than `version` exists; returns latest
        either way (callers re-check the version after a timeout)."""
        with self._cond:
            self._cond.wait_for(lambda: self._version > version, timeout)
            if self._arrays is None:
                raise RuntimeError("no snapshot published yet")
            return self._version, self._arrays, self._global_step

    @property
    def version(self) -> int:
        with self._cond:
            return self._version


class UnrollQueue:
    """Bounded FIFO with close semantics for clean shutdown."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False

    def put(self, item) -> None:
        with self._cond:
            while len(self._items) >= self.capacity and not self._closed:
                self._cond.wait()
            if self._closed:
                raise SinkClosed("queue closed")
            self._items.append(item)
            self._cond.notify_all()

    def get(self):
        with self._cond:
            while not self._items and not self._closed:
                self._cond.wait()
            if self._items:
                item = self._items.popleft()
                self._cond.notify_all()
                return item
            raise SourceClosed("queue closed and drained")

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self):
        with self._cond:
            return len(self._items)


class ActorEnv:
    """A courier env plus the observation provider the agent actually sees.

    The env itself runs with rendering off; observations come from the
    panorama cache, memoized per (node, heading) while headings stay on the
    22.5-degree action lattice. panoramas=None serves a constant blank frame,
    enough for scripted policies that never look.
    """

    def __init__(self, env: CourierEnv, panoramas: PanoramaCache | None, city_id: str = "city0",
                 cache_observations: bool = True, heading_rng=None, blank_obs_hw: int = 84):
        self.env = env
        self.city_id = city_id
        self._panos = panoramas
        self._blank = np.zeros((blank_obs_hw, blank_obs_hw, 3), np.float32)
        self._cache: dict | None = {} if cache_observations else None
        self._heading_rng = heading_rng or np.random.default_rng(env.config.seed + 7919)
        self.episode_len = env.config.episode_len
        self.curriculum = env.config.curriculum
        self.last_result = None
        # every goal node ever assigned, for held-out sampling audits
        self.goal_log: list = []

    def _render(self) -> np.ndarray:
        if self._panos is None:
            return self._blank
        pose = self.env.state.pose
        if self._cache is None:
            return self._panos.observe(pose.node, pose.heading)
        key = (pose.node, round(pose.heading * 16.0))
        obs = self._cache.get(key)
        if obs is None:
            obs = self._panos.observe(pose.node, pose.heading)
            obs.setflags(write=False)
            self._cache[key] = obs
        return obs

    def reset(self, lattice_heading: bool = True, start_node=None, goal_node=None):
        heading = None
        if lattice_heading:
            heading = 22.5 * float(self._heading_rng.integers(0, 16))
        res = self.env.reset(start_node=start_node, heading=heading, goal_node=goal_node)
        self.last_result = res
        self.goal_log.append(self.env.state.goal.node)
        return self._render(), res.goal_code, res.info["heading_bin"]

    def step(self, action):
        res = self.env.step(action)
        self.last_result = res
        if res.goal_reward > 0.0 and self.env.state.goal.node != self.goal_log[-1]:
            self.goal_log.append(self.env.state.goal.node)
        return self._render(), res.goal_code, res.reward, res.goal_reward, res.done, res.info["heading_bin"]

    def set_curriculum_radius(self, radius_m: float) -> None:
        self.env.set_curriculum_radius(radius_m)


class ActorCore:
    """Steps a batch of lockstep envs and assembles per-env unrolls.

    All envs share one episode length, so episode boundaries land on unroll
    boundaries for every lane at once.
    """

    def __init__(self, arch_cfg: ArchConfig, envs: list, train_cfg: TrainConfig, seed: int = 0):
        self.arch = arch_cfg
        self.envs = envs
        self.cfg = train_cfg
        self.rng = np.random.default_rng(seed)
        b = len(envs)
        for e in envs:
            if e.episode_len % train_cfg.unroll_len != 0:
                raise ConfigError(
                    f"episode_len {e.episode_len} not a multiple of unroll_len {train_cfg.unroll_len}"
                )
            if arch_cfg.arch != "goalnav" and e.city_id not in arch_cfg.cities:
                raise ConfigError(f"env city {e.city_id!r} unknown to the architecture")
        self.b = b
        self._obs = np.zeros((b, arch_cfg.obs_hw, arch_cfg.obs_hw, 3), np.float32)
        self._goal = np.zeros((b, arch_cfg.goal_dims), np.float32)
        self._hbin = np.zeros(b, np.int64)
        self._prev_action = np.full(b, -1, np.int64)
        self._prev_reward = np.zeros(b, np.float32)
        self._state: AgentState | None = None
        self._episode_step = 0
        self._episode_goal_reward = np.zeros(b, np.float64)
        self._needs_reset = True

    def _reset_all(self):
        for i, env in enumerate(self.envs):
            obs, goal, hbin = env.reset(self.cfg.lattice_start_headings)
            self._obs[i] = obs
            self._goal[i] = goal
            self._hbin[i] = hbin
        self._prev_action[:] = -1
        self._prev_reward[:] = 0.0
        self._state = agents.initial_state(self.arch, self.b)
        self._episode_step = 0
        self._episode_goal_reward[:] = 0.0
        self._needs_reset = False

    def set_curriculum(self, radius_m: float) -> None:
        for env in self.envs:
            env.set_curriculum_radius(radius_m)

    def run_unroll(self, params: nn.ParamSet, version: int) -> list:
        """Collect one unroll per env lane, acting greedily-sampled from the
        current snapshot with eval-mode dropout."""
        if self._needs_reset:
            self._reset_all()
        T, b, arch = self.cfg.unroll_len, self.b, self.arch
        obs_seq = np.empty((T, b, arch.obs_hw, arch.obs_hw, 3), np.float32)
        goal_seq = np.empty((T, b, arch.goal_dims), np.float32)
        pa_seq = np.empty((T, b), np.int64)
        pr_seq = np.empty((T, b), np.float32)
        act_seq = np.empty((T, b), np.int64)
        rew_seq = np.empty((T, b), np.float32)
        hbin_seq = np.empty((T, b), np.int64)
        init_state = _state_arrays(self._state)
        start_step = self._episode_step
        completed: list[list] = [[] for _ in range(b)]

        state = self._state
        with nn.no_grad():
            for t in range(T):
                obs_seq[t] = self._obs
                goal_seq[t] = self._goal
                pa_seq[t] = self._prev_action
                pr_seq[t] = self._prev_reward
                hbin_seq[t] = self._hbin
                out = _forward_batch(params, arch, self.envs, self._obs, self._goal,
                                     self._prev_action, self._prev_reward, state)
                actions = agents.sample_actions(out.policy_logits.data, self.rng)
                act_seq[t] = actions
                done = False
                for i, env in enumerate(self.envs):
                    obs, goal, reward, goal_reward, d, hbin = env.step(int(actions[i]))
                    self._obs[i] = obs
                    self._goal[i] = goal
                    self._hbin[i] = hbin
                    r = clip_reward(reward, self.cfg.reward_clip)
                    rew_seq[t, i] = r
                    self._prev_reward[i] = r
                    self._episode_goal_reward[i] += goal_reward
                    done = done or d
                self._prev_action[:] = actions
                state = out.state
                self._episode_step += 1
                if done:
                    assert t == T - 1, "episode boundary off the unroll grid"
        terminal = self._episode_step >= self.envs[0].episode_len
        if terminal:
            for i in range(b):
                completed[i].append(self._episode_goal_reward[i])

        unrolls = []
        for i in range(b):
            unrolls.append(
                Unroll(
                    city_id=self.envs[i].city_id,
                    observations=obs_seq[:, i],
                    goal_codes=goal_seq[:, i],
                    prev_actions=pa_seq[:, i],
                    prev_rewards=pr_seq[:, i],
                    actions=act_seq[:, i],
                    rewards=rew_seq[:, i],
                    heading_bins=hbin_seq[:, i],
                    init_state={k: v[i : i + 1] for k, v in init_state.items()},
                    bootstrap_obs=self._obs[i].copy(),
                    bootstrap_goal=self._goal[i].copy(),
                    bootstrap_prev_action=int(self._prev_action[i]),
                    bootstrap_prev_reward=float(self._prev_reward[i]),
                    terminal=terminal,
                    policy_version=version,
                    start_step=start_step,
                    episode_goal_rewards=tuple(completed[i]),
                )
            )
        if terminal:
            self._needs_reset = True
        else:
            self._state = state.detached()
        return unrolls


def _state_arrays(state: AgentState) -> dict:
    out = {"policy_h": state.policy_h.data.copy(), "policy_c": state.policy_c.data.copy()}
    if state.goal_h is not None:
        out["goal_h"] = state.goal_h.data.copy()
        out["goal_c"] = state.goal_c.data.copy()
    return out


def _state_from_arrays(arrays: dict, dtype=np.float32) -> AgentState:
    t = lambda k: nn.Tensor(arrays[k].astype(dtype, copy=True))
    return AgentState(
        t("policy_h"), t("policy_c"),
        t("goal_h") if "goal_h" in arrays else None,
        t("goal_c") if "goal_c" in arrays else None,
    )


def _forward_batch(params, arch, envs, obs, goal, prev_action, prev_reward, state,
                   train_mode=False, rng=None):
    """Acting-time forward; a batch must be single-city for the goal pathway."""
    pa = prev_action_onehot(prev_action)
    pr = np.asarray(prev_reward, np.float32).reshape(-1, 1)
    city = envs[0].city_id if envs else None
    return agents.agent_forward(params, arch, city, obs, goal, pa, pr, state, train_mode, rng)


def compute_loss(params: nn.ParamSet, arch: ArchConfig, unrolls: list, cfg: TrainConfig, rng):
    """Actor-critic loss over a batch of unrolls, summed over batch and time.

    Returns (scalar loss Tensor, breakdown dict). The advantage is a constant
    with respect to parameters, so the policy term sends no gradient into the
    value head. Raises NonFiniteLoss if any op produces NaN/Inf.
    """
    try:
        return _compute_loss_inner(params, arch, unrolls, cfg, rng)
    except nn.NumericalError as exc:
        raise NonFiniteLoss(f"loss diverged: {exc}") from exc


def _compute_loss_inner(params, arch, unrolls, cfg, rng):
    by_city: dict = {}
    for u in unrolls:
        by_city.setdefault(u.city_id, []).append(u)

    total = None
    breakdown = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "heading_loss": 0.0}
    n_steps = 0
    for city, group in sorted(by_city.items()):
        b = len(group)
        T = len(group[0].actions)
        n_steps += b * T
        obs = np.stack([u.observations for u in group], axis=1)      # [T,B,...]
        goals = np.stack([u.goal_codes for u in group], axis=1)
        pa = np.stack([u.prev_actions for u in group], axis=1)
        pr = np.stack([u.prev_rewards for u in group], axis=1)
        acts = np.stack([u.actions for u in group], axis=1)
        rews = np.stack([u.rewards for u in group], axis=0)          # [B,T]
        hbins = np.stack([u.heading_bins for u in group], axis=1)
        if rews.size and float(rews.max()) > cfg.reward_clip + 1e-6:
            raise ValueError("unroll rewards exceed the training reward clip")

        state = _state_from_arrays(
            {k: np.concatenate([u.init_state[k] for u in group]) for k in group[0].init_state}
        )
        logits_steps, value_steps, heading_steps = [], [], []
        for t in range(T):
            out = agents.agent_forward(
                params, arch, city, obs[t], goals[t],
                prev_action_onehot(pa[t]), pr[t].reshape(-1, 1),
                state, train_mode=True, rng=rng,
            )
            logits_steps.append(out.policy_logits)
            value_steps.append(out.value)
            heading_steps.append(out.heading_logits)
            state = out.state

        if group[0].terminal:
            bootstrap = np.zeros(b)
        else:
            with nn.no_grad():
                boot_out = agents.agent_forward(
                    params, arch, city,
                    np.stack([u.bootstrap_obs for u in group]),
                    np.stack([u.bootstrap_goal for u in group]),
                    prev_action_onehot([u.bootstrap_prev_action for u in group]),
                    np.array([[u.bootstrap_prev_reward] for u in group], np.float32),
                    state.detached(),
                )
            bootstrap = boot_out.value.data.reshape(-1).astype(np.float64)
        returns = n_step_returns(rews, bootstrap, cfg.gamma)         # [B,T]

        for t in range(T):
            value_t = nn.reshape(value_steps[t], (b,))
            adv = returns[:, t] - value_t.data.astype(np.float64)
            adv32 = nn.Tensor(adv.astype(np.float32))
            ret32 = nn.Tensor(returns[:, t].astype(np.float32))
            neg_logp = nn.softmax_xent(logits_steps[t], acts[t])
            policy_term = nn.tsum(nn.mul(neg_logp, adv32))
            diff = nn.sub(ret32, value_t)
            value_term = nn.scale(nn.tsum(nn.mul(diff, diff)), 0.5 * cfg.value_weight)
            entropy_t = nn.tsum(nn.softmax_entropy(logits_steps[t]))
            ent_term = nn.scale(entropy_t, -cfg.entropy_cost)
            step_loss = nn.add(nn.add(policy_term, value_term), ent_term)
            if cfg.heading_weight > 0.0 and heading_steps[t] is not None:
                head_term = nn.scale(nn.tsum(nn.softmax_xent(heading_steps[t], hbins[t])), cfg.heading_weight)
                step_loss = nn.add(step_loss, head_term)
                breakdown["heading_loss"] += float(head_term.data)
            breakdown["policy_loss"] += float(policy_term.data)
            breakdown["value_loss"] += float(value_term.data)
            breakdown["entropy"] += float(entropy_t.data)
            total = step_loss if total is None else nn.add(total, step_loss)

    breakdown["total_loss"] = float(total.data)
    breakdown["steps"] = n_steps
    return total, breakdown


class TrainLog:
    COLUMNS = (
        "global_step", "mean_episode_goal_reward", "policy_loss", "value_loss",
        "entropy", "heading_loss", "total_loss", "lr", "curriculum_radius", "snapshot_lag",
    )

    def __init__(self, path=None, append=False):
        self.rows: list = []
        self._fh = None
        self._writer = None
        if path is not None:
            import os

            fresh = not (append and os.path.exists(path) and os.path.getsize(path) > 0)
            self._fh = open(path, "a" if append else "w", newline="")
            self._writer = csv.writer(self._fh)
            if fresh:
                self._writer.writerow(self.COLUMNS)

    def append(self, **row) -> None:
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow([row.get(c, "") for c in self.COLUMNS])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class Learner:
    """Owns the parameter set: consumes unroll batches, updates, publishes."""

    def __init__(self, params: nn.ParamSet, arch: ArchConfig, cfg: TrainConfig,
                 store: SnapshotStore, curriculum: CurriculumConfig,
                 log: TrainLog | None = None, checkpoint_dir=None, grouping: dict | None = None):
        self.params = params
        self.arch = arch
        self.cfg = cfg
        self.store = store
        self.curriculum = curriculum
        self.log = log or TrainLog()
        self.checkpoint_dir = checkpoint_dir
        self.grouping = grouping
        if cfg.frozen_groups and grouping is None:
            raise ConfigError("frozen_groups set but no pathway grouping supplied")
        self.global_step = cfg.start_step
        self.dropout_rng = np.random.default_rng(cfg.seed + 104729)
        self.episode_window: deque = deque(maxlen=cfg.episode_window)
        self._ckpt_paths: deque = deque()
        self._last_ckpt_step = cfg.start_step
        self.store.publish(params.snapshot(), self.global_step)

    def consume(self, batch: list) -> dict:
        """One update from a batch of unrolls; returns the logged row."""
        version = self.store.version
        lags = [version - u.policy_version for u in batch]
        for u in batch:
            self.episode_window.extend(u.episode_goal_rewards)
        lr_now = self.cfg.lr_at(self.global_step)
        try:
            loss, breakdown = compute_loss(self.params, self.arch, batch, self.cfg, self.dropout_rng)
            self.params.zero_grad()
            loss.backward()
            grads = self.params.grads()
        except NonFiniteLoss as exc:
            path = self._dump_batch(batch)
            exc.dump_path = path
            self.params.zero_grad()
            breakdown = {"policy_loss": math.nan, "value_loss": math.nan, "entropy": math.nan,
                         "heading_loss": math.nan, "total_loss": math.nan}
            grads = None
        if grads is not None:
            if self.cfg.frozen_groups:
                grads = agents.apply_freeze(self.grouping, self.cfg.frozen_groups, grads)
            nn.rmsprop_update(
                self.params, grads, lr=lr_now,
                decay=self.cfg.rmsprop_decay, epsilon=self.cfg.rmsprop_epsilon,
                momentum=self.cfg.momentum,
            )
        self.global_step += len(batch) * self.cfg.unroll_len
        self.store.publish(self.params.snapshot(), self.global_step)
        row = dict(
            global_step=self.global_step,
            mean_episode_goal_reward=(
                float(np.mean(self.episode_window)) if self.episode_window else math.nan
            ),
            lr=lr_now,
            curriculum_radius=curriculum_radius(self.global_step, self.curriculum),
            snapshot_lag=float(np.median(lags)),
            **{k: breakdown[k] for k in ("policy_loss", "value_loss", "entropy", "heading_loss", "total_loss")},
        )
        self.log.append(**row)
        self._maybe_checkpoint()
        return row

    def done(self) -> bool:
        return self.global_step >= self.cfg.total_steps

    def _dump_batch(self, batch) -> str | None:
        if self.checkpoint_dir is None:
            return None
        import pickle
        from pathlib import Path

        path = Path(self.checkpoint_dir) / f"divergent_batch_{self.global_step}.pkl"
        with open(path, "wb") as fh:
            pickle.dump(batch, fh)
        return str(path)

    def _maybe_checkpoint(self, force: bool = False) -> None:
        if self.checkpoint_dir is None:
            return
        every = self.cfg.checkpoint_every
        due = force or (every > 0 and self.global_step - self._last_ckpt_step >= every)
        if not due:
            return
        from pathlib import Path

        path = Path(self.checkpoint_dir) / f"ck_{self.global_step:012d}.bin"
        nn.save_params(path, self.params, meta={"global_step": self.global_step})
        self._last_ckpt_step = self.global_step
        self._ckpt_paths.append(path)
        while len(self._ckpt_paths) > self.cfg.checkpoint_keep:
            old = self._ckpt_paths.popleft()
            try:
                old.unlink()
            except OSError:
                pass

    def finalize(self) -> None:
        if self.global_step != self._last_ckpt_step:
            self._maybe_checkpoint(force=True)
        self.log.close()


def run_actor(actor_id: int, actor_env: ActorEnv, arch: ArchConfig, cfg: TrainConfig,
              store: SnapshotStore, queue: UnrollQueue, curriculum: CurriculumConfig,
              stop_event: threading.Event) -> None:
    """Thread body: act forever, shipping unrolls, until the sink closes."""
    local = agents.build_params(arch, np.random.default_rng(0))
    core = ActorCore(arch, [actor_env], cfg, seed=cfg.seed * 1000 + actor_id)
    held_version = -1
    last_used = -1
    while not stop_event.is_set():
        if cfg.actors_wait_for_update:
            version, arrays, gstep = store.wait_newer(last_used, timeout=0.5)
            if version <= last_used:
                continue
        else:
            version, arrays, gstep = store.latest()
        if version != held_version:
            if version < held_version:
                raise RuntimeError("snapshot version went backwards")
            local.load_snapshot(arrays)
            held_version = version
        last_used = version
        core.set_curriculum(curriculum_radius(gstep, curriculum))
        unrolls = core.run_unroll(local, held_version)
        try:
            for u in unrolls:
                queue.put(u)
        except SinkClosed:
            return


def train_async(params: nn.ParamSet, arch: ArchConfig, actor_envs: list, cfg: TrainConfig,
                log: TrainLog | None = None, checkpoint_dir=None, grouping=None) -> TrainLog:
    """N actor threads, one in-line learner, queue capacity 2N."""
    if len(actor_envs) != cfg.n_actors:
        raise ConfigError(f"{cfg.n_actors} actors configured, {len(actor_envs)} envs supplied")
    curriculum = resolve_curriculum(actor_envs[0].curriculum, cfg.total_steps)
    store = SnapshotStore()
    queue = UnrollQueue(2 * cfg.n_actors)
    learner = Learner(params, arch, cfg, store, curriculum, log, checkpoint_dir, grouping)
    stop = threading.Event()
    threads = [
        threading.Thread(target=run_actor, args=(i, env, arch, cfg, store, queue, curriculum, stop), daemon=True)
        for i, env in enumerate(actor_envs)
    ]
    for t in threads:
        t.start()
    try:
        while not learner.done():
            batch = [queue.get() for _ in range(cfg.batch_size)]
            learner.consume(batch)
    finally:
        stop.set()
        queue.close()
        for t in threads:
            t.join(timeout=30)
        learner.finalize()
    return learner.log


def train_sync(params: nn.ParamSet, arch: ArchConfig, actor_envs: list, cfg: TrainConfig,
               log: TrainLog | None = None, checkpoint_dir=None, grouping=None,
               hooks=None) -> TrainLog:
    """Single-thread driver: a lockstep env batch feeding the learner directly.

    Equivalent training semantics with zero snapshot lag; deterministic for
    fixed seeds. `hooks`, if given, is called as hooks(learner) after every
    update.
    """
    if len(actor_envs) != cfg.batch_size:
        raise ConfigError(f"batch_size {cfg.batch_size} but {len(actor_envs)} envs supplied")
    curriculum = resolve_curriculum(actor_envs[0].curriculum, cfg.total_steps)
    store = SnapshotStore()
    learner = Learner(params, arch, cfg, store, curriculum, log, checkpoint_dir, grouping)
    # one core per city so the goal pathway routing stays single-city per batch lane group
    by_city: dict = {}
    for env in actor_envs:
        by_city.setdefault(env.city_id, []).append(env)
    cores = [
        ActorCore(arch, envs, cfg, seed=cfg.seed * 1000 + ci)
        for ci, (_, envs) in enumerate(sorted(by_city.items()))
    ]
    try:
        while not learner.done():
            radius = curriculum_radius(learner.global_step, curriculum)
            batch = []
            for core in cores:
                core.set_curriculum(radius)
                batch.extend(core.run_unroll(params, store.version))
            learner.consume(batch)
            if hooks is not None:
                hooks(learner)
    finally:
        learner.finalize()
    return learner.log


def group_hashes(params: nn.ParamSet, grouping: dict, groups) -> dict:
    """SHA-256 of each named group's concatenated parameter bytes."""
    out = {}
    for g in groups:
        h = hashlib.sha256()
        for name in sorted(grouping[g]):
            h.update(params[name].data.astype("<f4").tobytes())
        out[g] = h.hexdigest()
    return out


def run_transfer_experiment(
    make_envs,
    source_cities: tuple,
    target_city: str,
    arch_kwargs: dict,
    eval_fn,
    seeds=(0, 1, 2),
    regimes=("single", "joint", "pretrain_transfer"),
    single_steps: int = 100_000,
    joint_steps: int = 100_000,
    pretrain_steps: int = 100_000,
    transfer_steps: int = 50_000,
    train_kwargs: dict | None = None,
) -> dict:
    """Compare training regimes on a target city.

    make_envs(cities, seed, batch_size) must yield batch_size ActorEnvs cycling
    over the given cities; eval_fn(params, arch, city_id) returns the mean
    episode goal reward on that city. Results aggregate over seeds.
    """
    if ("joint" in regimes or "pretrain_transfer" in regimes) and len(source_cities) < 1:
        raise ConfigError("joint and pretrain regimes need at least one source city")
    if target_city in source_cities:
        raise ConfigError("target city listed among sources")
    tk = dict(train_kwargs or {})
    batch = tk.pop("batch_size", 8)
    report: dict = {"target": target_city, "sources": tuple(source_cities), "regimes": {}}
    for regime in regimes:
        per_seed = []
        for seed in seeds:
            cfg_kwargs = dict(tk, batch_size=batch, n_actors=batch, seed=seed)
            if regime == "single":
                arch = ArchConfig(arch="citynav", cities=(target_city,), **arch_kwargs)
                params = agents.build_params(arch, np.random.default_rng(seed))
                cfg = TrainConfig(total_steps=single_steps, **cfg_kwargs)
                train_sync(params, arch, make_envs((target_city,), seed, batch), cfg)
                extra = {}
            elif regime == "joint":
                cities = tuple(source_cities) + (target_city,)
                arch = ArchConfig(arch="multicitynav", cities=cities, **arch_kwargs)
                params = agents.build_params(arch, np.random.default_rng(seed))
                cfg = TrainConfig(total_steps=joint_steps, **cfg_kwargs)
                train_sync(params, arch, make_envs(cities, seed, batch), cfg)
                extra = {}
            elif regime == "pretrain_transfer":
                arch = ArchConfig(arch="multicitynav", cities=tuple(source_cities), **arch_kwargs)
                params = agents.build_params(arch, np.random.default_rng(seed))
                cfg = TrainConfig(total_steps=pretrain_steps, **cfg_kwargs)
                train_sync(params, arch, make_envs(tuple(source_cities), seed, batch), cfg)
                arch = agents.add_city(params, arch, target_city, np.random.default_rng(seed + 500))
                grouping = agents.pathway_grouping(arch, params)
                frozen = ("convnet", "policy_lstm")
                before = group_hashes(params, grouping, frozen)
                cfg2 = TrainConfig(total_steps=transfer_steps, frozen_groups=frozen, **cfg_kwargs)
                train_sync(params, arch, make_envs((target_city,), seed, batch), cfg2, grouping=grouping)
                after = group_hashes(params, grouping, frozen)
                extra = {"frozen_hashes_match": before == after}
            else:
                raise ConfigError(f"unknown regime {regime!r}")
            score = eval_fn(params, arch, target_city)
            per_seed.append(dict(seed=seed, reward=score, **extra))
        rewards = [r["reward"] for r in per_seed]
        report["regimes"][regime] = {
            "per_seed": per_seed,
            "mean": float(np.mean(rewards)),
            "sd": float(np.std(rewards)),
        }
    return report

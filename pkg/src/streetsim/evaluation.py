"""Measurement protocols for trained and scripted courier agents.

Everything metric-shaped is a pure function of JSON-lines trajectory records
(the courier env's `record` rows), so a report recomputed from a dumped
trajectory file matches the live one exactly. Rollout drivers produce those
records; decoding probes train small classifiers on dumped hidden states.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import agents, nn
from .agents import ArchConfig
from .citygraph import METERS_PER_DEG_LAT, LatLong, bearing_deg, haversine_m
from .courier import binned_axis_sizes

SCHEMA_VERSION = 1


class CheckpointMismatch(Exception):
    """Checkpoint does not fit the requested architecture."""


class InsufficientData(Exception):
    pass


class MissingCheckpoint(Exception):
    pass


# ---------------------------------------------------------------- policies

class LearnedPolicy:
    """Wraps a parameter set for single-lane eval-mode acting.

    Tracks its own recurrent state and prev-action/reward stream; exposes the
    goal-pathway hidden vector for probing.
    """

    def __init__(self, params, arch: ArchConfig, city_id=None, greedy: bool = False, seed: int = 0):
        self.params = params
        self.arch = arch
        self.city_id = city_id if city_id is not None else arch.cities[0]
        self.greedy = greedy
        self.rng = np.random.default_rng(seed)
        self._state = None
        self._prev_action = -1
        self._prev_reward = 0.0
        self._last_out = None

    def begin_episode(self, actor_env) -> None:
        self._state = agents.initial_state(self.arch, 1)
        self._prev_action = -1
        self._prev_reward = 0.0
        self._last_out = None

    def act(self, actor_env, obs, goal_code) -> int:
        with nn.no_grad():
            out = agents.agent_forward(
                self.params, self.arch, self.city_id,
                obs[None], np.asarray(goal_code, np.float32)[None],
                _onehot_prev(self._prev_action), np.array([[self._prev_reward]], np.float32),
                self._state,
            )
        self._state = out.state
        self._last_out = out
        if self.greedy:
            action = int(np.argmax(out.policy_logits.data[0]))
        else:
            action = int(agents.sample_actions(out.policy_logits.data, self.rng)[0])
        self._prev_action = action
        return action

    def observe_reward(self, clipped_reward: float) -> None:
        self._prev_reward = clipped_reward

    def note_action(self, action: int) -> None:
        """Override the remembered action when another policy drives."""
        self._prev_action = int(action)

    def value_estimate(self) -> float:
        return float(self._last_out.value.data[0, 0])

    def goal_hidden(self) -> np.ndarray:
        """Goal-pathway hidden state (policy LSTM's for the goalless arch)."""
        st = self._state
        h = st.goal_h if st.goal_h is not None else st.policy_h
        return h.data[0].copy()


class OraclePolicy:
    """Shortest-path follower; ignores observations."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def begin_episode(self, actor_env) -> None:
        pass

    def act(self, actor_env, obs, goal_code) -> int:
        env = actor_env.env
        return int(agents.oracle_policy(env.graph, env.state.pose, env.state.goal,
                                        env.config.view_cone_deg))

    def observe_reward(self, clipped_reward: float) -> None:
        pass


class HeuristicPolicy:
    """Random walk with forward bias and intersection turns."""

    def __init__(self, seed: int = 0, p_turn: float = 0.95):
        self.rng = np.random.default_rng(seed)
        self.p_turn = p_turn

    def begin_episode(self, actor_env) -> None:
        pass

    def act(self, actor_env, obs, goal_code) -> int:
        env = actor_env.env
        at_intersection, can_forward = agents.heuristic_view(
            env.graph, env.state.pose, env.config.view_cone_deg
        )
        return int(agents.heuristic_policy(at_intersection, can_forward, self.rng, self.p_turn))

    def observe_reward(self, clipped_reward: float) -> None:
        pass


def _onehot_prev(action: int) -> np.ndarray:
    out = np.zeros((1, 5), np.float32)
    if action >= 0:
        out[0, action] = 1.0
    return out


# ---------------------------------------------------------------- rollouts

def run_episodes(policy, actor_env, episodes: int, lattice_headings: bool = True,
                 collect_hidden: bool = False, hidden_cfg=None):
    """Roll full episodes; returns (records, hidden_samples).

    records: one trajectory dict per step incl. the reset row (action None).
    hidden_samples: per-step probe rows when collect_hidden (learned policies).
    """
    records = []
    hidden = [] if collect_hidden else None
    env = actor_env.env
    for _ in range(episodes):
        obs, goal_code, _ = actor_env.reset(lattice_headings)
        policy.begin_episode(actor_env)
        records.append(env.record(None, actor_env.last_result))
        done = False
        while not done:
            if collect_hidden:
                pre_pose, pre_goal = env.state.pose, env.state.goal
            action = policy.act(actor_env, obs, goal_code)
            if collect_hidden:
                hidden.append(_probe_row(policy, env.graph, pre_pose, pre_goal))
            obs, goal_code, reward, _, done, _ = actor_env.step(action)
            policy.observe_reward(min(reward, 1.0))
            records.append(env.record(action, actor_env.last_result))
    return records, hidden


def _probe_row(policy, graph, pose, goal) -> dict:
    agent_pos = graph.position(pose.node)
    off = bearing_deg(agent_pos, goal.pos) - pose.heading
    off = (off + 180.0) % 360.0 - 180.0
    return {
        "hidden": policy.goal_hidden(),
        "agent_lat": agent_pos.lat,
        "agent_lon": agent_pos.lon,
        "goal_lat": goal.pos.lat,
        "goal_lon": goal.pos.lon,
        "direction_deg": off,
        "heading": pose.heading,
        "node": pose.node,
        "goal_node": goal.node,
    }


# --------------------------------------------------- metrics from records

@dataclass
class EvalReport:
    episodes: int
    mean_episode_goal_reward: float
    sd_episode_goal_reward: float
    fail_rate: float
    half_trip_steps: float
    goals_assigned: int
    goals_reached: int
    half_trips_measured: int
    per_seed: list = field(default_factory=list)

    def __post_init__(self):
        if not (math.isnan(self.fail_rate) or 0.0 <= self.fail_rate <= 1.0):
            raise ValueError("fail_rate outside [0, 1]")

    def as_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "mean_episode_goal_reward": self.mean_episode_goal_reward,
            "sd_episode_goal_reward": self.sd_episode_goal_reward,
            "fail_rate": self.fail_rate,
            "half_trip_steps": self.half_trip_steps,
            "goals_assigned": self.goals_assigned,
            "goals_reached": self.goals_reached,
            "half_trips_measured": self.half_trips_measured,
            "per_seed": self.per_seed,
        }


def split_episodes(records: list) -> list:
    episodes, current = [], []
    for rec in records:
        if rec["action"] is None and current:
            episodes.append(current)
            current = []
        current.append(rec)
    if current:
        episodes.append(current)
    return episodes


def _goal_segments(episode: list) -> list:
    """(start_record, reward_records...) runs per assigned goal. A goal_reward
    > 0 row closes the current segment and opens the next (the env reassigns
    in the same step)."""
    segments = []
    start = episode[0]
    body = []
    for rec in episode[1:]:
        body.append(rec)
        if rec["goal_reward"] > 0.0:
            segments.append({"start": start, "body": body, "reached": True})
            start = rec
            body = []
    if body:
        segments.append({"start": start, "body": body, "reached": False})
    return segments


def report_from_records(records: list, fail_grace_steps=None) -> EvalReport:
    """All courier metrics, recomputable from a dumped trajectory log.

    A goal still pending at episode end counts as failed only when the agent
    had it at least `fail_grace_steps` steps (default: half the episode);
    shorter truncated tails leave the denominator.
    """
    episodes = split_episodes(records)
    if not episodes:
        raise InsufficientData("no episodes in records")
    ep_rewards = []
    assigned = reached = 0
    half_steps = []
    for ep in episodes:
        ep_rewards.append(sum(r["goal_reward"] for r in ep))
        grace = fail_grace_steps
        if grace is None:
            grace = max(1, (ep[-1]["step"] - ep[0]["step"]) // 2)
        for seg in _goal_segments(ep):
            d0 = seg["start"]["dist_to_goal_m"]
            opportunity = seg["body"][-1]["step"] - seg["start"]["step"]
            if seg["reached"]:
                assigned += 1
                reached += 1
            elif opportunity >= grace:
                assigned += 1
            else:
                continue
            for rec in seg["body"]:
                if rec["dist_to_goal_m"] <= d0 / 2.0:
                    half_steps.append(rec["step"] - seg["start"]["step"])
                    break
    fail_rate = (assigned - reached) / assigned if assigned else math.nan
    return EvalReport(
        episodes=len(episodes),
        mean_episode_goal_reward=float(np.mean(ep_rewards)),
        sd_episode_goal_reward=float(np.std(ep_rewards)),
        fail_rate=fail_rate,
        half_trip_steps=float(np.mean(half_steps)) if half_steps else math.nan,
        goals_assigned=assigned,
        goals_reached=reached,
        half_trips_measured=len(half_steps),
    )


def evaluate(policy, actor_env, episodes: int, lattice_headings: bool = True,
             fail_grace_steps=None):
    """Frozen-weights evaluation; returns (EvalReport, trajectory records)."""
    records, _ = run_episodes(policy, actor_env, episodes, lattice_headings)
    return report_from_records(records, fail_grace_steps), records


def merge_seed_reports(reports: dict) -> EvalReport:
    """Aggregate per-seed reports; episode stats pool with equal seed weight."""
    if not reports:
        raise InsufficientData("no per-seed reports")
    rs = list(reports.values())
    merged = EvalReport(
        episodes=sum(r.episodes for r in rs),
        mean_episode_goal_reward=float(np.mean([r.mean_episode_goal_reward for r in rs])),
        sd_episode_goal_reward=float(np.std([r.mean_episode_goal_reward for r in rs])),
        fail_rate=float(np.mean([r.fail_rate for r in rs])),
        half_trip_steps=float(np.nanmean([r.half_trip_steps for r in rs])),
        goals_assigned=sum(r.goals_assigned for r in rs),
        goals_reached=sum(r.goals_reached for r in rs),
        half_trips_measured=sum(r.half_trips_measured for r in rs),
        per_seed=[{"seed": s, **r.as_dict()} for s, r in sorted(reports.items())],
    )
    return merged


# ------------------------------------------------------- steps vs distance

def steps_vs_distance(policy, actor_env, n_starts: int = 100, goal_node=None, seed: int = 0):
    """Fixed goal, varied starts: (straight_line_m, steps to first arrival).

    Censored runs (episode ends first) are reported but excluded from the
    least-squares fit.
    """
    env = actor_env.env
    rng = np.random.default_rng(seed)
    nodes = list(env.graph.node_ids)
    if goal_node is None:
        goal_node = nodes[int(rng.integers(len(nodes)))]
    goal_pos = env.graph.position(goal_node)
    pairs, censored = [], 0
    for _ in range(n_starts):
        start = goal_node
        while start == goal_node:
            start = nodes[int(rng.integers(len(nodes)))]
        obs, goal_code, _ = actor_env.reset(start_node=start, goal_node=goal_node)
        policy.begin_episode(actor_env)
        straight = haversine_m(env.graph.position(start), goal_pos)
        steps = 0
        reached = False
        done = False
        while not done:
            action = policy.act(actor_env, obs, goal_code)
            obs, goal_code, reward, goal_reward, done, _ = actor_env.step(action)
            policy.observe_reward(min(reward, 1.0))
            steps += 1
            if goal_reward > 0.0:
                reached = True
                break
        if reached:
            pairs.append((straight, steps))
        else:
            censored += 1
    fit = {"slope": math.nan, "intercept": math.nan, "r_squared": math.nan}
    if len(pairs) >= 2:
        xs = np.array([p[0] for p in pairs])
        ys = np.array([p[1] for p in pairs], dtype=np.float64)
        slope, intercept = np.polyfit(xs, ys, 1)
        pred = slope * xs + intercept
        ss_res = float(np.sum((ys - pred) ** 2))
        ss_tot = float(np.sum((ys - ys.mean()) ** 2))
        fit = {
            "slope": float(slope),
            "intercept": float(intercept),
            "r_squared": 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan,
        }
    return {"goal_node": goal_node, "pairs": pairs, "censored": censored, **fit}


# --------------------------------------------------------------- value map

def value_map(critic: LearnedPolicy, behavior, actor_env, goal_node, n_trajectories: int = 100,
              lattice_headings: bool = True):
    """Mean critic value per visited node over rollouts toward a fixed goal.

    `behavior` picks actions (it may be the critic itself or a scripted
    policy); the critic's value head is read every step along the way.
    """
    env = actor_env.env
    sums: dict = {}
    visits: dict = {}
    total_steps = 0
    increase = approach = 0
    for _ in range(n_trajectories):
        obs, goal_code, _ = actor_env.reset(lattice_headings, goal_node=goal_node)
        critic.begin_episode(actor_env)
        if behavior is not critic:
            behavior.begin_episode(actor_env)
        prev_v = prev_d = None
        done = False
        while not done:
            node = env.state.pose.node
            dist = env.state.last_dist_to_goal
            if behavior is critic:
                action = critic.act(actor_env, obs, goal_code)
            else:
                critic.act(actor_env, obs, goal_code)
                action = behavior.act(actor_env, obs, goal_code)
                critic.note_action(action)
            v = critic.value_estimate()
            sums[node] = sums.get(node, 0.0) + v
            visits[node] = visits.get(node, 0) + 1
            total_steps += 1
            if prev_d is not None and dist < prev_d:
                approach += 1
                if v > prev_v:
                    increase += 1
            prev_v, prev_d = v, dist
            obs, goal_code, reward, goal_reward, done, _ = actor_env.step(action)
            critic.observe_reward(min(reward, 1.0))
            if goal_reward > 0.0:
                break
    rows = [
        {
            "node": node,
            "lat": env.graph.position(node).lat,
            "lon": env.graph.position(node).lon,
            "mean_value": sums[node] / visits[node],
            "visits": visits[node],
        }
        for node in sorted(sums)
    ]
    frac = increase / approach if approach else math.nan
    return {"rows": rows, "total_steps": total_steps, "approach_value_increase_frac": frac}


# ------------------------------------------------------------ probe suite

def position_bin(lat: float, lon: float, bbox, cell_m: float) -> int:
    """Flat index over the 2D grid the binned goal codec uses."""
    sw, ne = bbox
    n_lat, n_lon = binned_axis_sizes(bbox, cell_m)
    mid = math.radians((sw.lat + ne.lat) / 2.0)
    i_lat = int((lat - sw.lat) * METERS_PER_DEG_LAT // cell_m)
    i_lon = int((lon - sw.lon) * METERS_PER_DEG_LAT * math.cos(mid) // cell_m)
    i_lat = min(max(i_lat, 0), n_lat - 1)
    i_lon = min(max(i_lon, 0), n_lon - 1)
    return i_lat * n_lon + i_lon


def direction_bin(offset_deg: float, n_bins: int = 16) -> int:
    width = 360.0 / n_bins
    return int(((offset_deg % 360.0) + 1e-9) // width) % n_bins


def probe_dataset(hidden_rows: list, bbox, cell_m: float, n_direction_bins: int = 16):
    """Stack probe rollout rows into arrays: hidden [N,D] + three label sets."""
    if not hidden_rows:
        raise InsufficientData("no hidden rows")
    hid = np.stack([r["hidden"] for r in hidden_rows]).astype(np.float32)
    pos = np.array([position_bin(r["agent_lat"], r["agent_lon"], bbox, cell_m) for r in hidden_rows])
    goal = np.array([position_bin(r["goal_lat"], r["goal_lon"], bbox, cell_m) for r in hidden_rows])
    direc = np.array([direction_bin(r["direction_deg"], n_direction_bins) for r in hidden_rows])
    deg = np.array([r["direction_deg"] for r in hidden_rows], dtype=np.float64)
    n_lat, n_lon = binned_axis_sizes(bbox, cell_m)
    return {
        "hidden": hid,
        "position": pos,
        "goal": goal,
        "direction": direc,
        "direction_deg": deg,
        "n_position_bins": n_lat * n_lon,
        "n_direction_bins": n_direction_bins,
    }


def dump_hidden(path, dataset: dict) -> None:
    np.savez_compressed(
        path,
        schema_version=np.array([SCHEMA_VERSION]),
        **{k: np.asarray(v) for k, v in dataset.items()},
    )


def load_hidden(path) -> dict:
    with np.load(path) as z:
        out = {k: z[k] for k in z.files if k != "schema_version"}
    for k in ("n_position_bins", "n_direction_bins"):
        if k in out:
            out[k] = int(out[k])
    return out


@dataclass
class ProbeReport:
    n_train: int
    n_test: int
    position_accuracy: float
    position_chance: float
    position_p: float
    goal_accuracy: float
    goal_chance: float
    goal_p: float
    direction_mae_deg: float
    direction_p: float
    direction_chance_mae_deg: float = 90.0

    def __post_init__(self):
        for acc in (self.position_accuracy, self.goal_accuracy):
            if not 0.0 <= acc <= 1.0:
                raise ValueError("accuracy outside [0, 1]")
        if not 0.0 <= self.direction_mae_deg <= 180.0:
            raise ValueError("MAE outside [0, 180] degrees")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_train", "n_test", "position_accuracy", "position_chance", "position_p",
            "goal_accuracy", "goal_chance", "goal_p", "direction_mae_deg",
            "direction_chance_mae_deg", "direction_p",
        )}


def _mlp_params(rng, d_in: int, d_out: int, hidden: int = 128) -> nn.ParamSet:
    ps = nn.ParamSet()
    ps.add("fc1/w", nn.fanin_uniform(rng, (d_in, hidden)))
    ps.add("fc1/b", np.zeros(hidden, np.float32))
    ps.add("fc2/w", nn.fanin_uniform(rng, (hidden, d_out)))
    ps.add("fc2/b", np.zeros(d_out, np.float32))
    return ps


def _mlp_logits(ps, x: nn.Tensor) -> nn.Tensor:
    h = nn.relu(nn.linear(x, ps["fc1/w"], ps["fc1/b"]))
    return nn.linear(h, ps["fc2/w"], ps["fc2/b"])


def _fit_classifier(x, y, n_classes, epochs, lr, batch, seed):
    rng = np.random.default_rng(seed)
    ps = _mlp_params(rng, x.shape[1], n_classes)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch):
            idx = order[i : i + batch]
            logits = _mlp_logits(ps, nn.Tensor(x[idx]))
            loss = nn.scale(nn.tsum(nn.softmax_xent(logits, y[idx])), 1.0 / len(idx))
            ps.zero_grad()
            loss.backward()
            for name, t in ps.items():
                t.data -= (lr * t.grad).astype(t.data.dtype)
    return ps


def _predict(ps, x, batch=1024):
    outs = []
    with nn.no_grad():
        for i in range(0, x.shape[0], batch):
            outs.append(np.argmax(_mlp_logits(ps, nn.Tensor(x[i : i + batch])).data, axis=1))
    return np.concatenate(outs) if outs else np.zeros(0, np.int64)


def train_decoders(dataset: dict, min_samples: int = 200, test_fraction: float = 0.2,
                   epochs: int = 3, lr: float = 0.05, batch: int = 64, seed: int = 0) -> ProbeReport:
    """Offline probes on dumped hidden states: two position classifiers plus
    the egocentric-direction decoder. Chance for the classifiers is the test
    majority-class rate; direction chance is the 90-degree uniform MAE, tested
    via the fraction of errors under 90 degrees (null 0.5)."""
    x = np.asarray(dataset["hidden"], np.float32)
    n = x.shape[0]
    if n < min_samples:
        raise InsufficientData(f"{n} samples < {min_samples}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    test_idx, train_idx = order[:n_test], order[n_test:]

    def classifier_stats(key, n_classes, sub_seed):
        y = np.asarray(dataset[key], np.int64)
        ps = _fit_classifier(x[train_idx], y[train_idx], n_classes, epochs, lr, batch, sub_seed)
        pred = _predict(ps, x[test_idx])
        correct = int(np.sum(pred == y[test_idx]))
        acc = correct / len(test_idx)
        counts = np.bincount(y[test_idx], minlength=n_classes)
        chance = float(counts.max()) / len(test_idx)
        p = stats.binomtest(correct, len(test_idx), chance).pvalue
        return ps, acc, chance, float(p)

    _, pos_acc, pos_chance, pos_p = classifier_stats("position", dataset["n_position_bins"], seed + 11)
    _, goal_acc, goal_chance, goal_p = classifier_stats("goal", dataset["n_position_bins"], seed + 33)

    nbins = dataset["n_direction_bins"]
    y_dir = np.asarray(dataset["direction"], np.int64)
    ps_dir = _fit_classifier(x[train_idx], y_dir[train_idx], nbins, epochs, lr, batch, seed + 77)
    pred_bin = _predict(ps_dir, x[test_idx])
    width = 360.0 / nbins
    pred_deg = pred_bin * width + width / 2.0
    true_deg = np.asarray(dataset["direction_deg"], np.float64)[test_idx] % 360.0
    err = np.abs((pred_deg - true_deg + 180.0) % 360.0 - 180.0)
    mae = float(np.mean(err))
    under = int(np.sum(err < 90.0))
    dir_p = float(stats.binomtest(under, len(test_idx), 0.5).pvalue)

    return ProbeReport(
        n_train=len(train_idx), n_test=len(test_idx),
        position_accuracy=pos_acc, position_chance=pos_chance, position_p=pos_p,
        goal_accuracy=goal_acc, goal_chance=goal_chance, goal_p=goal_p,
        direction_mae_deg=mae, direction_p=dir_p,
    )


# -------------------------------------------------------- held-out tables

def heldout_table(entries: list, episodes: int = 10, fail_grace_steps=None) -> list:
    """Table rows over mask-cell sizes.

    Each entry: {"cell_m", "policy", "train_env", "test_env"}; train_env
    samples only unmasked goals, test_env only masked ones. Asserts the
    protocol: every evaluated test goal lies inside the mask.
    """
    rows = []
    for entry in entries:
        policy = entry["policy"]
        train_report, _ = evaluate(policy, entry["train_env"], episodes, fail_grace_steps=fail_grace_steps)
        test_report, test_records = evaluate(policy, entry["test_env"], episodes, fail_grace_steps=fail_grace_steps)
        masked = entry.get("masked_nodes")
        if masked is not None:
            goals = {r["goal_node"] for r in test_records}
            stray = goals - set(masked)
            if stray:
                raise AssertionError(f"test goals outside the mask: {sorted(stray)[:5]}")
        rows.append({
            "cell_m": entry["cell_m"],
            "train_reward": train_report.mean_episode_goal_reward,
            "test_reward": test_report.mean_episode_goal_reward,
            "fail_rate": test_report.fail_rate,
            "half_trip_steps": test_report.half_trip_steps,
        })
    return rows


def load_agent(checkpoint_path, arch: ArchConfig):
    """Build params for `arch` and load the checkpoint into them."""
    from pathlib import Path

    if not Path(checkpoint_path).exists():
        raise MissingCheckpoint(str(checkpoint_path))
    params = agents.build_params(arch, np.random.default_rng(0))
    try:
        loaded, meta = nn.load_params(checkpoint_path, params)
    except nn.CheckpointError as exc:
        raise CheckpointMismatch(str(exc)) from exc
    return loaded, meta


# ----------------------------------------------------------- report files

def write_json_report(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, **payload}, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_csv_report(path, rows: list, columns=None) -> None:
    import csv

    if not rows:
        raise InsufficientData("no rows to write")
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# streetsim report schema {SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([row.get(c, "") for c in columns])


def read_csv_report(path) -> list:
    import csv

    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [dict(r) for r in reader]


def write_trajectories(path, records: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_trajectories(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]

"""Policies: scripted baselines and the goal-conditional recurrent agents.

Three neural architectures share a convolutional encoder and a policy LSTM:

  goalnav        goal code fed straight into the policy LSTM
  citynav        adds a recurrent goal pathway (goal LSTM -> dropout ->
                 64-d tanh bottleneck) plus an optional heading-prediction
                 head; the policy LSTM sees the bottleneck and, with the
                 skip connection on, the visual features as well
  multicitynav   one goal pathway per city, everything else shared

Parameters are named so that pathway membership is a name-prefix test, which
is what transfer-time freezing keys on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import nn
from .citygraph import StreetGraph, Unreachable, bearing_deg, bfs_parents
from .courier import (
    N_ACTIONS,
    N_HEADING_BINS,
    ROTATION_DEG,
    Action,
    GoalSpec,
    Pose,
    select_forward_edge,
)

ARCHES = ("goalnav", "citynav", "multicitynav")


class UnknownCity(Exception):
    pass


class UnknownGroup(Exception):
    pass


@dataclass(frozen=True)
class ArchConfig:
    arch: str = "citynav"
    skip_connection: bool = False
    heading_aux: bool = True
    goal_dims: int = 0
    cities: tuple = ("city0",)
    obs_hw: int = 84
    conv1_maps: int = 16
    conv2_maps: int = 32
    fc_units: int = 256
    policy_units: int = 256
    goal_units: int = 256
    bottleneck_units: int = 64
    heading_hidden: int = 128
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.arch not in ARCHES:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.goal_dims < 0:
            raise ValueError("goal_dims must be >= 0")
        if self.arch != "goalnav":
            if not self.cities:
                raise ValueError(f"{self.arch} needs at least one city")
            if len(set(self.cities)) != len(self.cities):
                raise ValueError("duplicate city ids")
        if self.arch == "goalnav" and self.skip_connection:
            raise ValueError("goalnav feeds features to the policy LSTM directly; skip is meaningless")
        # VALID conv stack must fit the observation
        if self.conv_spatial() < 1:
            raise ValueError(f"observation {self.obs_hw} too small for the conv stack")

    def conv_spatial(self) -> int:
        s1 = (self.obs_hw - 8) // 4 + 1
        return (s1 - 4) // 2 + 1

    def conv_flat(self) -> int:
        return self.conv_spatial() ** 2 * self.conv2_maps

    def policy_input_dims(self) -> int:
        base = N_ACTIONS + 1  # prev action one-hot + prev reward
        if self.arch == "goalnav":
            return self.fc_units + self.goal_dims + base
        dims = self.bottleneck_units + base
        if self.skip_connection:
            dims += self.fc_units
        return dims

    def goal_input_dims(self) -> int:
        return self.fc_units + self.goal_dims

    def has_goal_pathway(self) -> bool:
        return self.arch in ("citynav", "multicitynav")


@dataclass
class AgentState:
    policy_h: nn.Tensor
    policy_c: nn.Tensor
    goal_h: "nn.Tensor | None" = None
    goal_c: "nn.Tensor | None" = None

    def detached(self) -> "AgentState":
        return AgentState(
            self.policy_h.detach(),
            self.policy_c.detach(),
            None if self.goal_h is None else self.goal_h.detach(),
            None if self.goal_c is None else self.goal_c.detach(),
        )


@dataclass
class AgentOutput:
    policy_logits: nn.Tensor
    value: nn.Tensor
    heading_logits: "nn.Tensor | None"
    state: AgentState
    features: "nn.Tensor | None" = None


def initial_state(cfg: ArchConfig, batch: int, dtype=np.float32) -> AgentState:
    z = lambda u: nn.Tensor(np.zeros((batch, u), dtype))
    state = AgentState(z(cfg.policy_units), z(cfg.policy_units))
    if cfg.has_goal_pathway():
        state.goal_h = z(cfg.goal_units)
        state.goal_c = z(cfg.goal_units)
    return state


def state_mask(state: AgentState, keep: np.ndarray) -> AgentState:
    """Zero rows where keep is 0 (episode boundaries in a batched roll)."""
    k = keep.reshape(-1, 1).astype(state.policy_h.dtype)
    mask = lambda t: None if t is None else nn.mul(t, nn.Tensor(k))
    return AgentState(
        mask(state.policy_h), mask(state.policy_c), mask(state.goal_h), mask(state.goal_c)
    )


def build_params(cfg: ArchConfig, rng, dtype=np.float32) -> nn.ParamSet:
    ps = nn.ParamSet()
    ps.add("conv/c1/w", nn.fanin_uniform(rng, (8, 8, 3, cfg.conv1_maps), dtype))
    ps.add("conv/c1/b", np.zeros(cfg.conv1_maps, dtype))
    ps.add("conv/c2/w", nn.fanin_uniform(rng, (4, 4, cfg.conv1_maps, cfg.conv2_maps), dtype))
    ps.add("conv/c2/b", np.zeros(cfg.conv2_maps, dtype))
    ps.add("conv/fc/w", nn.fanin_uniform(rng, (cfg.conv_flat(), cfg.fc_units), dtype))
    ps.add("conv/fc/b", np.zeros(cfg.fc_units, dtype))

    if cfg.has_goal_pathway():
        for city in cfg.cities:
            _add_city_pathway(ps, cfg, city, rng, dtype)

    pu = cfg.policy_units
    ps.add("policy/lstm/wx", nn.fanin_uniform(rng, (cfg.policy_input_dims(), 4 * pu), dtype))
    ps.add("policy/lstm/wh", nn.lstm_recurrent(rng, pu, dtype))
    ps.add("policy/lstm/b", nn.lstm_bias(pu, 1.0, dtype))
    ps.add("policy/pi/w", nn.fanin_uniform(rng, (pu, N_ACTIONS), dtype))
    ps.add("policy/pi/b", np.zeros(N_ACTIONS, dtype))
    ps.add("policy/v/w", nn.fanin_uniform(rng, (pu, 1), dtype))
    ps.add("policy/v/b", np.zeros(1, dtype))

    if cfg.heading_aux:
        src = cfg.goal_units if cfg.has_goal_pathway() else cfg.policy_units
        ps.add("heading/fc1/w", nn.fanin_uniform(rng, (src, cfg.heading_hidden), dtype))
        ps.add("heading/fc1/b", np.zeros(cfg.heading_hidden, dtype))
        ps.add("heading/fc2/w", nn.fanin_uniform(rng, (cfg.heading_hidden, N_HEADING_BINS), dtype))
        ps.add("heading/fc2/b", np.zeros(N_HEADING_BINS, dtype))
    return ps


def _add_city_pathway(ps: nn.ParamSet, cfg: ArchConfig, city: str, rng, dtype) -> None:
    gu = cfg.goal_units
    ps.add(f"goal/{city}/lstm/wx", nn.fanin_uniform(rng, (cfg.goal_input_dims(), 4 * gu), dtype))
    ps.add(f"goal/{city}/lstm/wh", nn.lstm_recurrent(rng, gu, dtype))
    ps.add(f"goal/{city}/lstm/b", nn.lstm_bias(gu, 1.0, dtype))
    ps.add(f"goal/{city}/bottleneck/w", nn.fanin_uniform(rng, (gu, cfg.bottleneck_units), dtype))
    ps.add(f"goal/{city}/bottleneck/b", np.zeros(cfg.bottleneck_units, dtype))


def add_city(params: nn.ParamSet, cfg: ArchConfig, city: str, rng, dtype=np.float32) -> ArchConfig:
    """Extend a multicitynav param set with a fresh locale pathway.

    Existing parameter values are untouched; returns the updated config.
    """
    if cfg.arch != "multicitynav":
        raise ValueError("add_city applies to multicitynav")
    if city in cfg.cities:
        raise ValueError(f"city {city!r} already present")
    _add_city_pathway(params, cfg, city, rng, dtype)
    return dataclasses.replace(cfg, cities=cfg.cities + (city,))


def pathway_grouping(cfg: ArchConfig, params: nn.ParamSet) -> dict:
    """Total, disjoint partition of parameter names into named groups."""
    groups = {
        "convnet": params.subset("conv/"),
        "policy_lstm": params.subset("policy/"),
    }
    if cfg.has_goal_pathway():
        for city in cfg.cities:
            groups[f"goal_lstm/{city}"] = params.subset(f"goal/{city}/")
    if cfg.heading_aux:
        groups["heads"] = params.subset("heading/")
    covered = [n for names in groups.values() for n in names]
    if sorted(covered) != sorted(params.names()) or len(covered) != len(set(covered)):
        raise ValueError("grouping is not a partition of the parameter set")
    return groups


def apply_freeze(grouping: dict, frozen, grads: dict) -> dict:
    """Zero gradients of every parameter in the frozen groups.

    Gradients were already backpropagated through the frozen modules, so
    upstream trainable parameters keep their full gradient signal.
    """
    frozen = set(frozen)
    unknown = frozen - set(grouping)
    if unknown:
        raise UnknownGroup(f"not pathway groups: {sorted(unknown)}")
    blocked = {name for g in frozen for name in grouping[g]}
    return {n: (None if n in blocked else g) for n, g in grads.items()}


def frozen_names(grouping: dict, frozen) -> list:
    frozen = set(frozen)
    unknown = frozen - set(grouping)
    if unknown:
        raise UnknownGroup(f"not pathway groups: {sorted(unknown)}")
    return sorted(name for g in frozen for name in grouping[g])


def conv_features(params: nn.ParamSet, cfg: ArchConfig, obs) -> nn.Tensor:
    """obs [B,H,H,3] float in [0,1] -> relu FC features [B, fc_units]."""
    x = nn.as_tensor(obs)
    z = nn.relu(nn.conv2d(x, params["conv/c1/w"], params["conv/c1/b"], stride=4))
    z = nn.relu(nn.conv2d(z, params["conv/c2/w"], params["conv/c2/b"], stride=2))
    z = nn.reshape(z, (z.shape[0], cfg.conv_flat()))
    return nn.relu(nn.linear(z, params["conv/fc/w"], params["conv/fc/b"]))


def _policy_heads(params, h: nn.Tensor):
    logits = nn.linear(h, params["policy/pi/w"], params["policy/pi/b"])
    value = nn.linear(h, params["policy/v/w"], params["policy/v/b"])
    return logits, value


def _heading_head(params, h: nn.Tensor) -> nn.Tensor:
    z = nn.relu(nn.linear(h, params["heading/fc1/w"], params["heading/fc1/b"]))
    return nn.linear(z, params["heading/fc2/w"], params["heading/fc2/b"])


def goalnav_forward(
    params: nn.ParamSet,
    cfg: ArchConfig,
    obs,
    goal_code,
    prev_action_onehot,
    prev_reward,
    state: AgentState,
) -> AgentOutput:
    f = conv_features(params, cfg, obs)
    x = nn.concat([f, nn.as_tensor(goal_code), nn.as_tensor(prev_action_onehot), nn.as_tensor(prev_reward)], axis=1)
    h, c = nn.lstm_step(x, state.policy_h, state.policy_c, params["policy/lstm/wx"], params["policy/lstm/wh"], params["policy/lstm/b"])
    logits, value = _policy_heads(params, h)
    heading = _heading_head(params, h) if cfg.heading_aux else None
    return AgentOutput(logits, value, heading, AgentState(h, c), features=f)


def multicitynav_forward(
    params: nn.ParamSet,
    cfg: ArchConfig,
    city_id: str,
    obs,
    goal_code,
    prev_action_onehot,
    prev_reward,
    state: AgentState,
    train_mode: bool = False,
    rng=None,
) -> AgentOutput:
    if city_id not in cfg.cities:
        raise UnknownCity(f"{city_id!r} not in {cfg.cities}")
    if train_mode and cfg.dropout_p > 0.0 and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")
    f = conv_features(params, cfg, obs)
    gin = nn.concat([f, nn.as_tensor(goal_code)], axis=1)
    gh, gc = nn.lstm_step(
        gin,
        state.goal_h,
        state.goal_c,
        params[f"goal/{city_id}/lstm/wx"],
        params[f"goal/{city_id}/lstm/wh"],
        params[f"goal/{city_id}/lstm/b"],
    )
    z = nn.tanh(gh)
    z = nn.dropout(z, cfg.dropout_p, train_mode, rng)
    bottleneck = nn.tanh(
        nn.linear(z, params[f"goal/{city_id}/bottleneck/w"], params[f"goal/{city_id}/bottleneck/b"])
    )
    pieces = [bottleneck]
    if cfg.skip_connection:
        pieces.append(f)
    pieces += [nn.as_tensor(prev_action_onehot), nn.as_tensor(prev_reward)]
    x = nn.concat(pieces, axis=1)
    h, c = nn.lstm_step(x, state.policy_h, state.policy_c, params["policy/lstm/wx"], params["policy/lstm/wh"], params["policy/lstm/b"])
    logits, value = _policy_heads(params, h)
    heading = _heading_head(params, gh) if cfg.heading_aux else None
    return AgentOutput(logits, value, heading, AgentState(h, c, gh, gc), features=f)


def citynav_forward(
    params: nn.ParamSet,
    cfg: ArchConfig,
    obs,
    goal_code,
    prev_action_onehot,
    prev_reward,
    state: AgentState,
    train_mode: bool = False,
    rng=None,
) -> AgentOutput:
    return multicitynav_forward(
        params, cfg, cfg.cities[0], obs, goal_code, prev_action_onehot, prev_reward, state, train_mode, rng
    )


def agent_forward(params, cfg: ArchConfig, city_id, obs, goal_code, prev_action_onehot, prev_reward, state, train_mode=False, rng=None) -> AgentOutput:
    """Arch-dispatching forward; city_id is ignored for goalnav."""
    if cfg.arch == "goalnav":
        return goalnav_forward(params, cfg, obs, goal_code, prev_action_onehot, prev_reward, state)
    return multicitynav_forward(params, cfg, city_id, obs, goal_code, prev_action_onehot, prev_reward, state, train_mode, rng)


def sample_actions(logits: np.ndarray, rng) -> np.ndarray:
    """Per-row categorical draw from softmax(logits)."""
    p = nn.softmax_np(logits)
    u = rng.random((p.shape[0], 1))
    return np.argmax(u < np.cumsum(p, axis=1), axis=1)


def one_hot(indices, width: int, dtype=np.float32) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    out = np.zeros((idx.size, width), dtype)
    out[np.arange(idx.size), idx] = 1.0
    return out


ROTATION_ACTIONS = (Action.SLOW_LEFT, Action.SLOW_RIGHT, Action.FAST_LEFT, Action.FAST_RIGHT)


def heuristic_policy(at_intersection: bool, can_forward: bool, rng, p_turn: float = 0.95) -> Action:
    """Random-walk baseline: mostly turns at intersections, always turns when
    blocked, otherwise rolls forward."""
    if not can_forward:
        return ROTATION_ACTIONS[rng.integers(4)]
    if at_intersection and rng.random() < p_turn:
        return ROTATION_ACTIONS[rng.integers(4)]
    return Action.FORWARD


def heuristic_view(graph: StreetGraph, pose: Pose, view_cone_deg: float = 60.0) -> tuple:
    """(at_intersection, can_forward) as the scripted baseline sees them."""
    at_intersection = graph.degree(pose.node) >= 3
    can_forward = select_forward_edge(graph, pose.node, pose.heading, view_cone_deg) is not None
    return at_intersection, can_forward


def _signed_offset(bearing: float, heading: float) -> float:
    return (bearing - heading + 180.0) % 360.0 - 180.0


def oracle_policy(graph: StreetGraph, pose: Pose, goal: GoalSpec, view_cone_deg: float = 60.0) -> Action:
    """Greedy shortest-path follower: face the BFS next hop, then go."""
    if pose.node == goal.node:
        return Action.FORWARD
    parents = bfs_parents(graph, goal.node)
    if pose.node not in parents:
        raise Unreachable(f"no path {pose.node} -> {goal.node}")
    nxt = parents[pose.node]
    offset = _signed_offset(bearing_deg(graph.position(pose.node), graph.position(nxt)), pose.heading)
    if abs(offset) <= view_cone_deg / 2.0:
        # the cone may admit a more central competitor edge; rotate until the
        # target hop is the most central one
        best = None
        for nbr in graph.neighbors(pose.node):
            off = _signed_offset(graph.edge_bearing(pose.node, nbr), pose.heading)
            if abs(off) <= view_cone_deg / 2.0:
                key = (abs(off), off, nbr)
                if best is None or key < best[0]:
                    best = (key, nbr)
        if best is not None and best[1] == nxt:
            return Action.FORWARD
    return min(ROTATION_ACTIONS, key=lambda a: (abs(offset - ROTATION_DEG[a]), int(a)))

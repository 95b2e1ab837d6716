"""The courier task: pose and motion on a street graph, goals and rewards.

An agent stands at a graph node with a continuous heading. Rotation actions
turn it in place; Forward traverses the incident edge nearest to its heading,
if one lies within the view cone. Goals are graph nodes sampled within a
curriculum radius; reaching one (within `goal_radius_m`) pays a reward
proportional to the shortest-path distance at assignment time and immediately
samples the next goal. Near-goal shaping pays a once-per-node bonus that
ramps linearly inside `early_reward_m`, only while closing in.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from streetsim.citygraph import (
    METERS_PER_DEG_LAT,
    LatLong,
    StreetGraph,
    haversine_m,
    shortest_path_m,
)
from streetsim.panorama import PanoramaCache

logger = logging.getLogger(__name__)

N_ACTIONS = 5
HEADING_BIN_DEG = 22.5
N_HEADING_BINS = 16


class Action(IntEnum):
    SLOW_LEFT = 0
    SLOW_RIGHT = 1
    FAST_LEFT = 2
    FAST_RIGHT = 3
    FORWARD = 4


ROTATION_DEG = {
    Action.SLOW_LEFT: -22.5,
    Action.SLOW_RIGHT: 22.5,
    Action.FAST_LEFT: -67.5,
    Action.FAST_RIGHT: 67.5,
    Action.FORWARD: 0.0,
}


class CourierError(Exception):
    pass


class NoLandmarks(CourierError):
    pass


class OutOfBounds(CourierError):
    pass


class EpisodeFinished(CourierError):
    pass


@dataclass(frozen=True)
class CurriculumConfig:
    """Goal-radius schedule. phase*_steps of 0 means 'derive from the training budget'."""

    start_m: float = 500.0
    max_range_m: float = 3500.0
    phase1_steps: int = 0
    phase2_steps: int = 0


@dataclass(frozen=True)
class HeldoutConfig:
    cell_deg: float = 0.0
    fraction: float = 0.0


@dataclass(frozen=True)
class CoinsConfig:
    fraction: float = 0.0
    reward: float = 0.5


@dataclass(frozen=True)
class CourierConfig:
    alpha: float = 0.002
    goal_codec: str = "landmark"
    landmark_subsample: float = 1.0
    view_cone_deg: float = 60.0
    early_reward_m: float = 200.0
    goal_radius_m: float = 100.0
    episode_len: int = 1000
    goal_reward_scale: float = 100.0
    bin_size_m: float = 100.0
    seed: int = 0
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    heldout: HeldoutConfig = field(default_factory=HeldoutConfig)
    coins: CoinsConfig = field(default_factory=CoinsConfig)

    def __post_init__(self):
        if self.alpha <= 0:
            raise CourierError("alpha must be > 0")
        if self.goal_codec not in ("landmark", "scalar", "binned", "none"):
            raise CourierError(f"unknown goal_codec {self.goal_codec!r}")
        if not (0.0 < self.landmark_subsample <= 1.0):
            raise CourierError("landmark_subsample must lie in (0, 1]")
        if not (0.0 < self.view_cone_deg <= 360.0):
            raise CourierError("view_cone_deg must lie in (0, 360]")
        if self.goal_radius_m <= 0 or self.early_reward_m <= self.goal_radius_m:
            raise CourierError("need early_reward_m > goal_radius_m > 0")
        if self.episode_len < 1:
            raise CourierError("episode_len must be >= 1")
        if self.goal_reward_scale <= 0:
            raise CourierError("goal_reward_scale must be > 0")
        if self.bin_size_m <= 0:
            raise CourierError("bin_size_m must be > 0")


@dataclass(frozen=True)
class Pose:
    node: str
    heading: float  # degrees clockwise from true north, in [0, 360)


@dataclass(frozen=True)
class GoalSpec:
    node: str
    pos: LatLong
    reward_at_goal: float
    assigned_at_step: int
    shortest_path_at_assignment: float

    def __post_init__(self):
        if self.reward_at_goal <= 0:
            raise CourierError("reward_at_goal must be > 0")


@dataclass
class StepResult:
    observation: np.ndarray | None
    goal_code: np.ndarray
    reward: float
    goal_reward: float
    done: bool
    info: dict


@dataclass
class CourierState:
    pose: Pose
    goal: GoalSpec
    step: int
    curriculum_radius: float
    shaping_claimed: set
    last_dist_to_goal: float
    episode_return: float
    coins_remaining: dict


def normalize_heading(heading: float) -> float:
    h = math.fmod(heading, 360.0)
    if h < 0:
        h += 360.0
    return h if h < 360.0 else 0.0  # fmod rounding can land exactly on 360


def heading_bin(heading: float) -> int:
    if not math.isfinite(heading):
        raise CourierError(f"heading must be finite, got {heading}")
    return min(int(normalize_heading(heading) / HEADING_BIN_DEG), N_HEADING_BINS - 1)


def shaping_fraction(d_m: float, early_reward_m: float = 200.0, goal_radius_m: float = 100.0) -> float:
    """Ramp factor for the near-goal shaping bonus at distance d_m.

    0 at and beyond early_reward_m, 1 at and inside goal_radius_m, linear in
    between. At the default radii this is max(0, min(1, (200 - d) / 100)).
    """
    ramp = (early_reward_m - d_m) / (early_reward_m - goal_radius_m)
    return max(0.0, min(1.0, ramp))


def subsample_landmarks(landmarks, fraction: float):
    """Deterministic density reduction: every k-th landmark for fraction 1/k."""
    if not (0.0 < fraction <= 1.0):
        raise CourierError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return list(landmarks)
    stride = max(1, int(round(1.0 / fraction)))
    return list(landmarks)[::stride]


def encode_goal_landmark(goal: LatLong, landmarks, alpha: float) -> np.ndarray:
    """Softmax over negatively scaled distances to each landmark.

    Stabilized by subtracting the max exponent, so any uniform shift of the
    distances leaves the code unchanged.
    """
    if len(landmarks) == 0:
        raise NoLandmarks("landmark goal code needs at least one landmark")
    if alpha <= 0:
        raise CourierError("alpha must be > 0")
    d = np.array([haversine_m(goal, lm) for lm in landmarks])
    z = -alpha * d
    z -= z.max()
    e = np.exp(z)
    return (e / e.sum()).astype(np.float64)


def encode_goal_scalar(goal: LatLong, bbox: tuple[LatLong, LatLong]) -> np.ndarray:
    sw, ne = bbox
    if not (sw.lat <= goal.lat <= ne.lat and sw.lon <= goal.lon <= ne.lon):
        raise OutOfBounds(f"goal {goal} outside bbox {bbox}")
    dlat = ne.lat - sw.lat
    dlon = ne.lon - sw.lon
    return np.array(
        [
            (goal.lat - sw.lat) / dlat if dlat > 0 else 0.0,
            (goal.lon - sw.lon) / dlon if dlon > 0 else 0.0,
        ]
    )


def binned_axis_sizes(bbox: tuple[LatLong, LatLong], bin_size_m: float) -> tuple[int, int]:
    sw, ne = bbox
    mid_lat = math.radians((sw.lat + ne.lat) / 2.0)
    extent_lat_m = (ne.lat - sw.lat) * METERS_PER_DEG_LAT
    extent_lon_m = (ne.lon - sw.lon) * METERS_PER_DEG_LAT * math.cos(mid_lat)
    # the 1e-9 guard keeps float noise at exact-multiple extents from adding a bin
    return (
        max(1, int(math.ceil(extent_lat_m / bin_size_m - 1e-9))),
        max(1, int(math.ceil(extent_lon_m / bin_size_m - 1e-9))),
    )


def encode_goal_binned(goal: LatLong, bbox: tuple[LatLong, LatLong], bin_size_m: float) -> np.ndarray:
    """Two concatenated one-hot vectors over bin_size_m cells per axis."""
    if bin_size_m <= 0:
        raise CourierError("bin_size_m must be > 0")
    sw, ne = bbox
    if not (sw.lat <= goal.lat <= ne.lat and sw.lon <= goal.lon <= ne.lon):
        raise OutOfBounds(f"goal {goal} outside bbox {bbox}")
    n_lat, n_lon = binned_axis_sizes(bbox, bin_size_m)
    mid_lat = math.radians((sw.lat + ne.lat) / 2.0)
    off_lat_m = (goal.lat - sw.lat) * METERS_PER_DEG_LAT
    off_lon_m = (goal.lon - sw.lon) * METERS_PER_DEG_LAT * math.cos(mid_lat)
    i_lat = min(int(off_lat_m // bin_size_m), n_lat - 1)
    i_lon = min(int(off_lon_m // bin_size_m), n_lon - 1)
    code = np.zeros(n_lat + n_lon)
    code[i_lat] = 1.0
    code[n_lat + i_lon] = 1.0
    return code


def goal_code_dim(config: CourierConfig, n_landmarks: int, bbox: tuple[LatLong, LatLong]) -> int:
    if config.goal_codec == "landmark":
        return len(subsample_landmarks(range(n_landmarks), config.landmark_subsample))
    if config.goal_codec == "scalar":
        return 2
    if config.goal_codec == "binned":
        n_lat, n_lon = binned_axis_sizes(bbox, config.bin_size_m)
        return n_lat + n_lon
    return 0


def curriculum_radius(step_count: int, config: CurriculumConfig) -> float:
    """Phase 1: constant start radius. Phase 2: linear ramp to the max. Then flat."""
    if step_count < 0:
        raise CourierError("step_count must be >= 0")
    if step_count < config.phase1_steps:
        return config.start_m
    t = step_count - config.phase1_steps
    if config.phase2_steps > 0 and t < config.phase2_steps:
        frac = t / config.phase2_steps
        return config.start_m + (config.max_range_m - config.start_m) * frac
    return config.max_range_m


def resolve_curriculum(config: CurriculumConfig, total_steps: int) -> CurriculumConfig:
    """Fill auto phase lengths: 10% of the budget flat, 60% ramping."""
    phase1 = config.phase1_steps if config.phase1_steps > 0 else int(0.10 * total_steps)
    phase2 = config.phase2_steps if config.phase2_steps > 0 else int(0.60 * total_steps)
    return CurriculumConfig(
        start_m=config.start_m,
        max_range_m=config.max_range_m,
        phase1_steps=phase1,
        phase2_steps=phase2,
    )


def make_heldout_mask(graph: StreetGraph, cell_deg: float, holdout_fraction: float, rng) -> set:
    """Nodes covered by randomly chosen cell_deg x cell_deg squares.

    Cells are added until at least holdout_fraction of all nodes is covered,
    so coverage overshoots by at most one cell.
    """
    if cell_deg <= 0:
        raise CourierError("cell_deg must be > 0")
    if holdout_fraction <= 0:
        return set()
    sw, _ = graph.bbox()
    cells: dict[tuple[int, int], list[str]] = {}
    for nid in graph.node_ids:
        pos = graph.position(nid)
        key = (int((pos.lat - sw.lat) // cell_deg), int((pos.lon - sw.lon) // cell_deg))
        cells.setdefault(key, []).append(nid)
    order = sorted(cells)
    rng.shuffle(order)
    need = holdout_fraction * graph.num_nodes
    masked: set = set()
    for key in order:
        if len(masked) >= need:
            break
        masked.update(cells[key])
    return masked


def scatter_coins(graph: StreetGraph, coin_fraction: float, coin_reward: float, rng) -> dict:
    """One-time pickup rewards on a random subset of nodes."""
    if not (0.0 <= coin_fraction <= 1.0):
        raise CourierError("coin_fraction must lie in [0, 1]")
    n = int(round(coin_fraction * graph.num_nodes))
    if n == 0:
        return {}
    picked = rng.choice(np.array(graph.node_ids), size=n, replace=False)
    return {str(nid): coin_reward for nid in picked}


def select_forward_edge(graph: StreetGraph, node: str, heading: float, view_cone_deg: float):
    """Neighbor reached by Forward from this pose, or None.

    Eligible edges lie within view_cone_deg/2 of the heading; the most central
    one wins (ties: smaller signed offset, then smaller node id).
    """
    best = None
    for nbr in graph.neighbors(node):
        offset = graph.edge_bearing(node, nbr) - heading
        offset = (offset + 180.0) % 360.0 - 180.0  # signed, in (-180, 180]
        if abs(offset) > view_cone_deg / 2.0:
            continue
        key = (abs(offset), offset, nbr)
        if best is None or key < best[0]:
            best = (key, nbr)
    return None if best is None else best[1]


class CourierEnv:
    """One agent's courier task on a fixed graph.

    Owns its RNG; instances are independent and safe to run in parallel
    threads as long as each is driven by a single caller.
    `render_observations=False` skips the visual crop (observation None),
    for bulk simulation and scripted policies.
    """

    def __init__(
        self,
        graph: StreetGraph,
        landmarks,
        config: CourierConfig,
        panoramas: PanoramaCache | None = None,
        rng=None,
        render_observations: bool = True,
        heldout_nodes: set | None = None,
        coins: dict | None = None,
    ):
        self.graph = graph
        self.config = config
        self.landmarks = subsample_landmarks(landmarks, config.landmark_subsample)
        if config.goal_codec == "landmark" and len(self.landmarks) == 0:
            raise NoLandmarks("landmark goal codec configured but no landmarks given")
        if render_observations and panoramas is None:
            raise CourierError("render_observations=True needs a PanoramaCache")
        self._panoramas = panoramas
        self._render = render_observations
        self._rng = rng if rng is not None else np.random.default_rng(config.seed)
        self._bbox = graph.bbox()
        self._heldout = set(heldout_nodes) if heldout_nodes else set()
        if len(self._heldout) >= graph.num_nodes:
            raise CourierError("held-out mask covers every node")
        self._coins = dict(coins) if coins else {}
        self._curriculum_radius = config.curriculum.start_m
        self._state: CourierState | None = None
        self._goal_code: np.ndarray | None = None
        self._node_ids = np.array(graph.node_ids)

    @property
    def state(self) -> CourierState:
        if self._state is None:
            raise CourierError("environment not reset")
        return self._state

    @property
    def goal_code_dim(self) -> int:
        return goal_code_dim(self.config, len(self.landmarks), self._bbox)

    def set_curriculum_radius(self, radius_m: float) -> None:
        if radius_m <= 0:
            raise CourierError("curriculum radius must be > 0")
        self._curriculum_radius = radius_m
        if self._state is not None:
            self._state.curriculum_radius = radius_m

    def encode_goal(self, pos: LatLong) -> np.ndarray:
        cfg = self.config
        if cfg.goal_codec == "landmark":
            return encode_goal_landmark(pos, self.landmarks, cfg.alpha)
        if cfg.goal_codec == "scalar":
            return encode_goal_scalar(pos, self._bbox)
        if cfg.goal_codec == "binned":
            return encode_goal_binned(pos, self._bbox, cfg.bin_size_m)
        return np.zeros(0)

    def _observe(self, pose: Pose):
        if not self._render:
            return None
        return self._panoramas.observe(pose.node, pose.heading)

    def _sample_goal(self, node: str, at_step: int) -> GoalSpec:
        pos = self.graph.position(node)
        dists = self.graph.distances_from(pos)
        radius = self._curriculum_radius
        mask = dists <= radius
        mask[self.graph.index_of(node)] = False
        eligible = [nid for nid in self._node_ids[mask] if nid not in self._heldout]
        if not eligible:
            logger.warning(
                "no goal within %.0f m of %s outside the held-out mask; using nearest", radius, node
            )
            order = np.argsort(dists, kind="stable")
            eligible = [
                self._node_ids[i]
                for i in order
                if self._node_ids[i] != node and self._node_ids[i] not in self._heldout
            ][:1]
        goal_node = None
        for _ in range(10):
            goal_node = str(eligible[int(self._rng.integers(0, len(eligible)))])
            if dists[self.graph.index_of(goal_node)] > self.config.goal_radius_m:
                break
        spath = shortest_path_m(self.graph, node, goal_node)
        return GoalSpec(
            node=goal_node,
            pos=self.graph.position(goal_node),
            reward_at_goal=spath / self.config.goal_reward_scale,
            assigned_at_step=at_step,
            shortest_path_at_assignment=spath,
        )

    def reset(self, start_node: str | None = None, heading: float | None = None, goal_node: str | None = None) -> StepResult:
        """Begin a fresh episode. Any of start node, heading, and goal may be
        pinned (for scripted protocols); unset parts are drawn from the rng."""
        if start_node is None:
            node = str(self._node_ids[int(self._rng.integers(0, self.graph.num_nodes))])
        else:
            if start_node not in self.graph:
                raise CourierError(f"unknown start node {start_node!r}")
            node = start_node
        if heading is None:
            heading = float(self._rng.uniform(0.0, 360.0))
        else:
            heading = normalize_heading(heading)
        pose = Pose(node=node, heading=heading)
        if goal_node is None:
            goal = self._sample_goal(node, at_step=0)
        else:
            if goal_node not in self.graph or goal_node == node:
                raise CourierError(f"bad pinned goal node {goal_node!r}")
            spath = shortest_path_m(self.graph, node, goal_node)
            goal = GoalSpec(
                node=goal_node,
                pos=self.graph.position(goal_node),
                reward_at_goal=spath / self.config.goal_reward_scale,
                assigned_at_step=0,
                shortest_path_at_assignment=spath,
            )
        self._state = CourierState(
            pose=pose,
            goal=goal,
            step=0,
            curriculum_radius=self._curriculum_radius,
            shaping_claimed=set(),
            last_dist_to_goal=haversine_m(self.graph.position(node), goal.pos),
            episode_return=0.0,
            coins_remaining=dict(self._coins),
        )
        self._goal_code = self.encode_goal(goal.pos)
        return StepResult(
            observation=self._observe(pose),
            goal_code=self._goal_code,
            reward=0.0,
            goal_reward=0.0,
            done=False,
            info={
                "heading_bin": heading_bin(heading),
                "dist_to_goal_m": self._state.last_dist_to_goal,
                "goal_reached": False,
            },
        )

    def step(self, action) -> StepResult:
        s = self.state
        cfg = self.config
        if s.step >= cfg.episode_len:
            raise EpisodeFinished(f"episode already finished at step {s.step}")
        action = Action(action)

        node, heading = s.pose.node, s.pose.heading
        if action == Action.FORWARD:
            nbr = select_forward_edge(self.graph, node, heading, cfg.view_cone_deg)
            if nbr is not None:
                node = nbr
        else:
            heading = normalize_heading(heading + ROTATION_DEG[action])
        s.pose = Pose(node=node, heading=heading)
        s.step += 1

        reward = 0.0
        goal_reward = 0.0
        if node in s.coins_remaining:
            reward += s.coins_remaining.pop(node)

        d = haversine_m(self.graph.position(node), s.goal.pos)
        if d < s.last_dist_to_goal and d < cfg.early_reward_m and node not in s.shaping_claimed:
            shaping = shaping_fraction(d, cfg.early_reward_m, cfg.goal_radius_m) * s.goal.reward_at_goal
            if shaping > 0.0:
                reward += shaping
                s.shaping_claimed.add(node)

        goal_reached = d <= cfg.goal_radius_m
        if goal_reached:
            goal_reward = s.goal.reward_at_goal
            reward += goal_reward
            s.goal = self._sample_goal(node, at_step=s.step)
            s.shaping_claimed = set()
            s.last_dist_to_goal = haversine_m(self.graph.position(node), s.goal.pos)
            self._goal_code = self.encode_goal(s.goal.pos)
            d_report = s.last_dist_to_goal
        else:
            s.last_dist_to_goal = d
            d_report = d

        s.episode_return += reward
        done = s.step >= cfg.episode_len
        return StepResult(
            observation=self._observe(s.pose),
            goal_code=self._goal_code,
            reward=reward,
            goal_reward=goal_reward,
            done=done,
            info={
                "heading_bin": heading_bin(heading),
                "dist_to_goal_m": d_report,
                "goal_reached": goal_reached,
            },
        )

    def record(self, action, result: StepResult) -> dict:
        """JSON-lines trajectory record for the step just taken (None at reset)."""
        s = self.state
        pos = self.graph.position(s.pose.node)
        return {
            "step": s.step,
            "node": s.pose.node,
            "lat": pos.lat,
            "lon": pos.lon,
            "heading": s.pose.heading,
            "action": int(action) if action is not None else None,
            "reward": result.reward,
            "goal_reward": result.goal_reward,
            "goal_node": s.goal.node,
            "dist_to_goal_m": result.info["dist_to_goal_m"],
        }


class TrajectoryWriter:
    """Append-only JSON-lines trajectory log."""

    def __init__(self, path):
        self._f = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_trajectory(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]

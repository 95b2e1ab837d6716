"""Operator commands: build cities, train couriers, measure and dump results.

Every command owns one output directory. It writes a run manifest there
(manifest.json) carrying the full config snapshot, seeds, a build id, start
and end timestamps, and the list of every file the run produced, so a run is
reproducible from its manifest alone at a fixed build. A lock file enforces
one live run per directory; reports and checkpoints are written atomically
(temp file then rename). Commands never modify their inputs.

Config precedence everywhere: command-line overrides (`--set section.key=v`)
beat config-file entries (`--config`), which beat dataclass defaults. The
defaults encode the reference full-scale hyperparameters; desk-scale runs
override them (see demos/).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import subprocess
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, agents, evaluation, nn
from .agents import ArchConfig
from .citygraph import (
    METERS_PER_DEG_LAT,
    GraphError,
    LatLong,
    generate_synthetic_city,
    load_graph,
    load_landmarks,
    save_graph,
    save_landmarks,
)
from .configio import (
    ConfigError,
    _coerce,
    build_config,
    config_to_mapping,
    parse_config_file,
    parse_flag_overrides,
    write_config_file,
)
from .courier import (
    CourierConfig,
    CourierEnv,
    CourierError,
    goal_code_dim,
    make_heldout_mask,
)
from .evaluation import (
    HeuristicPolicy,
    LearnedPolicy,
    OraclePolicy,
    dump_hidden,
    evaluate,
    merge_seed_reports,
    probe_dataset,
    report_from_records,
    run_episodes,
    train_decoders,
    write_csv_report,
    write_json_report,
    write_trajectories,
)
from .panorama import (
    OBS_SIZE,
    PanoramaCache,
    PanoramaError,
    load_panoramas,
    render_city,
    save_panoramas,
)
from .training import (
    ActorEnv,
    TrainConfig,
    TrainLog,
    run_transfer_experiment,
    train_async,
    train_sync,
)

GRAPH_FILE = "graph.txt"
LANDMARK_FILE = "landmarks.txt"
CITY_CONFIG = "city.cfg"
PANO_DIR = "panoramas"


class MissingInput(Exception):
    """A required input file or directory does not exist."""


class LockHeld(Exception):
    pass


# ------------------------------------------------------------- run plumbing

def data_root(flag=None) -> Path:
    if flag:
        return Path(flag)
    env = os.environ.get("STREETSIM_DATA_DIR")
    return Path(env) if env else Path("streetsim-data")


def build_id() -> str:
    """git describe of the source tree when available, else the package version."""
    try:
        proc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if proc.returncode == 0 and proc.stdout.strip():
            return proc.stdout.strip()
    except OSError:
        pass
    return f"v{__version__}"


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def atomic_write_text(path, text: str) -> None:
    tmp = Path(f"{path}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def atomic_write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def atomic_json_report(path, payload: dict) -> None:
    tmp = f"{path}.tmp"
    write_json_report(tmp, payload)
    os.replace(tmp, path)


def atomic_csv_report(path, rows: list, columns=None) -> None:
    tmp = f"{path}.tmp"
    write_csv_report(tmp, rows, columns)
    os.replace(tmp, path)


class RunManifest:
    """Written at run start with finished_at null, rewritten complete at the end."""

    def __init__(self, out_dir, command: str, config: dict, seeds):
        self.path = Path(out_dir) / "manifest.json"
        self.payload = {
            "command": command,
            "config": {k: str(v) for k, v in sorted(config.items())},
            "seeds": [int(s) for s in seeds],
            "build": build_id(),
            "started_at": _utcnow(),
            "finished_at": None,
            "status": "running",
            "outputs": [],
        }
        atomic_write_json(self.path, self.payload)

    def add_outputs(self, *paths) -> None:
        base = self.path.parent
        for p in paths:
            rel = os.path.relpath(p, base)
            if rel not in self.payload["outputs"]:
                self.payload["outputs"].append(rel)

    def note(self, key: str, value) -> None:
        self.payload["config"][key] = str(value)

    def finalize(self, status: str = "completed") -> None:
        self.payload["finished_at"] = _utcnow()
        self.payload["status"] = status
        self.payload["outputs"].sort()
        atomic_write_json(self.path, self.payload)


@contextmanager
def run_lock(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeld(
            f"{lock} exists; another run owns this directory (remove the file if stale)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield out
    finally:
        try:
            lock.unlink()
        except OSError:
            pass


# ------------------------------------------------------ config resolution

_SECTIONS = ("train", "env", "arch")


def split_sections(mapping: dict) -> dict:
    out: dict = {s: {} for s in _SECTIONS}
    for key, value in mapping.items():
        head, dot, rest = key.partition(".")
        if not dot or head not in out or not rest:
            raise ConfigError(
                f"config key {key!r} must be section.key with section in {_SECTIONS}"
            )
        out[head][rest] = value
    return out


def section_configs(args) -> tuple:
    """(TrainConfig, CourierConfig, raw arch overrides) from file plus --set."""
    file_map = parse_config_file(args.config) if getattr(args, "config", None) else {}
    flag_map = parse_flag_overrides(getattr(args, "set", None) or [])
    by_file = split_sections(file_map)
    by_flag = split_sections(flag_map)
    train_cfg = build_config(TrainConfig, by_file["train"], by_flag["train"])
    env_cfg = build_config(CourierConfig, by_file["env"], by_flag["env"])
    arch_over = {**by_file["arch"], **by_flag["arch"]}
    return train_cfg, env_cfg, arch_over


_ARCH_FIELDS = {f.name: f.type for f in dataclasses.fields(ArchConfig)}


def arch_from_overrides(kind: str, cities, goal_dims: int, overrides: dict,
                        heading_aux=None, skip_connection=None) -> ArchConfig:
    kwargs: dict = {}
    for key, raw in overrides.items():
        if key in ("arch", "cities", "goal_dims"):
            raise ConfigError(f"arch.{key} comes from command flags, not overrides")
        if key not in _ARCH_FIELDS:
            raise ConfigError(f"unknown arch key {key!r}")
        kwargs[key] = _coerce(raw, _ARCH_FIELDS[key], f"arch.{key}")
    if heading_aux is not None:
        kwargs["heading_aux"] = heading_aux
    if skip_connection is not None:
        kwargs["skip_connection"] = skip_connection
    return ArchConfig(arch=kind, cities=tuple(cities), goal_dims=goal_dims, **kwargs)


def arch_payload(arch: ArchConfig) -> dict:
    payload = dataclasses.asdict(arch)
    payload["cities"] = list(arch.cities)
    return payload


def save_arch(path, arch: ArchConfig) -> None:
    atomic_write_json(path, arch_payload(arch))


def load_arch(path) -> ArchConfig:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"no architecture description at {p}")
    data = json.loads(p.read_text(encoding="utf-8"))
    data["cities"] = tuple(data["cities"])
    return ArchConfig(**data)


# ----------------------------------------------------------- city bundles

def city_dir(root, name: str) -> Path:
    return Path(root) / "cities" / name


def load_city(root, name: str):
    d = city_dir(root, name)
    gpath = d / GRAPH_FILE
    if not gpath.exists():
        raise MissingInput(f"city {name!r} not found at {d} (run build-city first)")
    graph = load_graph(gpath)
    landmarks = load_landmarks(d / LANDMARK_FILE)
    meta = parse_config_file(d / CITY_CONFIG) if (d / CITY_CONFIG).exists() else {}
    return graph, landmarks, meta


def city_panoramas(root, name: str, graph, meta: dict) -> PanoramaCache:
    """Stored panoramas when the bundle has them, else a deterministic render."""
    d = city_dir(root, name) / PANO_DIR
    if d.is_dir():
        return PanoramaCache(load_panoramas(d, graph))
    seed = int(meta.get("seed", 0))
    height = int(meta.get("pano_height", 64))
    return PanoramaCache(render_city(graph, seed=seed, height=height))


def place_landmarks(bbox, count: int, jitter: float, rng) -> list:
    """Uniform grid over the bbox, jittered per point, clipped to the bbox.

    The grid shape follows the bbox aspect ratio; the first `count` cells in
    row-major order each contribute one landmark.
    """
    if count < 1:
        raise ConfigError("landmark count must be >= 1")
    if not (0.0 <= jitter <= 1.0):
        raise ConfigError("landmark jitter must lie in [0, 1]")
    sw, ne = bbox
    ext_lat = ne.lat - sw.lat
    ext_lon = ne.lon - sw.lon
    if ext_lat > 0 and ext_lon > 0:
        n_lon = max(1, round(math.sqrt(count * ext_lon / ext_lat)))
    else:
        n_lon = count if ext_lon > 0 else 1
    n_lat = max(1, math.ceil(count / n_lon))
    while n_lat * n_lon < count:
        n_lon += 1
    cell_lat = ext_lat / n_lat
    cell_lon = ext_lon / n_lon
    out = []
    for idx in range(count):
        i, j = divmod(idx, n_lon)
        lat = sw.lat + (i + 0.5) * cell_lat + float(rng.uniform(-0.5, 0.5)) * jitter * cell_lat
        lon = sw.lon + (j + 0.5) * cell_lon + float(rng.uniform(-0.5, 0.5)) * jitter * cell_lon
        out.append(LatLong(min(max(lat, sw.lat), ne.lat), min(max(lon, sw.lon), ne.lon)))
    return out


# ------------------------------------------------------------ env assembly

def build_envs(cities_data: dict, env_cfg: CourierConfig, n_lanes: int, seed: int,
               blank_obs: bool, obs_hw: int, heldout: dict | None = None) -> list:
    """Round-robin ActorEnvs over the city list, one independent RNG per lane."""
    names = list(cities_data)
    envs = []
    for lane in range(n_lanes):
        name = names[lane % len(names)]
        graph, landmarks, panos = cities_data[name]
        env = CourierEnv(
            graph, landmarks, env_cfg,
            rng=np.random.default_rng([seed, lane]),
            render_observations=False,
            heldout_nodes=(heldout or {}).get(name),
        )
        envs.append(ActorEnv(
            env, None if blank_obs else panos, city_id=name,
            heading_rng=np.random.default_rng([seed, 7919, lane]),
            blank_obs_hw=obs_hw,
        ))
    return envs


def eval_actor_env(graph, landmarks, panos, env_cfg: CourierConfig, city: str, seed: int,
                   blank_obs: bool, obs_hw: int, heldout_nodes=None) -> ActorEnv:
    env = CourierEnv(
        graph, landmarks, env_cfg,
        rng=np.random.default_rng([seed, 104729]),
        render_observations=False,
        heldout_nodes=heldout_nodes,
    )
    ae = ActorEnv(
        env, None if blank_obs else panos, city_id=city,
        heading_rng=np.random.default_rng([seed, 31, 7]),
        blank_obs_hw=obs_hw,
    )
    # evaluation always samples goals over the full range
    ae.set_curriculum_radius(env_cfg.curriculum.max_range_m)
    return ae


def _check_obs_size(blank_obs: bool, arch: ArchConfig) -> None:
    if not blank_obs and arch.obs_hw != OBS_SIZE:
        raise ConfigError(
            f"panorama crops are {OBS_SIZE}x{OBS_SIZE}; set arch.obs_hw={OBS_SIZE} "
            "or pass --blank-obs"
        )


def latest_checkpoint(run_dir) -> Path:
    """The stored checkpoint with the largest global step."""
    if run_dir is None:
        raise MissingInput("need --run or --checkpoint")
    run_dir = Path(run_dir)
    candidates = []
    final = run_dir / "final.bin"
    if final.exists():
        candidates.append(final)
    ckdir = run_dir / "checkpoints"
    if ckdir.is_dir():
        candidates.extend(sorted(ckdir.glob("ck_*.bin")))
    if not candidates:
        raise MissingInput(f"no checkpoints under {run_dir}")
    return max(candidates, key=lambda p: int(nn.read_meta(p).get("global_step", -1)))


def parse_seeds(spec: str) -> list:
    try:
        seeds = [int(s) for s in spec.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds value {spec!r}") from exc
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def parse_grid(spec: str) -> tuple:
    parts = spec.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"--grid wants WxH (e.g. 10x10), got {spec!r}")
    try:
        w, h = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"--grid wants integers, got {spec!r}") from exc
    if w < 2 or h < 2:
        raise ConfigError("--grid needs at least 2x2")
    return w, h


def _tristate(value):
    return None if value is None else value == "on"


def _manifest_args(args, skip=("entry", "cmd")) -> dict:
    out = {}
    for key, value in vars(args).items():
        if key in skip or callable(value):
            continue
        if key == "set":
            for i, pair in enumerate(value or []):
                out[f"args.set.{i}"] = pair
        else:
            out[f"args.{key}"] = value
    return out


# ---------------------------------------------------------------- commands

def cmd_build_city(args) -> int:
    w, h = parse_grid(args.grid)
    root = data_root(args.data_dir)
    name = args.name or f"grid{w}x{h}-s{args.seed}"
    out = city_dir(root, name)
    with run_lock(out):
        manifest = RunManifest(out, "build-city", _manifest_args(args), [args.seed])
        graph = generate_synthetic_city(
            w, h, spacing_m=args.spacing_m, irregularity=args.irregularity, seed=args.seed
        )
        rng = np.random.default_rng([args.seed, 271])
        landmarks = place_landmarks(graph.bbox(), args.landmarks, args.landmark_jitter, rng)
        gpath = out / GRAPH_FILE
        save_graph(graph, gpath)
        load_graph(gpath)  # round-trip self check before declaring success
        lpath = out / LANDMARK_FILE
        save_landmarks(landmarks, lpath)
        meta_lines = [
            f"grid = {w}x{h}",
            f"irregularity = {args.irregularity}",
            f"landmark_jitter = {args.landmark_jitter}",
            f"landmarks = {args.landmarks}",
            f"pano_height = {args.pano_height}",
            f"seed = {args.seed}",
            f"spacing_m = {args.spacing_m}",
        ]
        cpath = out / CITY_CONFIG
        atomic_write_text(cpath, "\n".join(meta_lines) + "\n")
        outputs = [gpath, lpath, cpath]
        if args.panoramas:
            pdir = out / PANO_DIR
            pdir.mkdir(exist_ok=True)
            panos = render_city(graph, seed=args.seed, height=args.pano_height)
            save_panoramas(panos, pdir)
            outputs.extend(sorted(pdir.iterdir()))
        manifest.add_outputs(*outputs)
        manifest.finalize()
    print(f"city {name}: {graph.num_nodes} nodes, {len(landmarks)} landmarks -> {out}")
    return 0


def cmd_train(args) -> int:
    root = data_root(args.data_dir)
    cities = [c for c in args.cities.split(",") if c]
    if not cities:
        raise ConfigError("--cities must name at least one city")
    if args.arch in ("goalnav", "citynav") and len(cities) != 1:
        raise ConfigError(f"{args.arch} trains on exactly one city")
    out = Path(args.out) if args.out else (
        root / "runs" / f"{'-'.join(cities)}-{args.arch}-s{args.seed}"
    )
    with run_lock(out):
        file_map = parse_config_file(args.config) if args.config else {}
        flag_map = parse_flag_overrides(args.set or [])
        by_file = split_sections(file_map)
        by_flag = split_sections(flag_map)
        arch_over = {**by_file["arch"], **by_flag["arch"]}
        if args.resume:
            # a resumed run starts from its stored architecture and configs;
            # explicit --config/--set values still override
            arch = load_arch(out / "arch.json")
            stored_env = {}
            if (out / "env.cfg").exists():
                stored_env = parse_config_file(out / "env.cfg")
            env_cfg = build_config(
                CourierConfig, {**stored_env, **by_file["env"]}, by_flag["env"]
            )
            stored_train = {}
            if (out / "train.cfg").exists():
                stored_train = parse_config_file(out / "train.cfg")
            stored_train.pop("frozen_groups", None)  # tuple field, flag-only
            stored_train.pop("start_step", None)
            train_base = build_config(
                TrainConfig, {**stored_train, **by_file["train"]}, by_flag["train"]
            )
            ckpt = latest_checkpoint(out)
            params = agents.build_params(arch, np.random.default_rng(args.seed))
            params, ck_meta = nn.load_params(ckpt, params)
            start_step = int(ck_meta.get("global_step", 0))
        else:
            train_base = build_config(TrainConfig, by_file["train"], by_flag["train"])
            env_cfg = build_config(CourierConfig, by_file["env"], by_flag["env"])
            start_step = 0

        datas = {}
        goal_dims = None
        for name in cities:
            graph, landmarks, meta = load_city(root, name)
            panos = None if args.blank_obs else city_panoramas(root, name, graph, meta)
            datas[name] = (graph, landmarks, panos)
            dims = goal_code_dim(env_cfg, len(landmarks), graph.bbox())
            if goal_dims is None:
                goal_dims = dims
            elif dims != goal_dims:
                raise ConfigError(
                    f"city {name!r} yields goal code dims {dims}, others {goal_dims}"
                )

        if not args.resume:
            arch = arch_from_overrides(
                args.arch, cities, goal_dims, arch_over,
                heading_aux=_tristate(args.heading_aux),
                skip_connection=_tristate(args.skip_connection),
            )
            params = agents.build_params(arch, np.random.default_rng(args.seed))
        _check_obs_size(args.blank_obs, arch)

        total = int(float(args.steps)) if args.steps else train_base.total_steps
        cfg = dataclasses.replace(
            train_base, total_steps=total, seed=args.seed, start_step=start_step
        )

        heldout: dict = {}
        mask_path = out / "heldout_nodes.txt"
        cell_deg = args.heldout_cell_m / METERS_PER_DEG_LAT
        fraction = args.heldout_fraction
        if args.heldout_cell_m <= 0 and env_cfg.heldout.fraction > 0:
            cell_deg, fraction = env_cfg.heldout.cell_deg, env_cfg.heldout.fraction
        if args.resume and mask_path.exists():
            heldout[cities[0]] = set(mask_path.read_text().split())
        elif cell_deg > 0 and fraction > 0:
            if len(cities) != 1:
                raise ConfigError("held-out masking supports a single city")
            graph = datas[cities[0]][0]
            mask = make_heldout_mask(
                graph, cell_deg, fraction, np.random.default_rng([args.seed, 13])
            )
            heldout[cities[0]] = mask
            atomic_write_text(mask_path, "\n".join(sorted(mask)) + "\n")

        n_lanes = cfg.batch_size if args.sync else cfg.n_actors
        envs = build_envs(datas, env_cfg, n_lanes, args.seed, args.blank_obs,
                          arch.obs_hw, heldout)

        manifest = RunManifest(out, "train", {
            **_manifest_args(args),
            **{f"train.{k}": v for k, v in config_to_mapping(cfg).items()},
            **{f"env.{k}": v for k, v in config_to_mapping(env_cfg).items()},
            **{f"arch.{k}": v for k, v in arch_payload(arch).items()},
        }, [args.seed])
        save_arch(out / "arch.json", arch)
        write_config_file(env_cfg, out / "env.cfg")
        write_config_file(cfg, out / "train.cfg")

        ckdir = out / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        log_path = out / "train_log.csv"
        log = TrainLog(log_path, append=args.resume)
        status = "completed"
        try:
            if start_step >= cfg.total_steps:
                print(f"nothing to train: checkpoint at step {start_step} >= {cfg.total_steps}")
                log.close()
            elif args.sync:
                train_sync(params, arch, envs, cfg, log=log, checkpoint_dir=ckdir)
            else:
                train_async(params, arch, envs, cfg, log=log, checkpoint_dir=ckdir)
        except KeyboardInterrupt:
            # drivers already checkpointed and closed the log on the way out
            status = "interrupted"

        gstep = int(log.rows[-1]["global_step"]) if log.rows else start_step
        final = out / "final.bin"
        nn.save_params(final, params, meta={
            "global_step": gstep, "arch": arch_payload(arch), "command": "train",
        })

        goal_lines = ["lane,city,node"]
        for lane, ae in enumerate(envs):
            goal_lines.extend(f"{lane},{ae.city_id},{node}" for node in ae.goal_log)
        goals_path = out / "goals.csv"
        atomic_write_text(goals_path, "\n".join(goal_lines) + "\n")
        if heldout:
            masked = heldout[cities[0]]
            bad = sum(
                1 for ae in envs for node in ae.goal_log if node in masked
            )
            manifest.note("audit.masked_goal_samples", bad)
            print(f"held-out audit: {bad} masked goals sampled during training")

        outputs = [final, log_path, goals_path, out / "arch.json", out / "env.cfg",
                   out / "train.cfg"]
        outputs.extend(sorted(ckdir.glob("ck_*.bin")))
        if mask_path.exists():
            outputs.append(mask_path)
        manifest.add_outputs(*outputs)
        manifest.finalize(status)
    print(f"trained to step {gstep} -> {final}")
    return 130 if status == "interrupted" else 0


def _load_run_agent(args, root):
    """(params, arch, checkpoint path) from --run / --checkpoint / --arch-json."""
    run_dir = Path(args.run) if getattr(args, "run", None) else None
    if getattr(args, "checkpoint", None):
        ckpt = Path(args.checkpoint)
    else:
        ckpt = latest_checkpoint(run_dir)
    if getattr(args, "arch_json", None):
        arch = load_arch(args.arch_json)
    elif run_dir is not None:
        arch = load_arch(run_dir / "arch.json")
    else:
        meta = nn.read_meta(ckpt)
        if "arch" not in meta:
            raise MissingInput("checkpoint carries no architecture; pass --arch-json")
        data = dict(meta["arch"])
        data["cities"] = tuple(data["cities"])
        arch = ArchConfig(**data)
    params, _ = evaluation.load_agent(ckpt, arch)
    return params, arch, ckpt


def _run_env_cfg(args, run_dir) -> CourierConfig:
    """Env config stored with the run, still overridable per evaluation."""
    file_map = parse_config_file(args.config) if getattr(args, "config", None) else {}
    flag_map = parse_flag_overrides(getattr(args, "set", None) or [])
    base_map = {}
    if run_dir is not None and (Path(run_dir) / "env.cfg").exists():
        base_map = parse_config_file(Path(run_dir) / "env.cfg")
    merged = {**base_map, **split_sections(file_map)["env"], **split_sections(flag_map)["env"]}
    return build_config(CourierConfig, merged, {})


def _heldout_sets(args, run_dir, graph):
    """Goal restriction for --goals heldout/unmasked via the run's stored mask."""
    if args.goals == "all":
        return None
    if run_dir is None:
        raise MissingInput("--goals needs --run (the mask lives in the run directory)")
    mask_path = Path(run_dir) / "heldout_nodes.txt"
    if not mask_path.exists():
        raise MissingInput(f"run has no held-out mask at {mask_path}")
    mask = set(mask_path.read_text().split())
    if args.goals == "heldout":
        return set(graph.node_ids) - mask
    return mask


def _blank_default(args, run_dir) -> bool:
    if args.blank_obs:
        return True
    if run_dir is not None:
        mpath = Path(run_dir) / "manifest.json"
        if mpath.exists():
            cfg = json.loads(mpath.read_text(encoding="utf-8")).get("config", {})
            return cfg.get("args.blank_obs") == "True"
    return False


def cmd_eval(args) -> int:
    root = data_root(args.data_dir)
    run_dir = Path(args.run) if args.run else None
    params, arch, ckpt = _load_run_agent(args, root)
    if not args.city:
        raise ConfigError("--city is required")
    if arch.arch != "goalnav" and args.city not in arch.cities:
        raise ConfigError(f"city {args.city!r} not in the agent's cities {arch.cities}")
    env_cfg = _run_env_cfg(args, run_dir)
    graph, landmarks, meta = load_city(root, args.city)
    blank = _blank_default(args, run_dir)
    _check_obs_size(blank, arch)
    panos = None if blank else city_panoramas(root, args.city, graph, meta)
    heldout_nodes = _heldout_sets(args, run_dir, graph)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out) if args.out else (run_dir / "eval" if run_dir else root / "eval")

    with run_lock(out):
        manifest = RunManifest(out, "eval", {
            **_manifest_args(args),
            "checkpoint": ckpt,
            **{f"env.{k}": v for k, v in config_to_mapping(env_cfg).items()},
        }, seeds)
        reports = {}
        for seed in seeds:
            ae = eval_actor_env(graph, landmarks, panos, env_cfg, args.city, seed,
                                blank, arch.obs_hw, heldout_nodes)
            policy = LearnedPolicy(params, arch, city_id=args.city, greedy=args.greedy,
                                   seed=seed)
            report, _ = evaluate(policy, ae, args.episodes)
            reports[seed] = report
        merged = merge_seed_reports(reports)
        jpath = out / "eval_report.json"
        atomic_json_report(jpath, {
            "checkpoint": str(ckpt), "city": args.city,
            "episodes_per_seed": args.episodes, **merged.as_dict(),
        })
        rows = [dict(seed=s, **r.as_dict()) for s, r in sorted(reports.items())]
        for row in rows:
            row.pop("per_seed", None)
        cpath = out / "eval_report.csv"
        atomic_csv_report(cpath, rows)
        manifest.add_outputs(jpath, cpath)
        manifest.finalize()

    print(f"eval {args.city}: mean goal reward {merged.mean_episode_goal_reward:.3f}, "
          f"fail rate {merged.fail_rate:.3f} -> {jpath}")
    if not args.check:
        return 0

    # chance floor: the scripted random walk under the identical protocol
    floors = {}
    for seed in seeds:
        ae = eval_actor_env(graph, landmarks, panos, env_cfg, args.city, seed,
                            True, arch.obs_hw, heldout_nodes)
        rep, _ = evaluate(HeuristicPolicy(seed=seed), ae, args.episodes)
        floors[seed] = rep
    floor = merge_seed_reports(floors).mean_episode_goal_reward
    threshold = args.min_reward if args.min_reward is not None else max(
        args.reward_factor * floor, 1e-9
    )
    ok = merged.mean_episode_goal_reward >= threshold and merged.fail_rate <= args.max_fail
    verdict = "PASS" if ok else "FAIL"
    print(f"check {verdict}: reward {merged.mean_episode_goal_reward:.3f} vs "
          f"threshold {threshold:.3f} (floor {floor:.3f}), "
          f"fail rate {merged.fail_rate:.3f} <= {args.max_fail}")
    return 0 if ok else 1


def cmd_baseline(args) -> int:
    root = data_root(args.data_dir)
    graph, landmarks, _ = load_city(root, args.city)
    env_cfg = _run_env_cfg(args, None)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out) if args.out else root / "baselines" / f"{args.city}-{args.agent}"
    make_policy = {"oracle": OraclePolicy, "heuristic": HeuristicPolicy}[args.agent]

    with run_lock(out):
        manifest = RunManifest(out, "baseline", {
            **_manifest_args(args),
            **{f"env.{k}": v for k, v in config_to_mapping(env_cfg).items()},
        }, seeds)
        reports = {}
        for seed in seeds:
            ae = eval_actor_env(graph, landmarks, None, env_cfg, args.city, seed,
                                True, OBS_SIZE)
            report, _ = evaluate(make_policy(seed=seed), ae, args.episodes)
            reports[seed] = report
        merged = merge_seed_reports(reports)
        jpath = out / "baseline_report.json"
        atomic_json_report(jpath, {
            "agent": args.agent, "city": args.city,
            "episodes_per_seed": args.episodes, **merged.as_dict(),
        })
        rows = [dict(seed=s, **r.as_dict()) for s, r in sorted(reports.items())]
        for row in rows:
            row.pop("per_seed", None)
        cpath = out / "baseline_report.csv"
        atomic_csv_report(cpath, rows)
        manifest.add_outputs(jpath, cpath)
        manifest.finalize()

    print(f"baseline {args.agent} on {args.city}: mean goal reward "
          f"{merged.mean_episode_goal_reward:.3f}, fail rate {merged.fail_rate:.3f}")
    if not args.check:
        return 0
    if args.agent == "oracle":
        ok = merged.fail_rate == 0.0
        print(f"check {'PASS' if ok else 'FAIL'}: oracle fail rate {merged.fail_rate}")
        return 0 if ok else 1
    print("check PASS: no thresholds for the heuristic baseline")
    return 0


def cmd_transfer(args) -> int:
    root = data_root(args.data_dir)
    sources = tuple(c for c in args.cities.split(",") if c)
    target = args.target
    if not sources:
        raise ConfigError("--cities must name at least one source city")
    train_base, env_cfg, arch_over = section_configs(args)
    seeds = parse_seeds(args.seeds)
    regimes = tuple(r for r in args.regimes.split(",") if r)

    datas = {}
    goal_dims = None
    for name in (*sources, target):
        graph, landmarks, meta = load_city(root, name)
        panos = None if args.blank_obs else city_panoramas(root, name, graph, meta)
        datas[name] = (graph, landmarks, panos)
        dims = goal_code_dim(env_cfg, len(landmarks), graph.bbox())
        if goal_dims is None:
            goal_dims = dims
        elif dims != goal_dims:
            raise ConfigError(f"city {name!r} yields goal code dims {dims}, others {goal_dims}")

    arch_kwargs: dict = {"goal_dims": goal_dims}
    for key, raw in arch_over.items():
        if key in ("arch", "cities", "goal_dims"):
            raise ConfigError(f"arch.{key} is fixed by the transfer protocol")
        if key not in _ARCH_FIELDS:
            raise ConfigError(f"unknown arch key {key!r}")
        arch_kwargs[key] = _coerce(raw, _ARCH_FIELDS[key], f"arch.{key}")
    if _tristate(args.heading_aux) is not None:
        arch_kwargs["heading_aux"] = _tristate(args.heading_aux)
    probe_arch = ArchConfig(arch="citynav", cities=(target,), **arch_kwargs)
    _check_obs_size(args.blank_obs, probe_arch)

    train_kwargs = {
        f.name: getattr(train_base, f.name)
        for f in dataclasses.fields(TrainConfig)
        if f.name not in ("total_steps", "seed", "frozen_groups", "start_step", "n_actors")
    }

    def make_envs(city_names, seed, batch):
        return build_envs({n: datas[n] for n in city_names}, env_cfg, batch, seed,
                          args.blank_obs, probe_arch.obs_hw)

    def eval_fn(params, arch, city_id):
        graph, landmarks, panos = datas[city_id]
        ae = eval_actor_env(graph, landmarks, panos, env_cfg, city_id, 97,
                            args.blank_obs, arch.obs_hw)
        policy = LearnedPolicy(params, arch, city_id=city_id, seed=97)
        report, _ = evaluate(policy, ae, args.episodes)
        return report.mean_episode_goal_reward

    out = Path(args.out) if args.out else root / "transfer" / f"{'-'.join(sources)}-to-{target}"
    with run_lock(out):
        manifest = RunManifest(out, "transfer", {
            **_manifest_args(args),
            **{f"train.{k}": v for k, v in config_to_mapping(train_base).items()},
            **{f"env.{k}": v for k, v in config_to_mapping(env_cfg).items()},
        }, seeds)
        report = run_transfer_experiment(
            make_envs, sources, target, arch_kwargs, eval_fn,
            seeds=tuple(seeds), regimes=regimes,
            single_steps=args.steps_single, joint_steps=args.steps_joint,
            pretrain_steps=args.steps_pretrain, transfer_steps=args.steps_transfer,
            train_kwargs=train_kwargs,
        )
        jpath = out / "transfer_report.json"
        atomic_json_report(jpath, report)
        rows = [
            dict(regime=regime, mean=stats["mean"], sd=stats["sd"],
                 **{f"seed{r['seed']}": r["reward"] for r in stats["per_seed"]})
            for regime, stats in report["regimes"].items()
        ]
        cpath = out / "transfer_report.csv"
        atomic_csv_report(cpath, rows)
        manifest.add_outputs(jpath, cpath)
        manifest.finalize()

    for regime, stats in report["regimes"].items():
        print(f"transfer {regime}: mean goal reward {stats['mean']:.3f} sd {stats['sd']:.3f}")
    if not args.check:
        return 0

    ok = True
    pt = report["regimes"].get("pretrain_transfer")
    if pt is not None:
        hashes_ok = all(r.get("frozen_hashes_match", False) for r in pt["per_seed"])
        ok &= hashes_ok
        print(f"check frozen hashes: {'PASS' if hashes_ok else 'FAIL'}")
        graph, landmarks, _ = datas[target]
        ae = eval_actor_env(graph, landmarks, None, env_cfg, target, 97, True,
                            probe_arch.obs_hw)
        floor_rep, _ = evaluate(HeuristicPolicy(seed=97), ae, args.episodes)
        floor = floor_rep.mean_episode_goal_reward
        threshold = max(args.reward_factor * floor, 1e-9)
        reward_ok = pt["mean"] >= threshold
        ok &= reward_ok
        print(f"check transfer reward: {'PASS' if reward_ok else 'FAIL'} "
              f"({pt['mean']:.3f} vs threshold {threshold:.3f})")
    return 0 if ok else 1


def cmd_probe(args) -> int:
    root = data_root(args.data_dir)
    run_dir = Path(args.run) if args.run else None
    graph, landmarks, meta = load_city(root, args.city)
    env_cfg = _run_env_cfg(args, run_dir)
    blank = _blank_default(args, run_dir)

    if args.untrained:
        goal_dims = goal_code_dim(env_cfg, len(landmarks), graph.bbox())
        if run_dir is not None or args.checkpoint:
            arch = _load_run_agent(args, root)[1]
        else:
            arch = arch_from_overrides("citynav", (args.city,), goal_dims, {})
        params = agents.build_params(arch, np.random.default_rng(args.seed))
        ckpt = None
    else:
        params, arch, ckpt = _load_run_agent(args, root)
        if arch.arch != "goalnav" and args.city not in arch.cities:
            raise ConfigError(f"city {args.city!r} not in the agent's cities {arch.cities}")
    _check_obs_size(blank, arch)
    panos = None if blank else city_panoramas(root, args.city, graph, meta)

    out = Path(args.out) if args.out else (run_dir / "probe" if run_dir else root / "probe")
    with run_lock(out):
        manifest = RunManifest(out, "probe", {
            **_manifest_args(args),
            "checkpoint": ckpt or "untrained",
            **{f"env.{k}": v for k, v in config_to_mapping(env_cfg).items()},
        }, [args.seed])
        ae = eval_actor_env(graph, landmarks, panos, env_cfg, args.city, args.seed,
                            blank, arch.obs_hw)
        policy = LearnedPolicy(params, arch, city_id=args.city, seed=args.seed)
        _, hidden = run_episodes(policy, ae, args.episodes, collect_hidden=True)
        dataset = probe_dataset(hidden, graph.bbox(), args.cell_m)
        hpath = out / "hidden.npz"
        dump_hidden(hpath, dataset)
        report = train_decoders(dataset, min_samples=args.min_samples,
                                epochs=args.decoder_epochs, seed=args.seed)
        jpath = out / "probe_report.json"
        atomic_json_report(jpath, {
            "checkpoint": str(ckpt) if ckpt else "untrained", "city": args.city,
            "cell_m": args.cell_m, "samples": int(dataset["hidden"].shape[0]),
            **report.as_dict(),
        })
        cpath = out / "probe_report.csv"
        atomic_csv_report(cpath, [report.as_dict()])
        manifest.add_outputs(hpath, jpath, cpath)
        manifest.finalize()

    print(f"probe {args.city}: direction MAE {report.direction_mae_deg:.1f} deg "
          f"(p={report.direction_p:.2e}), position acc {report.position_accuracy:.3f} "
          f"(chance {report.position_chance:.3f})")
    if not args.check:
        return 0
    if args.untrained:
        ok = report.direction_p >= 0.01
        print(f"check {'PASS' if ok else 'FAIL'}: untrained decoder at chance "
              f"(p={report.direction_p:.3f})")
    else:
        ok = report.direction_mae_deg < 90.0 and report.direction_p < 0.01
        print(f"check {'PASS' if ok else 'FAIL'}: MAE {report.direction_mae_deg:.1f} < 90 "
              f"and p {report.direction_p:.2e} < 0.01")
    return 0 if ok else 1


def cmd_dump_trajectories(args) -> int:
    root = data_root(args.data_dir)
    run_dir = Path(args.run) if args.run else None
    graph, landmarks, meta = load_city(root, args.city)
    env_cfg = _run_env_cfg(args, run_dir)
    seeds = parse_seeds(args.seeds)

    if args.agent == "learned":
        params, arch, ckpt = _load_run_agent(args, root)
        blank = _blank_default(args, run_dir)
        _check_obs_size(blank, arch)
        panos = None if blank else city_panoramas(root, args.city, graph, meta)
        obs_hw = arch.obs_hw
    else:
        params = arch = ckpt = panos = None
        blank = True
        obs_hw = OBS_SIZE

    out = Path(args.out) if args.out else (
        run_dir / "trajectories" if run_dir else root / "trajectories" / args.city
    )
    with run_lock(out):
        manifest = RunManifest(out, "dump-trajectories", {
            **_manifest_args(args),
            "checkpoint": ckpt or args.agent,
            **{f"env.{k}": v for k, v in config_to_mapping(env_cfg).items()},
        }, seeds)
        outputs = []
        for seed in seeds:
            ae = eval_actor_env(graph, landmarks, panos, env_cfg, args.city, seed,
                                blank, obs_hw)
            if args.agent == "learned":
                policy = LearnedPolicy(params, arch, city_id=args.city, seed=seed)
            elif args.agent == "oracle":
                policy = OraclePolicy(seed=seed)
            else:
                policy = HeuristicPolicy(seed=seed)
            records, _ = run_episodes(policy, ae, args.episodes)
            tpath = out / f"traj_s{seed}.jsonl"
            tmp = f"{tpath}.tmp"
            write_trajectories(tmp, records)
            os.replace(tmp, tpath)
            # metrics must be recomputable from the dump alone
            live = report_from_records(records)
            reread = report_from_records(evaluation.read_trajectories(tpath))
            if live.as_dict() != reread.as_dict():
                raise RuntimeError(f"recomputed report differs for {tpath}")
            rpath = out / f"report_s{seed}.json"
            atomic_json_report(rpath, live.as_dict())
            outputs.extend([tpath, rpath])
            print(f"seed {seed}: {len(records)} records -> {tpath} (recompute ok)")
        manifest.add_outputs(*outputs)
        manifest.finalize()
    return 0


# ------------------------------------------------------------------ parser

def _add_common(p) -> None:
    p.add_argument("--data-dir", default=None,
                   help="data root (default: $STREETSIM_DATA_DIR or ./streetsim-data)")


def _add_config(p) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="config override, e.g. --set train.lr=0.002 (repeatable)")


def _add_agent_source(p) -> None:
    p.add_argument("--run", default=None, help="training run directory")
    p.add_argument("--checkpoint", default=None, help="explicit checkpoint file")
    p.add_argument("--arch-json", default=None, help="architecture file when no --run")
    p.add_argument("--blank-obs", action="store_true",
                   help="constant blank observations (matches runs trained that way)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streetsim",
        description="street-graph courier navigation: cities, training, evaluation",
    )
    parser.add_argument("--version", action="version", version=f"streetsim {__version__}")
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("build-city", help="generate a synthetic city bundle")
    p.add_argument("--grid", required=True, help="node grid, e.g. 10x10")
    p.add_argument("--spacing-m", type=float, default=10.0)
    p.add_argument("--irregularity", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--landmarks", type=int, default=16)
    p.add_argument("--landmark-jitter", type=float, default=0.25,
                   help="jitter as a fraction of the landmark grid cell")
    p.add_argument("--name", default=None, help="city name (default: gridWxH-sSEED)")
    p.add_argument("--panoramas", action="store_true", help="store PPM panoramas")
    p.add_argument("--pano-height", type=int, default=64)
    _add_common(p)
    p.set_defaults(entry=cmd_build_city)

    p = sub.add_parser("train", help="train an agent on one or more cities")
    p.add_argument("--cities", required=True, help="comma-separated city names")
    p.add_argument("--arch", choices=("goalnav", "citynav", "multicitynav"),
                   default="citynav")
    p.add_argument("--steps", default=None, help="total env steps, e.g. 2e6")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--resume", action="store_true",
                   help="continue from the run's latest checkpoint")
    p.add_argument("--sync", action="store_true",
                   help="single-thread lockstep driver (deterministic)")
    p.add_argument("--heading-aux", choices=("on", "off"), default=None)
    p.add_argument("--skip-connection", choices=("on", "off"), default=None)
    p.add_argument("--blank-obs", action="store_true",
                   help="train on constant blank frames (no panoramas)")
    p.add_argument("--heldout-cell-m", type=float, default=0.0,
                   help="mask cell size in meters; 0 disables goal masking")
    p.add_argument("--heldout-fraction", type=float, default=0.25)
    _add_config(p)
    _add_common(p)
    p.set_defaults(entry=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained agent")
    _add_agent_source(p)
    p.add_argument("--city", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seeds", default="0")
    p.add_argument("--greedy", action="store_true", help="argmax actions")
    p.add_argument("--goals", choices=("all", "heldout", "unmasked"), default="all",
                   help="restrict goal sampling using the run's held-out mask")
    p.add_argument("--out", default=None)
    p.add_argument("--check", action="store_true",
                   help="exit 0 iff thresholds pass")
    p.add_argument("--reward-factor", type=float, default=3.0,
                   help="required multiple of the heuristic floor")
    p.add_argument("--min-reward", type=float, default=None,
                   help="absolute reward threshold (overrides --reward-factor)")
    p.add_argument("--max-fail", type=float, default=1.0)
    _add_config(p)
    _add_common(p)
    p.set_defaults(entry=cmd_eval)

    p = sub.add_parser("baseline", help="run a scripted baseline agent")
    p.add_argument("--agent", choices=("oracle", "heuristic"), required=True)
    p.add_argument("--city", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default=None)
    p.add_argument("--check", action="store_true")
    _add_config(p)
    _add_common(p)
    p.set_defaults(entry=cmd_baseline)

    p = sub.add_parser("transfer", help="compare training regimes on a target city")
    p.add_argument("--cities", required=True, help="source cities, comma separated")
    p.add_argument("--target", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--regimes", default="single,joint,pretrain_transfer")
    p.add_argument("--steps-single", type=int, default=100_000)
    p.add_argument("--steps-joint", type=int, default=100_000)
    p.add_argument("--steps-pretrain", type=int, default=100_000)
    p.add_argument("--steps-transfer", type=int, default=50_000)
    p.add_argument("--episodes", type=int, default=10, help="eval episodes per regime")
    p.add_argument("--heading-aux", choices=("on", "off"), default=None)
    p.add_argument("--blank-obs", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--check", action="store_true")
    p.add_argument("--reward-factor", type=float, default=2.0)
    _add_config(p)
    _add_common(p)
    p.set_defaults(entry=cmd_transfer)

    p = sub.add_parser("probe", help="decode position and goal direction from hidden state")
    _add_agent_source(p)
    p.add_argument("--city", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--cell-m", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-samples", type=int, default=200)
    p.add_argument("--decoder-epochs", type=int, default=3)
    p.add_argument("--untrained", action="store_true",
                   help="probe freshly initialized parameters (control)")
    p.add_argument("--out", default=None)
    p.add_argument("--check", action="store_true")
    _add_config(p)
    _add_common(p)
    p.set_defaults(entry=cmd_probe)

    p = sub.add_parser("dump-trajectories", help="write JSONL trajectory logs")
    _add_agent_source(p)
    p.add_argument("--agent", choices=("learned", "oracle", "heuristic"),
                   default="learned")
    p.add_argument("--city", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default=None)
    _add_config(p)
    _add_common(p)
    p.set_defaults(entry=cmd_dump_trajectories)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "entry", None) is None:
        parser.print_help()
        return 2
    try:
        return args.entry(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except (MissingInput, LockHeld, ConfigError, CourierError, GraphError,
            PanoramaError, nn.CheckpointError, evaluation.InsufficientData,
            evaluation.MissingCheckpoint, evaluation.CheckpointMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

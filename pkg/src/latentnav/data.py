"""Episode recording, on-disk dataset format, splits and training windows.

On disk a dataset is a directory holding ``index.json`` and one
sub-directory per episode.  Each episode directory has ``manifest.json`` and
one raw little-endian array file per field::

    image.bin           float32 (N, H, W, 3)
    speed.bin           float32 (N,)
    semantic_label.bin  uint8   (N, H, W)
    route.bin           float32 (N, 20, 2)   teacher episodes only
    path.bin            float32 (N, 5, 2)    teacher episodes only
    action_command.bin  float32 (N, 6)
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import CameraConfig, SimConfig
from .sim import (
    ActionCommand,
    Limits,
    Pose,
    World,
    check_collision,
    clamp_command,
    localize_route,
    render_observation,
    step_kinematics,
)
from .sim.route import dest_code

SCHEMA_VERSION = 1
FIELDS = ("image", "speed", "semantic_label", "route", "path", "action_command")
DTYPES = {
    "image": "<f4",
    "speed": "<f4",
    "semantic_label": "u1",
    "route": "<f4",
    "path": "<f4",
    "action_command": "<f4",
}
TEACHER_ONLY = ("route", "path")
MIN_FRAMES = 6


class DatasetError(RuntimeError):
    pass


class SchemaVersionError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class EpisodeInvariantError(DatasetError):
    pass


class EpisodeRejected(DatasetError):
    pass


@dataclass
class Frame:
    image: np.ndarray
    speed: float
    semantic_label: np.ndarray
    route: np.ndarray | None
    path: np.ndarray | None
    action_command: np.ndarray


@dataclass
class Episode:
    """A recorded run stored as stacked per-field arrays.

    ``route_valid``/``route_dest`` describe the route mask (valid-row count and
    destination-flag code) for each frame; ``poses`` has one more row than
    there are frames (the pose after the last command).
    """

    arrays: dict
    policy_tag: str
    seed: int
    scenario: dict
    termination: str = "max-steps"
    dt: float = 0.2
    poses: np.ndarray | None = None
    route_valid: np.ndarray | None = None
    route_dest: np.ndarray | None = None
    episode_id: str = ""
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.arrays["action_command"])

    @property
    def has_route(self) -> bool:
        return "route" in self.arrays

    def frame(self, i: int) -> Frame:
        a = self.arrays
        return Frame(
            a["image"][i],
            float(a["speed"][i]),
            a["semantic_label"][i],
            a["route"][i] if self.has_route else None,
            a["path"][i] if self.has_route else None,
            a["action_command"][i],
        )

    @property
    def frames(self) -> list[Frame]:
        return [self.frame(i) for i in range(len(self))]

    def validate(self) -> None:
        n = len(self)
        if n < MIN_FRAMES:
            raise EpisodeInvariantError(f"episode {self.episode_id!r} has {n} frames; need >= {MIN_FRAMES}")
        if self.policy_tag not in ("teacher", "random"):
            raise EpisodeInvariantError(f"unknown policy tag {self.policy_tag!r}")
        if (self.policy_tag == "teacher") != self.has_route or (self.has_route != ("path" in self.arrays)):
            raise EpisodeInvariantError("route/path must be present iff the policy is the teacher")
        expect = {
            "speed": (n,),
            "action_command": (n, 6),
            "route": (n, 20, 2),
            "path": (n, 5, 2),
        }
        img = self.arrays["image"]
        if img.ndim != 4 or img.shape[0] != n or img.shape[3] != 3:
            raise EpisodeInvariantError(f"image shape {img.shape} invalid")
        expect["semantic_label"] = (n,) + img.shape[1:3]
        for k, shp in expect.items():
            if k in self.arrays and self.arrays[k].shape != shp:
                raise EpisodeInvariantError(f"{k} has shape {self.arrays[k].shape}, expected {shp}")
        if not math.isclose(self.dt, 0.2):
            raise EpisodeInvariantError(f"dt must be 0.2 s, got {self.dt}")


# -- recording ----------------------------------------------------------------


def record_episode(
    world: World,
    start: Pose,
    policy,
    max_steps: int,
    goal: tuple[float, float] | None = None,
    sim: SimConfig | None = None,
    cam: CameraConfig | None = None,
    seed: int = 0,
    scenario: dict | None = None,
    episode_id: str = "",
) -> Episode:
    """Run ``policy`` from ``start`` and record one frame per control step.

    Frame ``t`` holds the observation at ``t`` and the command issued at ``t``.
    Ends on goal reached (within ``sim.success_radius``), collision or
    ``max_steps``.  A start pose in collision raises :class:`EpisodeRejected`.
    """
    sim = sim or SimConfig()
    cam = cam or CameraConfig()
    teacher = policy.tag == "teacher"
    if teacher and getattr(policy, "route", None) is None:
        raise ValueError("teacher episodes need a route")
    if check_collision(world, start, sim.robot_radius):
        raise EpisodeRejected("start pose is in collision")
    limits = Limits(sim.v_max, sim.w_max)
    cols: dict[str, list] = {k: [] for k in FIELDS}
    poses = [start]
    valid, dest = [], []
    pose, speed = start, 0.0
    cause = "max-steps"
    for _ in range(max_steps):
        obs = render_observation(world, pose, cam, speed)
        out = policy(world, pose, speed)
        cmd, _ = clamp_command(out.command, limits)
        # store exactly what is executed
        arr = cmd.to_array().astype(np.float32)
        cmd = ActionCommand.from_array(arr)
        cols["image"].append(obs.rgb)
        cols["speed"].append(np.float32(speed))
        cols["semantic_label"].append(obs.semantic)
        cols["action_command"].append(arr)
        if teacher:
            seg = localize_route(policy.route, pose, 20, sim.route_spacing)
            cols["route"].append(seg.poses.astype(np.float32))
            cols["path"].append(np.asarray(out.path, dtype=np.float32))
            valid.append(seg.n_valid)
            dest.append(dest_code(seg))
        pose = step_kinematics(pose, cmd, sim.dt)
        speed = cmd.vx
        poses.append(pose)
        if check_collision(world, pose, sim.robot_radius):
            cause = "collision"
            break
        if goal is not None and math.hypot(pose.x - goal[0], pose.y - goal[1]) < sim.success_radius:
            cause = "goal-reached"
            break
    arrays = {k: np.stack(v) for k, v in cols.items() if v}
    return Episode(
        arrays=arrays,
        policy_tag=policy.tag,
        seed=int(seed),
        scenario=dict(scenario or {}),
        termination=cause,
        dt=sim.dt,
        poses=np.array([[p.x, p.y, p.heading] for p in poses]),
        route_valid=np.array(valid, dtype=np.int64) if teacher else None,
        route_dest=np.array(dest, dtype=np.int64) if teacher else None,
        episode_id=episode_id,
    )


# -- on-disk format -----------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_episode(ep: Episode, d: Path) -> None:
    ep.validate()
    d.mkdir(parents=True, exist_ok=False)
    fields = {}
    for name in FIELDS:
        if name not in ep.arrays:
            continue
        arr = np.ascontiguousarray(ep.arrays[name], dtype=DTYPES[name])
        fn = d / f"{name}.bin"
        arr.tofile(fn)
        fields[name] = {
            "file": fn.name,
            "dtype": DTYPES[name],
            "shape": list(arr.shape),
            "nbytes": int(arr.nbytes),
            "sha256": _sha256(fn),
        }
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "episode_id": ep.episode_id,
        "policy_tag": ep.policy_tag,
        "seed": ep.seed,
        "scenario": ep.scenario,
        "termination": ep.termination,
        "dt": ep.dt,
        "n_frames": len(ep),
        "fields": fields,
        "poses": None if ep.poses is None else ep.poses.tolist(),
        "route_valid": None if ep.route_valid is None else ep.route_valid.tolist(),
        "route_dest": None if ep.route_dest is None else ep.route_dest.tolist(),
        "extra": ep.extra,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def write_dataset(episodes: list[Episode], root: str | Path) -> Path:
    root = Path(root)
    for ep in episodes:
        ep.validate()
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i, ep in enumerate(episodes):
        name = f"ep_{i:05d}"
        write_episode(ep, root / name)
        names.append(name)
    index = {"schema_version": SCHEMA_VERSION, "episodes": names}
    (root / "index.json").write_text(json.dumps(index, indent=1))
    return root


def read_episode(d: Path, verify: bool = True) -> Episode:
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{d}: manifest.json missing")
    m = json.loads(mpath.read_text())
    if m.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"{d}: schema version {m.get('schema_version')} != {SCHEMA_VERSION}")
    n = m["n_frames"]
    arrays = {}
    for name, info in m["fields"].items():
        if name not in FIELDS:
            raise DatasetError(f"{d}: unknown field {name!r}")
        shape = tuple(info["shape"])
        dtype = np.dtype(info["dtype"])
        if dtype != np.dtype(DTYPES[name]):
            raise ShapeMismatchError(f"{d}/{name}: dtype {dtype} != {DTYPES[name]}")
        expected = int(np.prod(shape)) * dtype.itemsize
        if expected != info["nbytes"] or (len(shape) == 0 or shape[0] != n):
            raise ShapeMismatchError(f"{d}/{name}: manifest shape {shape} inconsistent with stored data")
        fn = d / info["file"]
        size = fn.stat().st_size if fn.exists() else -1
        if size != info["nbytes"]:
            raise TruncatedFileError(f"{d}/{name}: file has {size} bytes, manifest says {info['nbytes']}")
        if verify and _sha256(fn) != info["sha256"]:
            raise ChecksumError(f"{d}/{name}: checksum mismatch")
        arrays[name] = np.fromfile(fn, dtype=dtype).reshape(shape)
    ep = Episode(
        arrays=arrays,
        policy_tag=m["policy_tag"],
        seed=m["seed"],
        scenario=m["scenario"],
        termination=m["termination"],
        dt=m["dt"],
        poses=None if m["poses"] is None else np.array(m["poses"]),
        route_valid=None if m["route_valid"] is None else np.array(m["route_valid"], dtype=np.int64),
        route_dest=None if m["route_dest"] is None else np.array(m["route_dest"], dtype=np.int64),
        episode_id=m["episode_id"],
        extra=m.get("extra", {}),
    )
    try:
        ep.validate()
    except EpisodeInvariantError as exc:
        raise ShapeMismatchError(f"{d}: {exc}") from exc
    return ep


def read_dataset(root: str | Path, verify: bool = True) -> list[Episode]:
    root = Path(root)
    ipath = root / "index.json"
    if not ipath.exists():
        raise DatasetError(f"{root}: index.json missing")
    index = json.loads(ipath.read_text())
    if index.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"{root}: schema version {index.get('schema_version')} != {SCHEMA_VERSION}")
    return [read_episode(root / name, verify) for name in index["episodes"]]


# -- splits and windows -------------------------------------------------------


def split_dataset(episodes: list[Episode], seed: int, ratios=(0.8, 0.2)) -> tuple[list[Episode], list[Episode]]:
    """Episode-granular train/test split (no window can straddle both sides)."""
    if len(ratios) != 2 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9) or min(ratios) < 0:
        raise ValueError(f"ratios must be two non-negative numbers summing to 1, got {ratios}")
    if len(ratios) != 2 or not math.isclose(sum(ratios), 1.0) or min(ratios) < 0:
        raise ValueError(f"split ratios must be two non-negative numbers summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(episodes))
    n_train = int(round(ratios[0] * len(episodes)))
    train = [episodes[i] for i in sorted(order[:n_train])]
    test = [episodes[i] for i in sorted(order[n_train:])]
    if not train or not test:
        raise DatasetError(f"split of {len(episodes)} episodes with ratios {ratios} leaves an empty side")
    return train, test


def window_index(episodes: list[Episode], seq_len: int = 5) -> list[tuple[int, int]]:
    """All (episode, start) pairs; start >= 1 so every frame has a real previous action."""
    return [(e, s) for e, ep in enumerate(episodes) for s in range(1, len(ep) - seq_len + 1)]


def count_windows(episodes: list[Episode], seq_len: int = 5) -> int:
    return sum(max(0, len(ep) - seq_len) for ep in episodes)


def assemble(episodes: list[Episode], windows: list[tuple[int, int]], seq_len: int = 5) -> dict:
    """Dense per-field arrays of shape (B, T, ...) for the given windows."""
    batch: dict[str, list] = {k: [] for k in ("image", "speed", "semantic_label", "action", "prev_action")}
    with_route = all(episodes[e].has_route for e, _ in windows)
    if with_route:
        for k in ("route", "route_valid", "route_dest", "path"):
            batch[k] = []
    for e, s in windows:
        ep = episodes[e]
        a = ep.arrays
        sl = slice(s, s + seq_len)
        batch["image"].append(a["image"][sl])
        batch["speed"].append(a["speed"][sl])
        batch["semantic_label"].append(a["semantic_label"][sl])
        batch["action"].append(a["action_command"][sl])
        batch["prev_action"].append(a["action_command"][s - 1 : s - 1 + seq_len])
        if with_route:
            batch["route"].append(a["route"][sl])
            batch["path"].append(a["path"][sl])
            batch["route_valid"].append(ep.route_valid[sl])
            batch["route_dest"].append(ep.route_dest[sl])
    return {k: np.stack(v) for k, v in batch.items()}


def make_training_samples(
    episodes: list[Episode],
    seq_len: int = 5,
    batch_size: int = 16,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    max_batches: int = 0,
) -> Iterator[dict]:
    """Yield batches of stride-1 windows, shuffled deterministically per (seed, epoch)."""
    windows = window_index(episodes, seq_len)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(windows))
        windows = [windows[i] for i in order]
    n = 0
    for i in range(0, len(windows), batch_size):
        if max_batches and n >= max_batches:
            return
        yield assemble(episodes, windows[i : i + batch_size], seq_len)
        n += 1


# -- dataset generation -------------------------------------------------------

RANDOM_SEED_BASE = 1_000_000
TEACHER_SEED_BASE = 2_000_000


def _random_start(rng, world: World, sim: SimConfig) -> Pose | None:
    from .sim.world import _clearance

    clear = _clearance(world.grid, world.cell_size)
    cells = np.argwhere(clear >= sim.robot_radius + 0.1)
    if len(cells) == 0:
        return None
    iy, ix = cells[int(rng.integers(len(cells)))]
    x, y = world.cell_center(int(iy), int(ix))
    return Pose(x, y, rng.uniform(-math.pi, math.pi))


def generate_dataset(
    kind: str,
    n_frames: int,
    families: list[str],
    sim: SimConfig,
    cam: CameraConfig,
    seed: int = 0,
    max_steps: int | None = None,
) -> list[Episode]:
    """Record episodes until at least ``n_frames`` frames are collected.

    ``kind`` is ``"random"`` or ``"teacher"``.  Scenario seeds are drawn from
    a range disjoint from the evaluation suites.
    """
    from .sim import RandomPolicy, TeacherPolicy, default_spec, generate_scenario, plan_route

    if kind not in ("random", "teacher"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    base = RANDOM_SEED_BASE if kind == "random" else TEACHER_SEED_BASE
    max_steps = max_steps or (150 if kind == "random" else 600)
    episodes: list[Episode] = []
    total = 0
    k = 0
    while total < n_frames:
        scen_seed = base + 10_000 * seed + k
        fam = families[k % len(families)]
        k += 1
        spec = default_spec(fam, cell_size=sim.cell_size)
        sc = generate_scenario(scen_seed, spec, sim.robot_radius, sim.plan_margin)
        meta = {"family": fam, **spec.to_dict()}
        if kind == "random":
            rng = np.random.default_rng([scen_seed, 1])
            start = _random_start(rng, sc.world, sim)
            if start is None:
                continue
            policy = RandomPolicy(scen_seed, sim)
            goal = None
        else:
            start = sc.start
            policy = TeacherPolicy(plan_route(sc.world, sc.start, sc.goal, sim.robot_radius, sim.plan_margin), sim)
            goal = sc.goal
        try:
            ep = record_episode(
                sc.world, start, policy, max_steps, goal, sim, cam,
                seed=scen_seed, scenario=meta, episode_id=f"{kind}-{scen_seed}",
            )
        except EpisodeRejected:
            continue
        if len(ep) < MIN_FRAMES:
            continue
        episodes.append(ep)
        total += len(ep)
    return episodes

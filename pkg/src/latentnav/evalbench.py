"""Open-loop metrics, closed-loop benchmark on seed-pinned scenario suites,
imagined-semantics IOU, and the behaviour-cloning baseline.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import Config, SimConfig, config_hash
from .data import DatasetError, Episode
from .model import BCModel
from .sim import (
    NAVIGABLE,
    N_CLASSES,
    ActionCommand,
    Limits,
    Pose,
    RandomPolicy,
    ScenarioError,
    check_collision,
    clamp_command,
    default_spec,
    generate_scenario,
    localize_route,
    plan_route,
    render_observation,
    step_kinematics,
    teacher_act,
)
from .sim.world import Scenario, wrap_angle

SUITE_VERSION = 1
# scenario seed bases; disjoint from the data generators (1e6 and 2e6 ranges)
SUITE_BASES = {"easy": 5_000_000, "designed-id": 6_000_000, "designed-ood": 6_500_000, "narrow": 7_000_000}
IN_DISTRIBUTION = ("open", "corridor", "clutter")
OOD_FAMILY = "narrow-clutter"


# -- scenario suites ------------------------------------------------------------


@dataclass(frozen=True)
class SuiteEntry:
    scenario_id: str
    scenario: Scenario
    ood: bool = False


def _collect(base: int, families: list[str], n: int, sim: SimConfig, tag: str, ood: bool) -> list[SuiteEntry]:
    out, k = [], 0
    while len(out) < n:
        seed = base + k
        fam = families[len(out) % len(families)]
        k += 1
        try:
            sc = generate_scenario(seed, default_spec(fam, cell_size=sim.cell_size), sim.robot_radius, sim.plan_margin)
        except ScenarioError:
            continue
        out.append(SuiteEntry(f"{tag}-{fam}-{seed}", sc, ood))
    return out


def build_suite(name: str, sim: SimConfig | None = None, n: int | None = None) -> list[SuiteEntry]:
    """Versioned scenario suites.

    ``easy``: open rooms (default 20).  ``designed``: 5 in-distribution worlds
    plus 5 from the family never used for data.  ``narrow``: narrow-clutter
    (default 50).
    """
    sim = sim or SimConfig()
    if name == "easy":
        return _collect(SUITE_BASES["easy"], ["open"], n or 20, sim, "easy", False)
    if name == "narrow":
        return _collect(SUITE_BASES["narrow"], [OOD_FAMILY], n or 50, sim, "narrow", True)
    if name == "designed":
        half = (n or 10) // 2
        return _collect(SUITE_BASES["designed-id"], list(IN_DISTRIBUTION), half, sim, "designed", False) + _collect(
            SUITE_BASES["designed-ood"], [OOD_FAMILY], half, sim, "designed", True
        )
    raise ValueError(f"unknown suite {name!r}; choose easy, designed or narrow")


def suite_digest(suite: list[SuiteEntry]) -> str:
    h = hashlib.sha256(f"v{SUITE_VERSION}".encode())
    for e in suite:
        sc = e.scenario
        h.update(e.scenario_id.encode())
        h.update(sc.world.grid.tobytes())
        h.update(np.array([sc.start.x, sc.start.y, sc.start.heading, *sc.goal]).tobytes())
    return h.hexdigest()


# -- agents ---------------------------------------------------------------------


class TeacherAgent:
    name = "teacher"

    def __init__(self, sim: SimConfig | None = None):
        self.sim = sim or SimConfig()

    def begin(self, entry: SuiteEntry, route: np.ndarray, trial_seed: int) -> None:
        self.route = route

    def act(self, world, pose: Pose, obs, speed: float) -> np.ndarray:
        return teacher_act(world, pose, self.route, speed, self.sim).command.to_array()


class RandomAgent:
    name = "random"

    def __init__(self, sim: SimConfig | None = None):
        self.sim = sim or SimConfig()

    def begin(self, entry, route, trial_seed: int) -> None:
        self.policy = RandomPolicy(trial_seed, self.sim)

    def act(self, world, pose, obs, speed) -> np.ndarray:
        return self.policy(world, pose, speed).command.to_array()


class ModelAgent:
    """Wraps a learned model (full or BC).  ``mode`` is ``recurrent`` or ``resetting``."""

    def __init__(self, model, sim: SimConfig | None = None, mode: str = "recurrent"):
        if mode not in ("recurrent", "resetting"):
            raise ValueError(f"unknown mode {mode!r}")
        self.model = model.eval()
        self.sim = sim or SimConfig()
        self.mode = mode
        self.name = "bc" if isinstance(model, BCModel) else "model"

    def begin(self, entry, route, trial_seed: int) -> None:
        self.route = route
        self.state = self.model.initial_state()
        torch.manual_seed(trial_seed)

    def act(self, world, pose, obs, speed) -> np.ndarray:
        seg = localize_route(self.route, pose, 20, self.sim.route_spacing)
        action, _, self.state, _ = self.model.step(obs.rgb, speed, seg, self.state, reset=self.mode == "resetting")
        return action


def make_agent(kind: str, model=None, sim: SimConfig | None = None, mode: str = "recurrent"):
    if kind == "teacher":
        return TeacherAgent(sim)
    if kind == "random":
        return RandomAgent(sim)
    if kind in ("model", "bc"):
        if model is None:
            raise ValueError(f"{kind} agent needs a trained model")
        return ModelAgent(model, sim, mode)
    raise ValueError(f"unknown agent {kind!r}")


# -- closed loop ------------------------------------------------------------------


@dataclass
class TrialResult:
    scenario_id: str
    outcome: str  # success | collision | timeout | invalid-command
    trip_time: float | None
    wz_trace: list = field(default_factory=list)
    trial: int = 0
    cause: str = ""
    steps: int = 0
    final_distance: float = float("nan")

    @property
    def success(self) -> bool:
        return self.outcome == "success"


def run_trial(agent, entry: SuiteEntry, cfg: Config, trial: int = 0, record: bool = False):
    sim, cam = cfg.sim, cfg.camera
    sc = entry.scenario
    trial_seed = sc.seed * 100 + trial
    pose = sc.start
    if trial > 0:
        jitter = np.random.default_rng([sc.seed, trial]).uniform(-0.3, 0.3)
        pose = Pose(pose.x, pose.y, wrap_angle(pose.heading + jitter))
    route = plan_route(sc.world, pose, sc.goal, sim.robot_radius, sim.plan_margin)
    agent.begin(entry, route, trial_seed)
    limits = Limits(sim.v_max, sim.w_max)
    n_steps = int(round(sim.timeout / sim.dt))
    speed, trace, poses = 0.0, [], [pose]
    outcome, cause = "timeout", f"no arrival within {sim.timeout:g} s"
    for k in range(n_steps):
        obs = render_observation(sc.world, pose, cam, speed)
        raw = np.asarray(agent.act(sc.world, pose, obs, speed), dtype=np.float64)
        if raw.shape != (6,) or not np.all(np.isfinite(raw)):
            outcome, cause = "invalid-command", f"non-finite or malformed command at step {k}"
            break
        cmd, _ = clamp_command(ActionCommand.from_array(raw), limits)
        trace.append(cmd.wz)
        pose = step_kinematics(pose, cmd, sim.dt)
        speed = cmd.vx
        poses.append(pose)
        if check_collision(sc.world, pose, sim.robot_radius):
            outcome, cause = "collision", f"collision at step {k}"
            break
        if math.hypot(pose.x - sc.goal[0], pose.y - sc.goal[1]) < sim.success_radius:
            outcome, cause = "success", ""
            break
    dist = math.hypot(pose.x - sc.goal[0], pose.y - sc.goal[1])
    res = TrialResult(
        entry.scenario_id, outcome, len(trace) * sim.dt if outcome == "success" else None,
        trace, trial, cause, len(trace), dist,
    )
    if record:
        return res, np.array([[p.x, p.y, p.heading] for p in poses])
    return res


def run_closed_loop(agent, suite: list[SuiteEntry] | SuiteEntry, cfg: Config, trials: int = 1, mode: str | None = None) -> list[TrialResult]:
    """Run ``trials`` trials per scenario.  ``mode`` overrides a model agent's mode."""
    if isinstance(suite, SuiteEntry):
        suite = [suite]
    if mode is not None and isinstance(agent, ModelAgent):
        agent.mode = mode
    return [run_trial(agent, e, cfg, t) for e in suite for t in range(trials)]


# -- metrics ----------------------------------------------------------------------


@dataclass
class BenchmarkReport:
    sr: float
    wtt: float
    aa: float
    n_trials: int
    per_scenario: dict
    config_hash: str = ""
    checkpoint_hash: str = ""
    suite_digest: str = ""
    agent: str = ""
    mode: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wtt"] = "inf" if math.isinf(self.wtt) else self.wtt
        return d


def angular_acceleration(traces: list[list[float]], dt: float) -> float:
    """Mean of |Δwz|/dt pooled over every consecutive pair in every trace."""
    diffs = [np.abs(np.diff(np.asarray(t, dtype=np.float64))) / dt for t in traces if len(t) > 1]
    if not diffs:
        return 0.0
    return float(np.concatenate(diffs).mean())


def compute_metrics(trials: list[TrialResult], dt: float = 0.2, wtt_mode: str = "success", timeout: float = 120.0) -> BenchmarkReport:
    """SR, WTT and AA.

    ``wtt_mode="success"`` averages trip time over successful trials before
    dividing by SR; ``"all"`` averages over every trial with failures counted
    at the timeout.
    """
    if not trials:
        raise ValueError("compute_metrics needs at least one trial")
    n = len(trials)
    wins = [t for t in trials if t.success]
    sr = len(wins) / n
    if sr == 0:
        wtt = math.inf
    elif wtt_mode == "success":
        wtt = float(np.mean([t.trip_time for t in wins])) / sr
    elif wtt_mode == "all":
        wtt = float(np.mean([t.trip_time if t.success else timeout for t in trials])) / sr
    else:
        raise ValueError(f"unknown wtt_mode {wtt_mode!r}")
    aa = angular_acceleration([t.wz_trace for t in trials], dt)
    per: dict[str, dict] = {}
    for t in trials:
        d = per.setdefault(t.scenario_id, {"trials": 0, "successes": 0, "outcomes": []})
        d["trials"] += 1
        d["successes"] += int(t.success)
        d["outcomes"].append(t.outcome)
    for d in per.values():
        d["sr"] = d["successes"] / d["trials"]
    return BenchmarkReport(sr, wtt, aa, n, per)


def benchmark(agent, suite_name: str, cfg: Config, trials: int | None = None, mode: str | None = None, checkpoint_hash: str = "", n: int | None = None) -> tuple[BenchmarkReport, list[TrialResult]]:
    suite = build_suite(suite_name, cfg.sim, n)
    res = run_closed_loop(agent, suite, cfg, trials or cfg.eval.trials, mode)
    rep = compute_metrics(res, cfg.sim.dt, cfg.eval.wtt_mode, cfg.sim.timeout)
    rep.config_hash = config_hash(cfg)
    rep.checkpoint_hash = checkpoint_hash
    rep.suite_digest = suite_digest(suite)
    rep.agent = getattr(agent, "name", type(agent).__name__)
    rep.mode = getattr(agent, "mode", "")
    return rep, res


def write_report(report: BenchmarkReport, trials: list[TrialResult], out_dir: str | Path, name: str = "closed_loop") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jp = out / f"{name}.json"
    jp.write_text(json.dumps(report.to_dict(), indent=2))
    cp = out / f"{name}.csv"
    with open(cp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario_id", "trial", "outcome", "trip_time", "steps", "final_distance", "cause"])
        for t in trials:
            w.writerow([t.scenario_id, t.trial, t.outcome, "" if t.trip_time is None else f"{t.trip_time:.3f}", t.steps, f"{t.final_distance:.3f}", t.cause])
    return jp, cp


# -- open loop ----------------------------------------------------------------------


class ZeroPredictor:
    """Predicts the zero command and zero path everywhere."""

    def predict_open_loop(self, episode: Episode):
        n = len(episode) - 1
        return np.zeros((n, 6)), np.zeros((n, *episode.arrays["path"].shape[1:]))


class EchoPredictor:
    """Returns the logged targets; scores zero error by construction."""

    def predict_open_loop(self, episode: Episode):
        a = episode.arrays
        return a["action_command"][1:].astype(np.float64), a["path"][1:].astype(np.float64)


def eval_open_loop(model, episodes: list[Episode]) -> dict:
    """A-MAE, L-MAE and P-MAE over frames 1..N-1 of each teacher episode."""
    episodes = [ep for ep in episodes if len(ep) > 1]
    if not episodes:
        raise DatasetError("open-loop evaluation needs a non-empty teacher split")
    if not all(ep.has_route for ep in episodes):
        raise DatasetError("open-loop evaluation needs teacher episodes with route and path")
    if hasattr(model, "eval") and callable(model.eval):
        model.eval()
    acts, paths, tacts, tpaths = [], [], [], []
    for ep in episodes:
        a, p = model.predict_open_loop(ep)
        acts.append(np.asarray(a, dtype=np.float64))
        paths.append(np.asarray(p, dtype=np.float64).reshape(len(a), -1))
        tacts.append(ep.arrays["action_command"][1:].astype(np.float64))
        tpaths.append(ep.arrays["path"][1:].astype(np.float64).reshape(len(a), -1))
    a, p, ta, tp = (np.concatenate(x) for x in (acts, paths, tacts, tpaths))
    return {
        "A-MAE": float(np.abs(a[:, 5] - ta[:, 5]).mean()),
        "L-MAE": float(np.abs(a[:, 0] - ta[:, 0]).mean()),
        "P-MAE": float(np.abs(p - tp).mean()),
        "frames": int(len(a)),
    }


# -- semantics ---------------------------------------------------------------------


def iou_counts(pred: np.ndarray, label: np.ndarray, n_classes: int = N_CLASSES) -> tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union pixel counts."""
    pred = np.asarray(pred).ravel()
    label = np.asarray(label).ravel()
    inter = np.bincount(label[pred == label], minlength=n_classes)[:n_classes]
    area_p = np.bincount(pred, minlength=n_classes)[:n_classes]
    area_l = np.bincount(label, minlength=n_classes)[:n_classes]
    return inter.astype(np.int64), (area_p + area_l - inter).astype(np.int64)


def class_iou(pred: np.ndarray, label: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """Per-class IOU; NaN for classes absent from both maps."""
    inter, union = iou_counts(pred, label, n_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def eval_semantic_iou(model, episodes: list[Episode]) -> np.ndarray:
    """Per-class IOU of semantics decoded from estimated (observed) latents, pooled."""
    inter = np.zeros(N_CLASSES, np.int64)
    union = np.zeros(N_CLASSES, np.int64)
    for ep in episodes:
        pred = model.reconstruct_semantics(ep)
        i, u = iou_counts(pred, ep.arrays["semantic_label"][1:])
        inter += i
        union += u
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def eval_prediction_iou(model, episodes: list[Episode], horizon: int = 5, use_policy: bool = False, stride: int = 5) -> np.ndarray:
    """Pooled per-step, per-class IOU of imagined semantics, shape (horizon, classes).

    Each window observes one frame and imagines ``horizon`` steps ahead.
    """
    inter = np.zeros((horizon, N_CLASSES), np.int64)
    union = np.zeros((horizon, N_CLASSES), np.int64)
    n = 0
    for ep in episodes:
        for start in range(1, len(ep) - horizon, stride):
            pred = model.predict_semantics(ep, start, horizon, use_policy=use_policy)
            for k in range(horizon):
                i, u = iou_counts(pred[k], ep.arrays["semantic_label"][start + k + 1])
                inter[k] += i
                union[k] += u
            n += 1
    if n == 0:
        raise DatasetError(f"no episode is longer than horizon + 1 = {horizon + 1} frames")
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


# -- baseline ----------------------------------------------------------------------


def build_bc_baseline(cfg: Config) -> BCModel:
    torch.manual_seed(cfg.train.seed)
    return BCModel(cfg)


# -- ablations --------------------------------------------------------------------

ABLATIONS = ("full", "no-pretrain", "no-semantic")


def ablation_arms(cfg: Config, arms=ABLATIONS) -> dict[str, Config]:
    """Training configs for the ablation arms.

    ``no-pretrain`` skips stage 1; ``no-semantic`` drops the semantic decoding
    loss in both stages.  History resetting is an evaluation mode, not an arm.
    """
    out = {}
    for arm in arms:
        if arm == "full":
            out[arm] = cfg
        elif arm == "no-pretrain":
            out[arm] = replace(cfg, train=replace(cfg.train, no_pretrain=True))
        elif arm == "no-semantic":
            out[arm] = replace(cfg, train=replace(cfg.train, no_semantic=True))
        else:
            raise ValueError(f"unknown ablation {arm!r}; choose from {ABLATIONS}")
    return out


# -- plots -------------------------------------------------------------------------


def plot_curves(csv_paths: list[Path], out: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for p in csv_paths:
        rows = list(csv.DictReader(open(p)))
        for term in sorted({r["term"] for r in rows}):
            xs = [int(r["epoch"]) for r in rows if r["term"] == term]
            ys = [float(r["value"]) for r in rows if r["term"] == term]
            ax.plot(xs, ys, label=f"{Path(p).stem}:{term}")
    ax.set_xlabel("epoch")
    ax.set_yscale("log")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_iou(iou: np.ndarray, out: Path, cls: int = NAVIGABLE) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    steps = np.arange(1, len(iou) + 1)
    ax.plot(steps, iou[:, cls], marker="o", label="navigable")
    ax.plot(steps, np.nanmean(iou, axis=1), marker="s", label="class mean")
    ax.set_xlabel("imagined step")
    ax.set_ylabel("IOU")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_scenarios(report: dict, out: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    per = report["per_scenario"]
    names = list(per)
    fig, ax = plt.subplots(figsize=(max(4, 0.3 * len(names)), 3))
    ax.bar(range(len(names)), [per[k]["sr"] for k in names])
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=90, fontsize=5)
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out

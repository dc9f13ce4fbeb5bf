"""Scripted controllers that generate demonstrations and exploration data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..config import SimConfig
from .kinematics import ActionCommand, Limits, step_kinematics
from .route import arc_lengths, path_targets, point_at, project, to_robot_frame
from .world import Pose, World, check_collision

ROTATE_IN_PLACE = 0.9  # rad; beyond this bearing to the lookahead point the teacher turns on the spot


@dataclass
class TeacherOutput:
    command: ActionCommand
    path: np.ndarray
    empty_route: bool = False


def teacher_act(world: World, pose: Pose, route: np.ndarray, speed: float, sim: SimConfig | None = None) -> TeacherOutput:
    """Pure pursuit along ``route`` with curvature and goal slow-down.

    ``world`` and ``speed`` are accepted for interface symmetry with learned
    agents; the controller itself is stateless and map-free.
    """
    sim = sim or SimConfig()
    route = np.asarray(route, dtype=np.float64).reshape(-1, 2)
    if len(route) == 0:
        return TeacherOutput(ActionCommand(), np.zeros((5, 2)), empty_route=True)
    path = path_targets(route, pose, 5, sim.route_spacing)
    goal = route[-1]
    dist_goal = math.hypot(goal[0] - pose.x, goal[1] - pose.y)

    s0 = project(route, pose.xy)
    look = point_at(route, s0 + sim.lookahead)
    if np.allclose(look, pose.xy):
        look = goal
    lx, ly = to_robot_frame(look, pose)
    alpha = math.atan2(ly, lx)

    if abs(alpha) > ROTATE_IN_PLACE:
        wz = float(np.clip(2.0 * alpha, -sim.w_max, sim.w_max))
        return TeacherOutput(ActionCommand.planar(0.0, wz), path)

    d2 = lx * lx + ly * ly
    kappa = 2.0 * ly / d2 if d2 > 1e-12 else 0.0
    v = sim.v_max / (1.0 + 0.5 * abs(kappa))
    v = min(v, max(0.25, 0.8 * dist_goal))
    wz = v * kappa
    if abs(wz) > sim.w_max:
        wz = math.copysign(sim.w_max, wz)
        v = sim.w_max / abs(kappa)
    return TeacherOutput(ActionCommand.planar(v, wz), path)


@dataclass
class RandomPolicyState:
    held: ActionCommand = field(default_factory=ActionCommand)
    hold: int = 0


def random_act(
    rng: np.random.Generator,
    state: RandomPolicyState,
    dt: float,
    limits: Limits = Limits(),
    world: World | None = None,
    pose: Pose | None = None,
    radius: float = 0.3,
    hold_range: tuple[int, int] = (5, 25),
    horizon: float = 1.0,
    tries: int = 10,
) -> ActionCommand:
    """Hold a random command for a random number of steps, then redraw.

    When ``world`` and ``pose`` are given, redraws whose constant-command
    extrapolation over ``horizon`` seconds collides are rejected (up to
    ``tries`` times; the last draw is kept if all collide).
    """
    if state.hold > 0:
        state.hold -= 1
        return state.held
    n_steps = max(int(round(horizon / dt)), 1)
    for _ in range(tries):
        cmd = ActionCommand.planar(rng.uniform(0.0, limits.v_max), rng.uniform(-limits.w_max, limits.w_max))
        if world is None or pose is None:
            break
        p = pose
        hit = False
        for _ in range(n_steps):
            p = step_kinematics(p, cmd, dt)
            if check_collision(world, p, radius):
                hit = True
                break
        if not hit:
            break
    count = int(rng.integers(hold_range[0], hold_range[1] + 1))
    state.held = cmd
    state.hold = count - 1
    return cmd


class TeacherPolicy:
    tag = "teacher"

    def __init__(self, route: np.ndarray, sim: SimConfig | None = None):
        self.route = np.asarray(route, dtype=np.float64)
        self.sim = sim or SimConfig()

    def __call__(self, world: World, pose: Pose, speed: float) -> TeacherOutput:
        return teacher_act(world, pose, self.route, speed, self.sim)


class RandomPolicy:
    tag = "random"

    def __init__(self, seed: int, sim: SimConfig | None = None, avoid_collisions: bool = True):
        self.sim = sim or SimConfig()
        self.rng = np.random.default_rng(seed)
        self.state = RandomPolicyState()
        self.avoid = avoid_collisions

    def __call__(self, world: World, pose: Pose, speed: float) -> TeacherOutput:
        limits = Limits(self.sim.v_max, self.sim.w_max)
        cmd = random_act(
            self.rng,
            self.state,
            self.sim.dt,
            limits,
            world if self.avoid else None,
            pose,
            self.sim.robot_radius,
        )
        return TeacherOutput(cmd, None)


def route_length(route: np.ndarray) -> float:
    return float(arc_lengths(np.asarray(route, dtype=np.float64).reshape(-1, 2))[-1])

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import Pose


@dataclass(frozen=True)
class ActionCommand:
    """Linear (vx, vy, vz) and angular (wx, wy, wz) velocity command.

    A differential-drive robot only realizes ``vx`` and ``wz``; the other four
    components are carried so the command keeps its 6-vector shape.
    """

    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0
    wx: float = 0.0
    wy: float = 0.0
    wz: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.vz, self.wx, self.wy, self.wz], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "ActionCommand":
        a = np.asarray(a, dtype=np.float64).reshape(6)
        return cls(*(float(v) for v in a))

    @classmethod
    def planar(cls, vx: float, wz: float) -> "ActionCommand":
        return cls(vx=float(vx), wz=float(wz))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.to_array()).all())


@dataclass(frozen=True)
class Limits:
    v_max: float = 1.0
    w_max: float = 1.5
    v_min: float = -1.0


def clamp_command(cmd: ActionCommand, limits: Limits) -> tuple[ActionCommand, bool]:
    """Clip to a planar command within limits.  Returns ``(cmd, clipped)``.

    ``clipped`` flags any change, including zeroing the unrealizable axes.
    """
    vx = min(max(cmd.vx, limits.v_min), limits.v_max)
    wz = min(max(cmd.wz, -limits.w_max), limits.w_max)
    out = ActionCommand.planar(vx, wz)
    return out, out != cmd


def step_kinematics(pose: Pose, cmd: ActionCommand, dt: float, limits: Limits | None = None) -> Pose:
    """Integrate the unicycle model exactly over ``dt`` seconds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if limits is not None:
        cmd, _ = clamp_command(cmd, limits)
    v, w = cmd.vx, cmd.wz
    th = pose.heading
    if abs(w) < 1e-9:
        x = pose.x + v * math.cos(th) * dt
        y = pose.y + v * math.sin(th) * dt
    else:
        th1 = th + w * dt
        x = pose.x + v / w * (math.sin(th1) - math.sin(th))
        y = pose.y - v / w * (math.cos(th1) - math.cos(th))
    return Pose(x, y, th + w * dt)

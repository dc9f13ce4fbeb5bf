"""Polyline helpers shared by the teacher and the route localizer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import Pose


def to_robot_frame(points: np.ndarray, pose: Pose) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    d = np.asarray(points, dtype=np.float64) - np.array([pose.x, pose.y])
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def to_world_frame(points: np.ndarray, pose: Pose) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    p = np.asarray(points, dtype=np.float64)
    return np.stack(
        [c * p[..., 0] - s * p[..., 1] + pose.x, s * p[..., 0] + c * p[..., 1] + pose.y], axis=-1
    )


def arc_lengths(route: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def project(route: np.ndarray, p) -> float:
    """Arc length of the point on ``route`` nearest to ``p``."""
    route = np.asarray(route, dtype=np.float64)
    if len(route) == 1:
        return 0.0
    p = np.asarray(p, dtype=np.float64)
    a, b = route[:-1], route[1:]
    ab = b - a
    len2 = (ab**2).sum(axis=1)
    t = np.where(len2 > 0, ((p - a) * ab).sum(axis=1) / np.where(len2 > 0, len2, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    d2 = ((closest - p) ** 2).sum(axis=1)
    i = int(np.argmin(d2))
    s = arc_lengths(route)
    return float(s[i] + t[i] * math.sqrt(len2[i]))


def point_at(route: np.ndarray, s: np.ndarray | float) -> np.ndarray:
    """Points at arc lengths ``s`` (clamped to the route ends)."""
    route = np.asarray(route, dtype=np.float64)
    cum = arc_lengths(route)
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, cum[-1])
    if len(route) == 1:
        return np.broadcast_to(route[0], s.shape + (2,)).copy()
    x = np.interp(s, cum, route[:, 0])
    y = np.interp(s, cum, route[:, 1])
    return np.stack([x, y], axis=-1)


@dataclass(frozen=True)
class RouteSegment:
    poses: np.ndarray  # (n, 2) robot frame, masked rows zeroed
    valid: np.ndarray  # (n,) bool
    destination: np.ndarray  # (n,) float, 1.0 on the row holding the goal

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @property
    def has_goal(self) -> bool:
        return bool(self.destination.any())


def dest_code(seg: RouteSegment) -> int:
    """0: no destination in window, 1: last valid row is the goal, 2: every row."""
    if not seg.has_goal:
        return 0
    return 2 if seg.destination.all() else 1


def segment_from_stored(route: np.ndarray, n_valid: int, code: int) -> RouteSegment:
    """Rebuild a segment from the stored (n, 2) array plus its metadata."""
    n = len(route)
    valid = np.arange(n) < n_valid
    dest = np.zeros(n)
    if code == 2:
        dest[:] = 1.0
    elif code == 1:
        dest[n_valid - 1] = 1.0
    return RouteSegment(np.where(valid[:, None], route, 0.0), valid, dest)


def localize_route(route_world: np.ndarray, pose: Pose, n: int = 20, spacing: float = 0.5) -> RouteSegment:
    """Resample the route ahead of the robot and express it in the robot frame.

    Row 0 is the robot's projection onto the route; rows follow at ``spacing``
    meters of arc length.  If the goal falls inside the window, the last valid
    row is the goal itself and carries the destination flag; later rows are
    masked and zeroed.
    """
    route = np.asarray(route_world, dtype=np.float64).reshape(-1, 2)
    if len(route) == 0:
        raise ValueError("empty route")
    if len(route) == 1:
        pts = np.repeat(to_robot_frame(route, pose), n, axis=0)
        return RouteSegment(pts, np.ones(n, dtype=bool), np.ones(n))
    total = arc_lengths(route)[-1]
    s0 = project(route, pose.xy)
    remaining = total - s0
    s = s0 + spacing * np.arange(n)
    valid = np.ones(n, dtype=bool)
    dest = np.zeros(n)
    if remaining <= spacing * (n - 1) + 1e-12:
        n_valid = min(int(math.floor(remaining / spacing + 1e-9)) + 1, n)
        valid[n_valid:] = False
        s[n_valid - 1] = total
        dest[n_valid - 1] = 1.0
    pts = to_robot_frame(point_at(route, s), pose)
    pts[~valid] = 0.0
    return RouteSegment(pts, valid, dest)


def path_targets(route_world: np.ndarray, pose: Pose, n: int = 5, spacing: float = 0.5) -> np.ndarray:
    """Next ``n`` route points at ``spacing`` arc length ahead, robot frame."""
    route = np.asarray(route_world, dtype=np.float64).reshape(-1, 2)
    s0 = project(route, pose.xy)
    pts = point_at(route, s0 + spacing * np.arange(1, n + 1))
    return to_robot_frame(pts, pose)

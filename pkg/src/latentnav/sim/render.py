"""Ray-cast pseudo-perspective camera.

Each image column is one ray.  The first non-navigable cell hit at
(perpendicular) distance ``d`` occupies the band of lower rows whose floor
distance lies beyond ``d``; nearer lower rows show floor, upper rows show
background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..config import CameraConfig
from .world import BACKGROUND, NAVIGABLE, WALL, N_CLASSES, Pose, World

CLASS_COLORS = np.array(
    [
        [0.55, 0.55, 0.50],  # navigable
        [0.80, 0.80, 0.85],  # wall
        [0.60, 0.40, 0.20],  # pallet
        [1.00, 0.50, 0.00],  # cone
        [0.90, 0.10, 0.10],  # fence
        [0.60, 0.20, 0.80],  # sign
        [0.30, 0.50, 0.80],  # background
    ],
    dtype=np.float32,
)
assert len(CLASS_COLORS) == N_CLASSES

NEAR_FLOOR = 0.45  # floor distance seen by the bottom image row (m)


@dataclass(frozen=True)
class Observation:
    rgb: np.ndarray
    semantic: np.ndarray
    speed: float


def ray_bearings(heading: float, cam: CameraConfig) -> np.ndarray:
    j = np.arange(cam.n_rays)
    return heading + cam.fov * (j / (cam.n_rays - 1) - 0.5)


def cast_rays(world: World, x: float, y: float, angles: np.ndarray, max_range: float):
    """Exact grid traversal for many rays at once.

    Returns ``(dist, cls)``: euclidean distance to the first non-navigable cell
    (``inf`` beyond ``max_range``) and that cell's class.
    """
    cs = world.cell_size
    grid = world.grid
    h, w = grid.shape
    n = len(angles)
    dx = np.cos(angles)
    dy = np.sin(angles)
    ix = np.full(n, int(math.floor(x / cs)))
    iy = np.full(n, int(math.floor(y / cs)))
    sx = np.where(dx > 0, 1, -1)
    sy = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore"):
        tdx = np.where(dx != 0, cs / np.abs(dx), np.inf)
        tdy = np.where(dy != 0, cs / np.abs(dy), np.inf)
    bx = np.where(dx > 0, (ix + 1) * cs - x, x - ix * cs)
    by = np.where(dy > 0, (iy + 1) * cs - y, y - iy * cs)
    with np.errstate(divide="ignore", invalid="ignore"):
        tmx = np.where(dx != 0, bx / np.abs(dx), np.inf)
        tmy = np.where(dy != 0, by / np.abs(dy), np.inf)

    dist = np.full(n, np.inf)
    cls = np.full(n, NAVIGABLE, dtype=np.uint8)
    active = np.ones(n, dtype=bool)

    def probe(t):
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        c = np.full(n, WALL, dtype=np.uint8)
        c[inside] = grid[iy[inside], ix[inside]]
        hit = active & (c != NAVIGABLE)
        dist[hit] = t[hit]
        cls[hit] = c[hit]
        active[hit] = False

    probe(np.zeros(n))
    max_steps = int(math.ceil(2 * max_range / cs)) + 4
    for _ in range(max_steps):
        if not active.any():
            break
        use_x = tmx < tmy
        t = np.where(use_x, tmx, tmy)
        over = active & (t > max_range)
        active[over] = False
        ix = np.where(active & use_x, ix + sx, ix)
        iy = np.where(active & ~use_x, iy + sy, iy)
        tmx = np.where(active & use_x, tmx + tdx, tmx)
        tmy = np.where(active & ~use_x, tmy + tdy, tmy)
        probe(t)
    return dist, cls


def floor_distances(cam: CameraConfig) -> np.ndarray:
    """Perpendicular floor distance seen by each row below the horizon."""
    half = cam.n_rows // 2
    k = np.arange(cam.n_rows - half) + 0.5
    fy = (cam.n_rows - half - 0.5) * NEAR_FLOOR / cam.height
    return cam.height * fy / k


def band_height(d: float, cam: CameraConfig) -> int:
    """Rows covered by an obstacle at perpendicular distance ``d``."""
    return int((floor_distances(cam) >= d).sum())


def projected_height(d: float, cam: CameraConfig) -> float:
    """Continuous pinhole band height in rows, proportional to 1/d."""
    half = cam.n_rows // 2
    fy = (cam.n_rows - half - 0.5) * NEAR_FLOOR / cam.height
    return cam.height * fy / d


def render_observation(world: World, pose: Pose, cam: CameraConfig, speed: float) -> Observation:
    bearings = ray_bearings(pose.heading, cam)
    dist, cls = cast_rays(world, pose.x, pose.y, bearings, cam.max_range)
    perp = dist * np.cos(bearings - pose.heading)

    H, W = cam.n_rows, cam.n_rays
    half = H // 2
    floor_d = floor_distances(cam)  # (H - half,)
    sem = np.full((H, W), BACKGROUND, dtype=np.uint8)
    obstacle = floor_d[:, None] >= perp[None, :]
    sem[half:] = np.where(obstacle, cls[None, :], NAVIGABLE)

    shade = np.ones((H, W), dtype=np.float32)
    lower_d = np.where(obstacle, perp[None, :], floor_d[:, None])
    shade[half:] = 1.0 / np.maximum(lower_d, 1.0)
    rgb = CLASS_COLORS[sem] * shade[..., None]
    return Observation(rgb.astype(np.float32), sem, float(speed))

"""8-connected A* on an inflated occupancy grid."""

from __future__ import annotations

import heapq
import math

import numpy as np

from .world import Pose, World

SQRT2 = math.sqrt(2.0)
MOVES = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)]


class NoRouteError(RuntimeError):
    pass


def neighbors(blocked: np.ndarray, iy: int, ix: int):
    """Free 8-neighbours; diagonal moves may not cut a blocked corner."""
    h, w = blocked.shape
    for dy, dx in MOVES:
        ny, nx = iy + dy, ix + dx
        if not (0 <= ny < h and 0 <= nx < w) or blocked[ny, nx]:
            continue
        if dy and dx and (blocked[iy, nx] or blocked[ny, ix]):
            continue
        yield ny, nx, (SQRT2 if dy and dx else 1.0)


def astar(blocked: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> tuple[list, float]:
    """Shortest cell path (in cell units of cost) or :class:`NoRouteError`."""
    if blocked[start] or blocked[goal]:
        raise NoRouteError(f"start {start} or goal {goal} is blocked")

    def octile(c):
        dy, dx = abs(c[0] - goal[0]), abs(c[1] - goal[1])
        return (dx + dy) + (SQRT2 - 2.0) * min(dx, dy)

    g = {start: 0.0}
    parent = {start: None}
    heap = [(octile(start), 0, start)]
    counter = 0
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            path = []
            while cur is not None:
                path.append(cur)
                cur = parent[cur]
            return path[::-1], g[goal]
        closed.add(cur)
        for ny, nx, c in neighbors(blocked, *cur):
            nxt = (ny, nx)
            cand = g[cur] + c
            if cand < g.get(nxt, math.inf):
                g[nxt] = cand
                parent[nxt] = cur
                counter += 1
                heapq.heappush(heap, (cand + octile(nxt), counter, nxt))
    raise NoRouteError(f"goal {goal} unreachable from {start}")


def simplify(cells: list) -> list:
    """Drop interior cells where the step direction does not change."""
    if len(cells) <= 2:
        return list(cells)
    out = [cells[0]]
    for prev, cur, nxt in zip(cells, cells[1:], cells[2:]):
        if (cur[0] - prev[0], cur[1] - prev[1]) != (nxt[0] - cur[0], nxt[1] - cur[1]):
            out.append(cur)
    out.append(cells[-1])
    return out


def plan_route(
    world: World,
    start: Pose,
    goal: tuple[float, float],
    robot_radius: float = 0.3,
    plan_margin: float = 0.2,
) -> np.ndarray:
    """Waypoints (N, 2) in world meters from ``start`` to ``goal``."""
    blocked = world.inflated(robot_radius + plan_margin)
    s = world.cell_of(start.x, start.y)
    t = world.cell_of(*goal)
    for c in (s, t):
        if not (0 <= c[0] < blocked.shape[0] and 0 <= c[1] < blocked.shape[1]):
            raise NoRouteError(f"cell {c} outside the map")
    if s == t:
        return np.array([[goal[0], goal[1]]], dtype=np.float64)
    cells, _ = astar(blocked, s, t)
    pts = [world.cell_center(*c) for c in simplify(cells)]
    pts[0] = (start.x, start.y)
    pts[-1] = (float(goal[0]), float(goal[1]))
    return np.asarray(pts, dtype=np.float64)

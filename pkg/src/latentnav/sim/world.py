"""Grid worlds, poses and scenario generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

NAVIGABLE, WALL, PALLET, CONE, FENCE, SIGN, BACKGROUND = range(7)
CLASS_NAMES = ("navigable", "wall", "pallet", "cone", "fence", "sign", "background")
N_CLASSES = len(CLASS_NAMES)
OBSTACLE_CLASSES = (PALLET, CONE, FENCE, SIGN)

FAMILIES = ("open", "corridor", "clutter", "narrow-clutter")


class ScenarioError(RuntimeError):
    pass


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class ScenarioSpec:
    family: str = "open"
    width: int = 32
    height: int = 32
    cell_size: float = 0.25
    obstacle_density: float = 0.0
    corridor_width: float = 1.5
    min_start_goal: float = 3.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown scenario family {self.family!r}")
        if self.width < 5 or self.height < 5:
            raise ValueError("grid must be at least 5x5 cells")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class World:
    grid: np.ndarray
    cell_size: float

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=np.uint8)
        if grid.ndim != 2:
            raise ValueError("grid must be 2-D")
        if grid.max(initial=0) >= N_CLASSES:
            raise ValueError("class id out of range")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def bounds(self) -> tuple[float, float]:
        h, w = self.grid.shape
        return w * self.cell_size, h * self.cell_size

    @property
    def navigable(self) -> np.ndarray:
        return self.grid == NAVIGABLE

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(y / self.cell_size)), int(math.floor(x / self.cell_size))

    def cell_center(self, iy: int, ix: int) -> tuple[float, float]:
        return (ix + 0.5) * self.cell_size, (iy + 0.5) * self.cell_size

    def inside(self, x: float, y: float) -> bool:
        bx, by = self.bounds
        return 0.0 <= x < bx and 0.0 <= y < by

    def inflated(self, radius: float) -> np.ndarray:
        """Blocked mask: cells whose center lies within ``radius`` of any obstacle cell."""
        return ndimage.binary_dilation(
            ~self.navigable, structure=_disk_footprint(radius, self.cell_size)
        )

    def to_dict(self) -> dict:
        return {"grid": self.grid.tolist(), "cell_size": self.cell_size}

    def __hash__(self):
        return hash((self.grid.tobytes(), self.grid.shape, self.cell_size))

    def __eq__(self, other):
        return (
            isinstance(other, World)
            and self.cell_size == other.cell_size
            and np.array_equal(self.grid, other.grid)
        )


def _disk_footprint(radius: float, cell_size: float) -> np.ndarray:
    # offset cell (dy, dx) is in the footprint when the distance from the
    # center cell's center to the nearest point of that cell is <= radius
    r = int(math.ceil(radius / cell_size)) + 1
    d = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    gx = np.maximum(np.abs(dx) - 0.5, 0.0) * cell_size
    gy = np.maximum(np.abs(dy) - 0.5, 0.0) * cell_size
    return np.hypot(gx, gy) <= radius


def check_collision(world: World, pose: Pose, radius: float) -> bool:
    """True iff any non-navigable cell lies within ``radius`` of the pose.

    Distance is measured to the nearest point of each cell square.  Poses
    outside the map count as collisions.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    x, y = pose.x, pose.y
    if not world.inside(x, y):
        return True
    cs = world.cell_size
    h, w = world.grid.shape
    ix0 = max(int(math.floor((x - radius) / cs)), 0)
    ix1 = min(int(math.floor((x + radius) / cs)), w - 1)
    iy0 = max(int(math.floor((y - radius) / cs)), 0)
    iy1 = min(int(math.floor((y + radius) / cs)), h - 1)
    if (x - radius) < 0 or (y - radius) < 0 or (x + radius) >= w * cs or (y + radius) >= h * cs:
        return True
    sub = world.grid[iy0 : iy1 + 1, ix0 : ix1 + 1]
    blocked = sub != NAVIGABLE
    if not blocked.any():
        return False
    ys, xs = np.nonzero(blocked)
    lx = (xs + ix0) * cs
    ly = (ys + iy0) * cs
    dx = np.maximum(np.maximum(lx - x, x - (lx + cs)), 0.0)
    dy = np.maximum(np.maximum(ly - y, y - (ly + cs)), 0.0)
    return bool((dx * dx + dy * dy <= radius * radius).any())


# -- scenario generation ------------------------------------------------------

FAMILY_DEFAULTS = {
    "open": dict(width=32, height=32, obstacle_density=0.0),
    "corridor": dict(width=48, height=32, corridor_width=1.5),
    "clutter": dict(width=40, height=40, obstacle_density=0.05),
    "narrow-clutter": dict(width=64, height=18, obstacle_density=0.04, corridor_width=3.5),
}


def default_spec(family: str, **kw) -> ScenarioSpec:
    if family not in FAMILY_DEFAULTS:
        raise ValueError(f"unknown scenario family {family!r}; choose from {FAMILIES}")
    params = dict(FAMILY_DEFAULTS[family])
    params.update(kw)
    return ScenarioSpec(family=family, **params)


@dataclass(frozen=True)
class Scenario:
    world: World
    start: Pose
    goal: tuple[float, float]
    seed: int
    spec: ScenarioSpec


def _walled(h: int, w: int) -> np.ndarray:
    g = np.zeros((h, w), dtype=np.uint8)
    g[0, :] = g[-1, :] = WALL
    g[:, 0] = g[:, -1] = WALL
    return g


def _place_blocks(rng, g, density, region=None, keep_clear=()):
    h, w = g.shape
    y0, y1, x0, x1 = region or (1, h - 1, 1, w - 1)
    area = (y1 - y0) * (x1 - x0)
    target = int(round(density * area))
    placed = 0
    tries = 0
    while placed < target and tries < 50 * max(target, 1):
        tries += 1
        cls = int(rng.choice(OBSTACLE_CLASSES))
        if cls == CONE or cls == SIGN:
            bh, bw = 1, 1
        elif cls == FENCE:
            bh, bw = (1, int(rng.integers(2, 5))) if rng.random() < 0.5 else (int(rng.integers(2, 5)), 1)
        else:
            bh, bw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        if y1 - y0 - bh <= 0 or x1 - x0 - bw <= 0:
            continue
        iy = int(rng.integers(y0, y1 - bh + 1))
        ix = int(rng.integers(x0, x1 - bw + 1))
        if any(iy - 1 <= cy <= iy + bh and ix - 1 <= cx <= ix + bw for cy, cx in keep_clear):
            continue
        block = g[iy : iy + bh, ix : ix + bw]
        placed += int((block == NAVIGABLE).sum())
        block[...] = cls
    return g


def _clearance(g: np.ndarray, cell_size: float) -> np.ndarray:
    """Distance (m) from each cell center to the nearest obstacle cell edge."""
    free = g == NAVIGABLE
    return np.where(free, ndimage.distance_transform_edt(free) * cell_size - 0.5 * cell_size, 0.0)


def _connected(blocked: np.ndarray, a: tuple[int, int], b: tuple[int, int]) -> bool:
    if blocked[a] or blocked[b]:
        return False
    # diagonal moves never cut corners, so 4-connectivity matches the planner
    labels, _ = ndimage.label(~blocked)
    return labels[a] == labels[b] and labels[a] != 0


def generate_scenario(
    seed: int,
    spec: ScenarioSpec,
    robot_radius: float = 0.3,
    plan_margin: float = 0.2,
    max_tries: int = 50,
) -> Scenario:
    """Build a random world of the given family with a connected start/goal pair.

    Same ``(seed, spec)`` always yields the same world.  Raises
    :class:`ScenarioError` if no valid layout is found within ``max_tries``.
    """
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, FAMILIES.index(spec.family)])
    inflate = robot_radius + plan_margin
    cs = spec.cell_size
    for _ in range(max_tries):
        g, start_cell, goal_cell = _layout(rng, spec, inflate)
        if start_cell is None:
            continue
        world = World(g, cs)
        blocked = world.inflated(inflate)
        if not _connected(blocked, start_cell, goal_cell):
            continue
        sx, sy = world.cell_center(*start_cell)
        gx, gy = world.cell_center(*goal_cell)
        heading = math.atan2(gy - sy, gx - sx) + rng.uniform(-0.5, 0.5)
        return Scenario(world, Pose(sx, sy, heading), (gx, gy), int(seed), spec)
    raise ScenarioError(
        f"could not generate a connected {spec.family} scenario for seed {seed} "
        f"after {max_tries} tries"
    )


def _pick_cell(rng, clear: np.ndarray, need: float, region=None):
    h, w = clear.shape
    mask = clear >= need
    if region is not None:
        y0, y1, x0, x1 = region
        sub = np.zeros_like(mask)
        sub[y0:y1, x0:x1] = True
        mask &= sub
    cells = np.argwhere(mask)
    if len(cells) == 0:
        return None
    iy, ix = cells[int(rng.integers(len(cells)))]
    return int(iy), int(ix)


def _layout(rng, spec: ScenarioSpec, inflate: float):
    h, w, cs = spec.height, spec.width, spec.cell_size
    g = _walled(h, w)
    need = inflate + 0.05
    fam = spec.family
    if fam == "open" or fam == "clutter":
        if fam == "clutter" and spec.obstacle_density > 0:
            _place_blocks(rng, g, spec.obstacle_density)
        clear = _clearance(g, cs)
        for _ in range(50):
            a = _pick_cell(rng, clear, need)
            b = _pick_cell(rng, clear, need)
            if a is None or b is None:
                return g, None, None
            if math.dist(a, b) * cs >= spec.min_start_goal:
                return g, a, b
        return g, None, None
    if fam == "corridor":
        gap = max(int(round(spec.corridor_width / cs)), 2)
        n_walls = int(rng.integers(1, 4))
        xs = np.linspace(0, w, n_walls + 2)[1:-1].astype(int)
        for k, xw in enumerate(xs):
            cls = WALL if rng.random() < 0.7 else FENCE
            if (k + int(rng.integers(2))) % 2 == 0:
                g[1 : h - 1 - gap, xw] = cls
            else:
                g[1 + gap : h - 1, xw] = cls
        if spec.obstacle_density > 0:
            _place_blocks(rng, g, spec.obstacle_density)
        clear = _clearance(g, cs)
        left = (1, h - 1, 1, max(xs[0], 2))
        right = (1, h - 1, min(xs[-1] + 1, w - 2), w - 1)
        a = _pick_cell(rng, clear, need, left)
        b = _pick_cell(rng, clear, need, right)
        if rng.random() < 0.5:
            a, b = b, a
        return g, a, b
    # narrow-clutter: a long corridor, start and goal near opposite ends on the
    # centerline, at least one obstacle forced onto the centerline
    half = max(int(round(spec.corridor_width / cs / 2)), 2)
    cy = h // 2
    g[:] = WALL
    g[max(cy - half, 1) : min(cy + half, h - 1), 1 : w - 1] = NAVIGABLE
    start = (cy, 3)
    goal = (cy, w - 4)
    keep = [start, goal]
    y0, y1 = max(cy - half, 1), min(cy + half, h - 1)
    _place_blocks(rng, g, spec.obstacle_density, (y0 + 2, y1 - 2, 6, w - 6), keep_clear=keep)
    bx = int(rng.integers(w // 4, 3 * w // 4))
    g[cy, bx] = int(rng.choice(OBSTACLE_CLASSES))
    clear = _clearance(g, cs)
    if clear[start] < need or clear[goal] < need:
        return g, None, None
    if rng.random() < 0.5:
        start, goal = goal, start
    return g, start, goal


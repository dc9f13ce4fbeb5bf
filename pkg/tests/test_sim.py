import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentnav.config import CameraConfig, ConfigError, SimConfig
from latentnav.sim import (
    BACKGROUND,
    NAVIGABLE,
    WALL,
    ActionCommand,
    Limits,
    NoRouteError,
    Pose,
    RandomPolicy,
    RandomPolicyState,
    ScenarioError,
    World,
    check_collision,
    clamp_command,
    default_spec,
    generate_scenario,
    plan_route,
    random_act,
    render_observation,
    step_kinematics,
    teacher_act,
)
from latentnav.sim.planner import astar, neighbors
from latentnav.sim.render import band_height, cast_rays, projected_height
from latentnav.sim.route import arc_lengths
from latentnav.sim.world import FAMILIES, wrap_angle


def room(h=20, w=20, cs=0.25):
    g = np.zeros((h, w), np.uint8)
    g[0, :] = g[-1, :] = g[:, 0] = g[:, -1] = WALL
    return World(g, cs)


def segment_cells(world, a, b, step=None):
    """Cells touched by segment a->b, by dense sampling."""
    step = step or world.cell_size / 32
    n = max(int(math.ceil(math.dist(a, b) / step)), 1)
    t = np.linspace(0, 1, n + 1)
    xs, ys = a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])
    return {(int(y // world.cell_size), int(x // world.cell_size)) for x, y in zip(xs, ys)}


# -- world / scenarios ----------------------------------------------------------


def test_open_room_only_boundary_walls():
    sc = generate_scenario(0, default_spec("open", width=20, height=20))
    g = sc.world.grid
    assert (g[1:-1, 1:-1] == NAVIGABLE).all()
    assert (g[0] != NAVIGABLE).all() and (g[:, -1] != NAVIGABLE).all()
    assert sc.world.grid[sc.world.cell_of(*sc.start.xy)] == NAVIGABLE
    assert sc.world.grid[sc.world.cell_of(*sc.goal)] == NAVIGABLE


@pytest.mark.parametrize("family", FAMILIES)
def test_generation_is_deterministic(family):
    a = generate_scenario(11, default_spec(family))
    b = generate_scenario(11, default_spec(family))
    assert np.array_equal(a.world.grid, b.world.grid)
    assert a.start == b.start and a.goal == b.goal


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("seed", range(5))
def test_world_invariants(family, seed):
    sc = generate_scenario(seed, default_spec(family))
    g = sc.world.grid
    assert g.max() < 7
    border = np.concatenate([g[0], g[-1], g[:, 0], g[:, -1]])
    assert (border != NAVIGABLE).all()
    # connected under the planner's inflation
    route = plan_route(sc.world, sc.start, sc.goal)
    assert np.allclose(route[0], sc.start.xy) and np.allclose(route[-1], sc.goal)


def test_narrow_clutter_seed7_blocks_straight_line():
    sc = generate_scenario(7, default_spec("narrow-clutter"))
    cells = segment_cells(sc.world, tuple(sc.start.xy), sc.goal)
    assert any(sc.world.grid[c] != NAVIGABLE for c in cells)


def test_generation_failure_is_explicit():
    spec = default_spec("open", width=5, height=5, min_start_goal=50.0)
    with pytest.raises(ScenarioError):
        generate_scenario(0, spec, max_tries=3)


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        default_spec("maze")


@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


# -- kinematics -----------------------------------------------------------------


def test_straight_step():
    p = step_kinematics(Pose(0, 0, 0), ActionCommand.planar(1, 0), 0.2)
    assert (p.x, p.y, p.heading) == pytest.approx((0.2, 0, 0))


def test_turn_in_place():
    p = step_kinematics(Pose(0, 0, 0), ActionCommand.planar(0, math.pi), 0.5)
    assert (p.x, p.y, p.heading) == pytest.approx((0, 0, math.pi / 2))


def test_arc_endpoint():
    p = step_kinematics(Pose(0, 0, 0), ActionCommand.planar(1, 1), 0.2)
    assert (p.x, p.y, p.heading) == pytest.approx((math.sin(0.2), 1 - math.cos(0.2), 0.2), abs=1e-12)


@given(
    st.floats(-10, 10), st.floats(-10, 10), st.floats(-3.1, 3.1),
    st.floats(-1, 1), st.floats(-1.5, 1.5), st.floats(0.01, 1.0),
)
def test_split_step_equals_single_step(x, y, th, v, w, dt):
    cmd = ActionCommand.planar(v, w)
    one = step_kinematics(Pose(x, y, th), cmd, dt)
    two = step_kinematics(step_kinematics(Pose(x, y, th), cmd, dt / 2), cmd, dt / 2)
    assert abs(one.x - two.x) < 1e-9 and abs(one.y - two.y) < 1e-9
    assert abs(wrap_angle(one.heading - two.heading)) < 1e-9


def test_clamp_flags_and_zeroes_unrealizable_axes():
    cmd, clipped = clamp_command(ActionCommand(vx=3, vy=1, wz=-4), Limits())
    assert clipped and cmd == ActionCommand.planar(1.0, -1.5)
    cmd, clipped = clamp_command(ActionCommand.planar(0.5, 0.2), Limits())
    assert not clipped


def test_nonpositive_dt_rejected():
    with pytest.raises(ValueError):
        step_kinematics(Pose(0, 0, 0), ActionCommand(), 0.0)


# -- collision --------------------------------------------------------------------


def brute_min_distance(world, x, y):
    best = math.inf
    cs = world.cell_size
    for iy, ix in zip(*np.nonzero(world.grid != NAVIGABLE)):
        dx = max(ix * cs - x, x - (ix + 1) * cs, 0.0)
        dy = max(iy * cs - y, y - (iy + 1) * cs, 0.0)
        best = min(best, math.hypot(dx, dy))
    return best


def test_collision_basic():
    w = room(40, 40)
    assert not check_collision(w, Pose(5, 5, 0), 0.3)
    assert check_collision(w, Pose(0.1, 5, 0), 0.3)
    assert check_collision(w, Pose(-1, 5, 0), 0.3)


@pytest.mark.parametrize("eps", [1e-6, 1e-3])
def test_collision_threshold_against_brute_force(eps):
    g = room(20, 20).grid.copy()
    g[9, 12] = WALL
    w = World(g, 0.25)
    x, y = 2.5, 2.4
    d = brute_min_distance(w, x, y)
    assert not check_collision(w, Pose(x, y, 0), d - eps)
    assert check_collision(w, Pose(x, y, 0), d + eps)


@settings(max_examples=60)
@given(st.floats(0.3, 4.7), st.floats(0.3, 4.7), st.floats(0.05, 0.6))
def test_collision_matches_brute_force(x, y, r):
    g = room(20, 20).grid.copy()
    g[8:10, 5] = WALL
    g[14, 11:14] = 3
    w = World(g, 0.25)
    d = brute_min_distance(w, x, y)
    if abs(d - r) > 1e-9:
        assert check_collision(w, Pose(x, y, 0), r) == (d <= r)


# -- camera -----------------------------------------------------------------------


def test_camera_config_validation():
    with pytest.raises(ConfigError):
        CameraConfig(n_rays=4)
    with pytest.raises(ConfigError):
        CameraConfig(fov=math.pi)


def test_empty_view_is_background_over_floor():
    cam = CameraConfig(n_rays=16, n_rows=12, max_range=3.0)
    w = room(200, 200)
    obs = render_observation(w, Pose(25, 25, 0.3), cam, 0.0)
    assert (obs.semantic[:6] == BACKGROUND).all()
    assert (obs.semantic[6:] == NAVIGABLE).all()
    assert obs.rgb.shape == (12, 16, 3) and obs.rgb.min() >= 0 and obs.rgb.max() <= 1


def test_wall_band_shrinks_with_distance():
    cam = CameraConfig(n_rays=9, n_rows=64)
    w = room(40, 80)
    heights = []
    for x in np.arange(2.0, 18.0, 0.5):
        obs = render_observation(w, Pose(x, 5.0, 0.0), cam, 0.0)
        heights.append(int((obs.semantic[:, 4] == WALL).sum()))
    # the wall is ahead at x = 19.75; bands grow as the robot approaches
    assert all(a <= b for a, b in zip(heights, heights[1:]))
    assert heights[-1] > heights[0]


@given(st.floats(0.3, 7.9), st.floats(0.3, 7.9))
def test_projected_height_pinhole(d1, d2):
    cam = CameraConfig()
    if d1 < d2:
        assert projected_height(d1, cam) > projected_height(d2, cam)
        assert band_height(d1, cam) >= band_height(d2, cam)
    assert math.isclose(projected_height(d1, cam) * d1, projected_height(d2, cam) * d2)


def test_raycast_distance_to_flat_wall():
    w = room(40, 40)
    d, cls = cast_rays(w, 5.0, 5.0, np.array([0.0, math.pi / 2, math.pi]), 20.0)
    assert d == pytest.approx([4.75, 4.75, 4.75])
    assert (cls == WALL).all()


def test_render_is_deterministic():
    sc = generate_scenario(3, default_spec("clutter"))
    cam = CameraConfig(n_rays=24, n_rows=16)
    a = render_observation(sc.world, sc.start, cam, 0.4)
    b = render_observation(sc.world, sc.start, cam, 0.4)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.semantic, b.semantic)


# -- planner ----------------------------------------------------------------------


def bfs_cost(blocked, s, t):
    """Dijkstra over the same move set (uniform-cost BFS on two edge weights)."""
    import heapq

    dist = {s: 0.0}
    pq = [(0.0, s)]
    while pq:
        d, c = heapq.heappop(pq)
        if c == t:
            return d
        if d > dist[c]:
            continue
        for ny, nx, w in neighbors(blocked, *c):
            if d + w < dist.get((ny, nx), math.inf) - 1e-12:
                dist[(ny, nx)] = d + w
                heapq.heappush(pq, (d + w, (ny, nx)))
    return math.inf


def grid_bfs_reachable(blocked, s):
    seen = {s}
    q = deque([s])
    while q:
        c = q.popleft()
        for ny, nx, _ in neighbors(blocked, *c):
            if (ny, nx) not in seen:
                seen.add((ny, nx))
                q.append((ny, nx))
    return seen


def test_astar_matches_reference_on_random_grids():
    rng = np.random.default_rng(42)
    checked = 0
    for _ in range(100):
        h, w = rng.integers(5, 51, size=2)
        blocked = rng.random((h, w)) < 0.25
        free = np.argwhere(~blocked)
        if len(free) < 2:
            continue
        s, t = (tuple(free[i]) for i in rng.choice(len(free), 2, replace=False))
        ref = bfs_cost(blocked, s, t)
        if math.isinf(ref):
            with pytest.raises(NoRouteError):
                astar(blocked, s, t)
        else:
            cells, cost = astar(blocked, s, t)
            assert cost == pytest.approx(ref, abs=1e-9)
            assert cells[0] == s and cells[-1] == t
            checked += 1
    assert checked > 30


def test_straight_corridor_route():
    w = room(20, 40)
    r = plan_route(w, Pose(1.0, 2.5, 0), (8.5, 2.5))
    assert len(r) == 2
    assert arc_lengths(r)[-1] == pytest.approx(7.5, abs=w.cell_size * math.sqrt(2))


def test_same_cell_route_is_single_waypoint():
    w = room()
    r = plan_route(w, Pose(2.55, 2.55, 0), (2.7, 2.7))
    assert r.shape == (1, 2)


def test_detour_cost_matches_reference():
    g = room(20, 30).grid.copy()
    g[6:19, 15] = WALL
    w = World(g, 0.25)
    blocked = w.inflated(0.5)
    s, t = w.cell_of(1.5, 2.5), w.cell_of(6.0, 2.5)
    _, cost = astar(blocked, s, t)
    assert cost == pytest.approx(bfs_cost(blocked, s, t))


def test_unreachable_goal():
    g = room(20, 30).grid.copy()
    g[:, 15] = WALL
    with pytest.raises(NoRouteError):
        plan_route(World(g, 0.25), Pose(1.5, 2.5, 0), (6.0, 2.5))


def test_inflation_matches_distance_definition():
    g = room(12, 12).grid.copy()
    g[6, 6] = 3
    w = World(g, 0.25)
    blocked = w.inflated(0.5)
    for iy in range(12):
        for ix in range(12):
            cx, cy = w.cell_center(iy, ix)
            assert blocked[iy, ix] == (brute_min_distance(w, cx, cy) <= 0.5)


# -- policies ---------------------------------------------------------------------


def test_teacher_straight_ahead():
    route = np.array([[1.0, 1.0], [9.0, 1.0]])
    out = teacher_act(None, Pose(1.0, 1.0, 0.0), route, 1.0)
    assert abs(out.command.wz) < 1e-9
    assert out.command.vx == pytest.approx(1.0)
    assert out.path.shape == (5, 2)
    assert out.path[:, 0] == pytest.approx([0.5, 1.0, 1.5, 2.0, 2.5])


def test_teacher_turns_left_and_slows():
    route = np.array([[0.0, 0.0], [0.0, 0.6], [0.0, 5.0]])
    out = teacher_act(None, Pose(0.0, 0.0, 0.0), route, 0.0)
    assert out.command.wz > 0 and out.command.vx < 1.0


def test_teacher_within_limits_and_empty_route_flag():
    sim = SimConfig()
    rng = np.random.default_rng(1)
    route = np.cumsum(rng.normal(size=(6, 2)), axis=0)
    for _ in range(50):
        p = Pose(*rng.normal(size=2), rng.uniform(-3, 3))
        c = teacher_act(None, p, route, 0.0, sim).command
        assert 0 <= c.vx <= sim.v_max and abs(c.wz) <= sim.w_max
    out = teacher_act(None, Pose(0, 0, 0), np.zeros((0, 2)), 0.0)
    assert out.empty_route and out.command == ActionCommand()


def test_random_hold_countdown():
    state = RandomPolicyState(ActionCommand.planar(0.5, 0.2), 3)
    cmd = random_act(np.random.default_rng(0), state, 0.2)
    assert cmd == ActionCommand.planar(0.5, 0.2) and state.hold == 2


def test_random_replay_is_identical():
    w = room(40, 40)

    def run():
        pol = RandomPolicy(9)
        return [pol(w, Pose(5, 5, 0), 0.0).command for _ in range(200)]

    assert run() == run()


def test_random_vx_histogram_uniform():
    rng = np.random.default_rng(123)
    state = RandomPolicyState()
    lim = Limits()
    draws = []
    for _ in range(10_000):
        was_new = state.hold == 0
        cmd = random_act(rng, state, 0.2, lim)
        if was_new:
            draws.append(cmd.vx)
        assert 5 <= state.hold + 1 <= 25 or not was_new
    counts, _ = np.histogram(draws, bins=10, range=(0, lim.v_max))
    n = len(draws)
    exp = n / 10
    sd = math.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(counts - exp) <= 3 * sd)


def test_random_rejects_colliding_draws():
    # facing a wall 0.6 m away: most forward draws would collide within 1 s
    w = room(40, 40)
    pose = Pose(0.95, 5.0, math.pi)
    hits = 0
    for seed in range(40):
        cmd = random_act(np.random.default_rng(seed), RandomPolicyState(), 0.2, Limits(), w, pose, 0.3)
        p = pose
        for _ in range(5):
            p = step_kinematics(p, cmd, 0.2)
            hits += check_collision(w, p, 0.3)
            if check_collision(w, p, 0.3):
                break
    assert hits <= 4

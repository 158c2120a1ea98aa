import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fistlab import maze
from fistlab.maze import EnvConfig, MazeLayout, PlanningError, WaypointController


@pytest.fixture(scope="module")
def layout():
    return maze.default_layout()


def _room(rows, cols, walls=()):
    grid = [["#"] * (cols + 2)] + [["#"] + ["."] * cols + ["#"] for _ in range(rows)] + [["#"] * (cols + 2)]
    for r, c in walls:
        grid[r][c] = "#"
    return MazeLayout.from_text("\n".join("".join(row) for row in grid))


def test_default_layout_shape_and_regions(layout):
    assert layout.shape == (10, 13)
    assert sorted(layout.regions) == ["bottom", "left", "right"]
    assert len(layout.free_cells()) > 40


def test_layout_text_roundtrip(layout):
    assert MazeLayout.from_text(layout.to_text()).to_text() == layout.to_text()


def test_layout_rejects_open_border():
    with pytest.raises(maze.LayoutError):
        MazeLayout.from_text("###\n#..\n###")


def _components(lay):
    free = set(lay.free_cells())
    seen, comps = set(), 0
    for c in free:
        if c in seen:
            continue
        comps += 1
        stack = [c]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack += [(cur[0] + dr, cur[1] + dc) for dr, dc in maze.NEIGHBORS if (cur[0] + dr, cur[1] + dc) in free]
    return comps


@pytest.mark.parametrize("region", [None, "left", "right", "bottom"])
def test_free_space_connected_with_or_without_block(layout, region):
    assert _components(layout.blocked(region)) == 1


# dynamics


def test_step_fixed_point(layout):
    s = np.array([5.5, 1.5, 0.0, 0.0])
    np.testing.assert_array_equal(maze.step(s, [0.0, 0.0], layout, EnvConfig()), s)


def test_step_free_flight():
    room = _room(5, 5)
    s = maze.step(np.array([2.0, 2.0, 0.9, 0.0]), [1.0, 0.0], room, EnvConfig())
    np.testing.assert_allclose(s, [2.1, 2.0, 1.0, 0.0], atol=1e-12)


def test_speed_is_capped():
    room = _room(5, 5)
    s = maze.step(np.array([3.0, 3.0, 0.9, 0.9]), [1.0, 1.0], room, EnvConfig())
    assert np.hypot(s[2], s[3]) <= EnvConfig().v_max + 1e-12


def test_head_on_collision_zeroes_normal_velocity():
    room = _room(1, 1)  # 3x3 grid, the single free cell is (1, 1)
    env = EnvConfig()
    # every axis-aligned approach that would cross a wall face within one step
    for axis, sign in [(0, 1), (0, -1), (1, 1), (1, -1)]:
        s = np.array([1.5, 1.5, 0.0, 0.0])
        s[axis] = 1.5 + sign * 0.45
        s[2 + axis] = sign * 0.9
        s[3 - axis] = 0.2  # tangential component survives
        out = maze.step(s, np.zeros(2), room, env)
        assert out[2 + axis] == 0.0
        assert out[3 - axis] == 0.2
        assert out[axis] == (2.0 - maze.WALL_EPS if sign > 0 else 1.0 + maze.WALL_EPS)
        assert maze.cell_of(out[:2]) == (1, 1)


def test_dynamics_never_enter_walls(layout):
    rng = np.random.default_rng(0)
    free = layout.free_cells()
    env = EnvConfig()
    cells = np.array(free)[rng.integers(len(free), size=100_000)]
    pos = cells[:, ::-1] + rng.uniform(0, 1, size=(100_000, 2))
    vel = rng.uniform(-1, 1, size=(100_000, 2)) * env.v_max / np.sqrt(2)
    actions = rng.uniform(-1, 1, size=(100_000, 2))
    for p, v, a in zip(pos, vel, actions):
        s = maze.step(np.concatenate([p, v]), a, layout, env)
        assert layout.is_free(maze.cell_of(s[:2]))
        assert np.hypot(s[2], s[3]) <= env.v_max + 1e-9


# planning


def test_plan_trivial_and_open_room():
    room = _room(5, 5)
    assert maze.plan_waypoints(room, (1, 1), (1, 1)) == [(1, 1)]
    assert len(maze.plan_waypoints(room, (1, 1), (1, 4))) == 4


def test_plan_unreachable_raises():
    room = _room(3, 3, walls=[(1, 2), (2, 2), (3, 2)])
    with pytest.raises(PlanningError):
        maze.plan_waypoints(room, (1, 1), (1, 3))


def _brute_shortest(lay, start, goal):
    best = [None]

    def dfs(cur, visited):
        if best[0] is not None and len(visited) >= best[0]:
            return
        if cur == goal:
            best[0] = len(visited)
            return
        for dr, dc in maze.NEIGHBORS:
            nxt = (cur[0] + dr, cur[1] + dc)
            if lay.is_free(nxt) and nxt not in visited:
                dfs(nxt, visited | {nxt})

    dfs(start, {start})
    return best[0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.booleans(), min_size=16, max_size=16), st.integers(0, 15), st.integers(0, 15))
def test_plan_matches_exhaustive_search(wall_bits, a, b):
    walls = [(1 + k // 4, 1 + k % 4) for k, bit in enumerate(wall_bits) if bit and k not in (a, b)]
    room = _room(4, 4, walls)
    start, goal = (1 + a // 4, 1 + a % 4), (1 + b // 4, 1 + b % 4)
    expected = _brute_shortest(room, start, goal)
    if expected is None:
        with pytest.raises(PlanningError):
            maze.plan_waypoints(room, start, goal)
    else:
        path = maze.plan_waypoints(room, start, goal)
        assert len(path) == expected
        assert all(abs(p[0] - q[0]) + abs(p[1] - q[1]) == 1 for p, q in zip(path, path[1:]))


def test_u_shaped_obstacle():
    # a U of walls forces a detour around its open top
    room = _room(5, 5, walls=[(2, 2), (3, 2), (4, 2), (4, 3), (4, 4), (3, 4), (2, 4)])
    assert len(maze.plan_waypoints(room, (3, 1), (3, 3))) == _brute_shortest(room, (3, 1), (3, 3)) == 7


# controller


def test_waypoint_policy_at_center_is_zero():
    ctl = WaypointController([(2, 2)])
    np.testing.assert_array_equal(maze.waypoint_policy(np.array([2.5, 2.5, 0, 0]), ctl), [0.0, 0.0])


def test_waypoint_policy_points_toward_waypoint():
    ctl = WaypointController([(2, 2), (2, 3)])
    a = maze.waypoint_policy(np.array([2.5, 2.5, 0, 0]), ctl)
    assert a[0] > 0 and a[1] == 0


@pytest.mark.parametrize("region", ["left", "right", "bottom"])
def test_oracle_reaches_region_goal(layout, region):
    goal = maze.region_goal(layout, region)
    start = np.array([6.5, 3.5, 0.0, 0.0])
    _, _, final = maze.rollout_to_goal(layout, start, goal, EnvConfig())
    assert maze.reached(final, maze.cell_center(goal), EnvConfig())


# data generation


def test_empty_corpus(layout):
    assert maze.generate_offline_data(layout, "left", 0).n_transitions == 0


@pytest.mark.parametrize("region", ["left", "right", "bottom"])
def test_corpus_avoids_blocked_region(layout, region):
    ds = maze.generate_offline_data(layout, region, 5000, noise_std=0.1, seed=3)
    assert ds.n_transitions == 5000
    assert not layout.region(region).contains(ds.all_states()).any()


def test_corpus_is_deterministic(layout):
    a = maze.generate_offline_data(layout, "left", 3000, noise_std=0.2, seed=7)
    b = maze.generate_offline_data(layout, "left", 3000, noise_std=0.2, seed=7)
    assert a.trajectories == b.trajectories and a.metadata == b.metadata
    c = maze.generate_offline_data(layout, "left", 3000, noise_std=0.2, seed=8)
    assert a.trajectories != c.trajectories


@pytest.mark.parametrize("region", ["left", "right", "bottom"])
def test_demos_end_at_goal(layout, region):
    demos = maze.generate_demos(layout, region, m=10, seed=0)
    goal = tuple(demos.goal["cell"])
    assert len(demos) == 10
    for tr in demos:
        assert maze.reached(tr.states[-1], maze.cell_center(goal), EnvConfig())
        assert maze.cell_of(tr.states[-1][:2]) == goal
        assert not layout.region(region).contains(tr.states[0])[0]


def test_single_demo(layout):
    assert len(maze.generate_demos(layout, "right", m=1)) == 1


def test_evaluation_starts_fixed_and_outside(layout):
    a = maze.evaluation_starts(layout, "left", 10, seed=0)
    assert a == maze.evaluation_starts(layout, "left", 10, seed=0)
    assert not any(c in layout.region("left").cells for c in a)

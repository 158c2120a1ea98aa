"""Continuous point-mass maze with a breadth-first waypoint oracle.

Coordinates: cell ``(row, col)`` covers ``x in [col, col+1)`` and
``y in [row, row+1)``. A state is the float array ``[x, y, vx, vy]`` and an
action is ``[ax, ay]`` in ``[-1, 1]^2``.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datastore import DemoSet, Trajectory, TrajectoryDataset

STATE_DIM = 4
ACTION_DIM = 2
REGION_TAGS = {"L": "left", "R": "right", "B": "bottom"}
WALL_EPS = 1e-6

# 8 x 11 interior; three dead-end arms tagged as blockable regions
DEFAULT_LAYOUT = """\
#############
#LLL#.....#R#
#L#L#.#.#.#R#
#L#L....#.#R#
#L###.#.#.#R#
#L#...#....R#
###.#.#.#.###
#...#.#.#BBB#
#.#...#..##B#
#############
"""

# up, down, left, right
NEIGHBORS = ((-1, 0), (1, 0), (0, -1), (0, 1))


class PlanningError(RuntimeError):
    pass


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.1
    v_max: float = 1.0
    max_steps: int = 2000
    goal_radius: float = 0.5
    kp: float = 10.0
    kd: float = 2.0
    waypoint_tol: float = 0.25

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"EnvConfig.{k} must be positive, got {v}")


@dataclass(frozen=True)
class CellRegion:
    """A set of grid cells, queried with continuous states."""

    name: str
    cells: frozenset = field(default_factory=frozenset)

    def contains(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states))
        if not self.cells:
            return np.zeros(len(states), dtype=bool)
        rows = np.floor(states[:, 1]).astype(int)
        cols = np.floor(states[:, 0]).astype(int)
        return np.array([(r, c) in self.cells for r, c in zip(rows, cols)], dtype=bool)

    def __len__(self):
        return len(self.cells)


class MazeLayout:
    def __init__(self, walls: np.ndarray, regions: dict[str, frozenset] | None = None):
        self.walls = np.asarray(walls, dtype=bool)
        self.regions = {k: frozenset(v) for k, v in (regions or {}).items()}
        rows, cols = self.walls.shape
        border = np.concatenate([self.walls[0], self.walls[-1], self.walls[:, 0], self.walls[:, -1]])
        if not border.all():
            raise LayoutError("border cells must be walls")
        for name, cells in self.regions.items():
            for r, c in cells:
                if self.walls[r, c]:
                    raise LayoutError(f"region {name} contains wall cell {(r, c)}")

    @classmethod
    def from_text(cls, text: str) -> "MazeLayout":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        width = len(lines[0])
        if any(len(ln) != width for ln in lines):
            raise LayoutError("layout rows have unequal length")
        walls = np.zeros((len(lines), width), dtype=bool)
        regions: dict[str, set] = {name: set() for name in REGION_TAGS.values()}
        for r, line in enumerate(lines):
            for c, ch in enumerate(line):
                if ch == "#":
                    walls[r, c] = True
                elif ch in REGION_TAGS:
                    regions[REGION_TAGS[ch]].add((r, c))
                elif ch != ".":
                    raise LayoutError(f"unknown layout character {ch!r} at {(r, c)}")
        return cls(walls, {k: frozenset(v) for k, v in regions.items() if v})

    @classmethod
    def from_file(cls, path) -> "MazeLayout":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        tag = {cell: ch for ch, name in REGION_TAGS.items() for cell in self.regions.get(name, ())}
        rows = []
        for r in range(self.shape[0]):
            rows.append("".join("#" if self.walls[r, c] else tag.get((r, c), ".") for c in range(self.shape[1])))
        return "\n".join(rows) + "\n"

    @property
    def shape(self) -> tuple[int, int]:
        return self.walls.shape

    def is_free(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.shape[0] and 0 <= c < self.shape[1] and not self.walls[r, c]

    def free_cells(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(~self.walls))]

    def region(self, name: str | None) -> CellRegion:
        if name is None or name == "none":
            return CellRegion("none")
        if name not in self.regions:
            raise LayoutError(f"unknown region {name!r}; have {sorted(self.regions)}")
        return CellRegion(name, self.regions[name])

    def blocked(self, name: str | None) -> "MazeLayout":
        """Copy of the layout with a region's cells turned into walls."""
        if name is None or name == "none":
            return self
        walls = self.walls.copy()
        for r, c in self.region(name).cells:
            walls[r, c] = True
        return MazeLayout(walls, {k: v for k, v in self.regions.items() if k != name})

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def default_layout() -> MazeLayout:
    return MazeLayout.from_text(DEFAULT_LAYOUT)


def cell_of(pos) -> tuple[int, int]:
    return int(np.floor(pos[1])), int(np.floor(pos[0]))


def cell_center(cell) -> np.ndarray:
    r, c = cell
    return np.array([c + 0.5, r + 0.5])


def step(state, action, layout: MazeLayout, config: EnvConfig) -> np.ndarray:
    """Semi-implicit Euler with per-axis wall resolution."""
    x, y, vx, vy = (float(v) for v in state)
    ax, ay = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    vx, vy = vx + ax * config.dt, vy + ay * config.dt
    speed = np.hypot(vx, vy)
    if speed > config.v_max:
        vx, vy = vx * config.v_max / speed, vy * config.v_max / speed

    nx = x + vx * config.dt
    if layout.walls[int(np.floor(y)), int(np.floor(nx))]:
        wall_col = int(np.floor(nx))
        nx = wall_col - WALL_EPS if vx > 0 else wall_col + 1 + WALL_EPS
        vx = 0.0
    ny = y + vy * config.dt
    if layout.walls[int(np.floor(ny)), int(np.floor(nx))]:
        wall_row = int(np.floor(ny))
        ny = wall_row - WALL_EPS if vy > 0 else wall_row + 1 + WALL_EPS
        vy = 0.0
    return np.array([nx, ny, vx, vy])


def plan_waypoints(layout: MazeLayout, start_cell, goal_cell) -> list[tuple[int, int]]:
    start_cell, goal_cell = tuple(start_cell), tuple(goal_cell)
    for name, cell in (("start", start_cell), ("goal", goal_cell)):
        if not layout.is_free(cell):
            raise PlanningError(f"{name} cell {cell} is not free")
    parent = {start_cell: None}
    queue = deque([start_cell])
    while queue:
        cur = queue.popleft()
        if cur == goal_cell:
            break
        for dr, dc in NEIGHBORS:
            nxt = (cur[0] + dr, cur[1] + dc)
            if nxt not in parent and layout.is_free(nxt):
                parent[nxt] = cur
                queue.append(nxt)
    if goal_cell not in parent:
        raise PlanningError(f"goal {goal_cell} unreachable from {start_cell}")
    path = [goal_cell]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


@dataclass
class WaypointController:
    """PD tracking of successive cell centres along a planned path.

    With a ``layout`` attached the controller replans from the current cell
    whenever momentum carries the point off the path.
    """

    path: list
    config: EnvConfig = field(default_factory=EnvConfig)
    index: int = 0
    layout: MazeLayout | None = None

    def __post_init__(self):
        if not self.path:
            raise PlanningError("empty waypoint path")

    @property
    def target(self) -> np.ndarray:
        return cell_center(self.path[self.index])

    def __call__(self, state) -> np.ndarray:
        return waypoint_policy(state, self)


def waypoint_policy(state, controller: WaypointController) -> np.ndarray:
    pos, vel = np.asarray(state[:2], dtype=float), np.asarray(state[2:], dtype=float)
    if controller.layout is not None:
        cur = cell_of(pos)
        if cur not in controller.path[max(controller.index - 1, 0) : controller.index + 1]:
            controller.path = plan_waypoints(controller.layout, cur, controller.path[-1])
            controller.index = 0
    while controller.index < len(controller.path) - 1 and np.linalg.norm(controller.target - pos) < controller.config.waypoint_tol:
        controller.index += 1
    cfg = controller.config
    return np.clip(cfg.kp * (controller.target - pos) - cfg.kd * vel, -1.0, 1.0)


def reached(state, goal_pos, config: EnvConfig) -> bool:
    return bool(np.linalg.norm(np.asarray(state[:2]) - goal_pos) < config.goal_radius)


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _start_state(cell, rng: np.random.Generator | None, jitter: float) -> np.ndarray:
    pos = cell_center(cell)
    if rng is not None and jitter > 0:
        pos = pos + rng.uniform(-jitter, jitter, size=2)
    return np.array([pos[0], pos[1], 0.0, 0.0])


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def generate_offline_data(
    layout: MazeLayout,
    blocked_region: str | None,
    n_transitions: int,
    noise_std: float = 0.0,
    seed: int = 0,
    env: EnvConfig | None = None,
    episode_length: int = 1000,
    start_jitter: float = 0.3,
) -> TrajectoryDataset:
    """Roll the oracle between random goals on the blocked maze.

    Each trajectory has its own RNG stream derived from ``(seed, index)``, so
    any trajectory can be regenerated independently of the others.
    """
    env = env or EnvConfig()
    maze = layout.blocked(blocked_region)
    free = maze.free_cells()
    meta = {
        "generator": "offline",
        "blocked_region": blocked_region or "none",
        "n_transitions": int(n_transitions),
        "noise_std": float(noise_std),
        "seed": int(seed),
        "episode_length": int(episode_length),
        "layout": layout.digest(),
        "env": asdict(env),
    }
    trajectories = []
    remaining = int(n_transitions)
    k = 0
    while remaining > 0:
        rng = trajectory_rng(seed, k)
        length = min(episode_length, remaining)
        trajectories.append(_random_goal_rollout(maze, free, env, rng, length, noise_std, start_jitter))
        remaining -= length
        k += 1
    return TrajectoryDataset(trajectories, STATE_DIM, ACTION_DIM, {**meta, "config_hash": config_hash(meta)})


def _random_goal_rollout(maze, free, env, rng, length, noise_std, start_jitter) -> Trajectory:
    state = _start_state(free[rng.integers(len(free))], rng, start_jitter)
    states = np.empty((length, STATE_DIM))
    actions = np.empty((length, ACTION_DIM))
    controller = goal = None
    for t in range(length):
        if controller is None or reached(state, goal, env):
            cur = cell_of(state)
            choices = [c for c in free if c != cur]
            goal_cell = choices[rng.integers(len(choices))]
            controller = WaypointController(plan_waypoints(maze, cur, goal_cell), env, layout=maze)
            goal = cell_center(goal_cell)
        action = controller(state)
        if noise_std > 0:
            action = np.clip(action + rng.normal(0.0, noise_std, size=ACTION_DIM), -1.0, 1.0)
        states[t], actions[t] = state, action
        state = step(state, action, maze, env)
    return Trajectory(states, actions)


def region_goal(layout: MazeLayout, region: str) -> tuple[int, int]:
    """Deepest cell of a region: farthest (BFS) from the rest of the maze."""
    cells = layout.region(region).cells
    outside = [c for c in layout.free_cells() if c not in cells]
    dist = {c: 0 for c in outside}
    queue = deque(outside)
    while queue:
        cur = queue.popleft()
        for dr, dc in NEIGHBORS:
            nxt = (cur[0] + dr, cur[1] + dc)
            if nxt not in dist and layout.is_free(nxt):
                dist[nxt] = dist[cur] + 1
                queue.append(nxt)
    return max(sorted(cells), key=lambda c: dist[c])


def rollout_to_goal(layout, state, goal_cell, env: EnvConfig, max_steps: int | None = None):
    """Run the oracle from ``state`` until it is within the goal radius."""
    max_steps = env.max_steps if max_steps is None else max_steps
    controller = WaypointController(plan_waypoints(layout, cell_of(state), goal_cell), env, layout=layout)
    goal = cell_center(goal_cell)
    states, actions = [], []
    for _ in range(max_steps):
        if reached(state, goal, env):
            break
        action = controller(state)
        states.append(state)
        actions.append(action)
        state = step(state, action, layout, env)
    return np.array(states).reshape(-1, STATE_DIM), np.array(actions).reshape(-1, ACTION_DIM), state


def generate_demos(
    layout: MazeLayout,
    region: str,
    m: int = 10,
    seed: int = 0,
    env: EnvConfig | None = None,
    goal_cell=None,
    start_jitter: float = 0.3,
) -> DemoSet:
    """Expert demos on the unblocked maze from random outside starts to a goal inside ``region``.

    Each recorded trajectory ends with the first state inside the goal radius
    (paired with a zero action), so its final cell is the goal cell.
    """
    env = env or EnvConfig()
    goal_cell = tuple(goal_cell) if goal_cell is not None else region_goal(layout, region)
    inside = layout.region(region).cells
    starts = [c for c in layout.free_cells() if c not in inside]
    trajectories = []
    for k in range(m):
        rng = trajectory_rng(seed, 10_000 + k)
        state = _start_state(starts[rng.integers(len(starts))], rng, start_jitter)
        states, actions, final = rollout_to_goal(layout, state, goal_cell, env)
        if not reached(final, cell_center(goal_cell), env):
            raise PlanningError(f"demo {k} did not reach goal {goal_cell}")
        states = np.vstack([states, final])
        actions = np.vstack([actions, np.zeros(ACTION_DIM)])
        trajectories.append(Trajectory(states, actions))
    goal = {
        "region": region,
        "cell": list(goal_cell),
        "position": cell_center(goal_cell).tolist(),
        "radius": env.goal_radius,
        "seed": int(seed),
        "layout": layout.digest(),
    }
    return DemoSet(trajectories, goal, STATE_DIM, ACTION_DIM)


def evaluation_starts(layout: MazeLayout, region: str | None, n: int, seed: int) -> list[tuple[int, int]]:
    """Fixed start cells outside ``region``, drawn once from the master seed."""
    inside = layout.region(region).cells
    candidates = [c for c in layout.free_cells() if c not in inside]
    rng = trajectory_rng(seed, 20_000)
    idx = rng.choice(len(candidates), size=n, replace=n > len(candidates))
    return [candidates[i] for i in idx]

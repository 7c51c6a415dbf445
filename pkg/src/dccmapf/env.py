"""Classical MAPF grid world: maps, instances, stepping and observations.

Cells are addressed ``(row, col)``. Agents act simultaneously; a mover whose
target is blocked, contested or part of a swap is sent back to its cell, and
the check repeats until no conflict remains. Agents stay in the world after
reaching their goals.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

UP, DOWN, LEFT, RIGHT, STAY = range(5)
ACTIONS = ("up", "down", "left", "right", "stay")
N_ACTIONS = 5
MOVES = kernels.MOVES

REWARD_MOVE = -0.075
REWARD_STAY_ON_GOAL = 0.0
REWARD_STAY_OFF_GOAL = -0.075
REWARD_COLLISION = -0.5
REWARD_FINISH = 3.0
REWARD_VALUES = (REWARD_MOVE, REWARD_COLLISION, REWARD_STAY_ON_GOAL, REWARD_FINISH)

UNREACHABLE = -1
DEFAULT_FOV = 9
OBS_CHANNELS = 6
DEFAULT_STEP_LIMIT = 256


class InstanceError(RuntimeError):
    """Raised when no valid start/goal assignment can be produced."""


@dataclass(frozen=True, eq=False)
class GridMap:
    obstacles: np.ndarray  # (m, m) bool

    def __post_init__(self):
        obs = np.asarray(self.obstacles, dtype=bool)
        if obs.ndim != 2 or obs.shape[0] != obs.shape[1]:
            raise ValueError(f"map must be square, got shape {obs.shape}")
        object.__setattr__(self, "obstacles", obs)

    @property
    def size(self) -> int:
        return self.obstacles.shape[0]

    def free(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.size and 0 <= c < self.size and not self.obstacles[r, c]

    def __eq__(self, other):
        return isinstance(other, GridMap) and np.array_equal(self.obstacles, other.obstacles)


@dataclass(eq=False)
class Instance:
    map: GridMap
    starts: np.ndarray  # (n, 2)
    goals: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=np.int64).reshape(-1, 2)
        self.goals = np.asarray(self.goals, dtype=np.int64).reshape(-1, 2)
        if self.starts.shape != self.goals.shape:
            raise ValueError("starts and goals must pair up")

    @property
    def n_agents(self) -> int:
        return len(self.starts)

    def validate(self) -> None:
        cells = [tuple(p) for p in self.starts] + [tuple(p) for p in self.goals]
        if len(set(cells)) != len(cells):
            raise InstanceError("start/goal positions overlap")
        for cell in cells:
            if not self.map.free(cell):
                raise InstanceError(f"position {cell} is not a free cell")
        for s, g in zip(self.starts, self.goals):
            if distance_field(self.map, g)[tuple(s)] == UNREACHABLE:
                raise InstanceError(f"goal {tuple(g)} unreachable from {tuple(s)}")

    def __eq__(self, other):
        return (
            isinstance(other, Instance)
            and self.map == other.map
            and np.array_equal(self.starts, other.starts)
            and np.array_equal(self.goals, other.goals)
        )


@dataclass
class EnvState:
    positions: np.ndarray  # (n, 2)
    goals: np.ndarray  # (n, 2)
    step_count: int = 0
    step_limit: int = DEFAULT_STEP_LIMIT

    @property
    def arrived(self) -> np.ndarray:
        return np.all(self.positions == self.goals, axis=1)

    @property
    def done(self) -> bool:
        return bool(self.arrived.all()) or self.step_count >= self.step_limit

    def copy(self) -> "EnvState":
        return EnvState(self.positions.copy(), self.goals, self.step_count, self.step_limit)


@dataclass
class StepOutcome:
    rewards: np.ndarray
    collided: np.ndarray
    done: bool
    reset_rounds: int = 0


# -- generation ------------------------------------------------------------

def sample_density(rng: np.random.Generator) -> float:
    return float(rng.triangular(0.0, 0.33, 0.5))


def generate_map(m: int, rng: np.random.Generator, density: float | None = None) -> GridMap:
    """Random m×m map; obstacle density defaults to a triangular(0, .33, .5) draw."""
    if m < 4:
        raise ValueError(f"map size must be >= 4, got {m}")
    if density is None:
        density = sample_density(rng)
    return GridMap(rng.random((m, m)) < density)


def components(grid: GridMap) -> np.ndarray:
    """Connected-component label per free cell (-1 on obstacles)."""
    labels = np.full(grid.obstacles.shape, -1, dtype=np.int64)
    free = np.argwhere(~grid.obstacles)
    label = 0
    for r, c in free:
        if labels[r, c] >= 0:
            continue
        dist = kernels.bfs_distance(grid.obstacles.view(np.uint8), int(r), int(c))
        labels[dist >= 0] = label
        label += 1
    return labels


def make_instance(grid: GridMap, n: int, rng: np.random.Generator, max_tries: int = 100) -> Instance:
    """Pick n start/goal pairs, all 2n cells distinct, each goal reachable.

    Each attempt draws 2n distinct free cells and pairs them; the attempt is
    rejected unless every pair lies in one connected component.
    """
    free = np.argwhere(~grid.obstacles)
    if len(free) < 2 * n:
        raise InstanceError(f"need {2 * n} free cells, map has {len(free)}")
    labels = components(grid)
    for _ in range(max_tries):
        pick = free[rng.choice(len(free), size=2 * n, replace=False)]
        starts, goals = pick[:n], pick[n:]
        if np.all(labels[starts[:, 0], starts[:, 1]] == labels[goals[:, 0], goals[:, 1]]):
            return Instance(grid, starts, goals)
    raise InstanceError(f"no reachable assignment for {n} agents after {max_tries} tries")


def distance_field(grid: GridMap, goal) -> np.ndarray:
    """Exact 4-neighbour BFS distance to ``goal``; UNREACHABLE (-1) elsewhere."""
    r, c = int(goal[0]), int(goal[1])
    if not grid.free((r, c)):
        raise ValueError(f"goal {(r, c)} is not a free cell")
    return kernels.bfs_distance(grid.obstacles.view(np.uint8), r, c)


def heuristic_planes(grid: GridMap, dist: np.ndarray) -> np.ndarray:
    """(m, m, 4) bits: moving up/down/left/right lowers the distance by one."""
    return kernels.heuristic_planes(grid.obstacles.view(np.uint8), np.ascontiguousarray(dist, dtype=np.int32))


# -- observations ----------------------------------------------------------

def build_observation(state: EnvState, instance: Instance, i: int, fields, fov: int = DEFAULT_FOV) -> np.ndarray:
    """Observation of agent ``i``: an (fov, fov, 6) uint8 window centred on it.

    ``fields`` is the list of per-agent distance fields (only ``fields[i]``
    is read).
    """
    if fov % 2 == 0:
        raise ValueError(f"fov must be odd, got {fov}")
    grid = instance.map
    m = grid.size
    rad = fov // 2
    r0, c0 = state.positions[i]
    planes = heuristic_planes(grid, fields[i])
    obs = np.zeros((fov, fov, OBS_CHANNELS), dtype=np.uint8)
    others = {tuple(p) for j, p in enumerate(state.positions) if j != i}
    for fr in range(fov):
        for fc in range(fov):
            r, c = r0 + fr - rad, c0 + fc - rad
            if not (0 <= r < m and 0 <= c < m) or grid.obstacles[r, c]:
                obs[fr, fc, 0] = 1
                continue
            if (r, c) in others:
                obs[fr, fc, 1] = 1
            obs[fr, fc, 2:] = planes[r, c]
    return obs


def neighbors_in_fov(positions: np.ndarray, fov: int = DEFAULT_FOV) -> list[list[tuple[int, tuple[int, int]]]]:
    """Per agent, ``(j, (row, col))`` for every other agent inside its window."""
    rad = fov // 2
    diff = positions[None, :, :] - positions[:, None, :]
    inside = np.all(np.abs(diff) <= rad, axis=2)
    np.fill_diagonal(inside, False)
    out = []
    for i in range(len(positions)):
        js = np.flatnonzero(inside[i])
        out.append([(int(j), (int(diff[i, j, 0] + rad), int(diff[i, j, 1] + rad))) for j in js])
    return out


# -- dynamics --------------------------------------------------------------

def initial_state(instance: Instance, step_limit: int = DEFAULT_STEP_LIMIT) -> EnvState:
    return EnvState(instance.starts.copy(), instance.goals, 0, step_limit)


def step(state: EnvState, instance: Instance, actions) -> tuple[EnvState, StepOutcome]:
    """Advance every agent one tick; a pure function of (state, actions)."""
    actions = np.asarray(actions, dtype=np.int64)
    n = len(state.positions)
    if actions.shape != (n,):
        raise ValueError(f"expected {n} actions, got {actions.shape}")
    if state.done:
        raise RuntimeError("step() on a finished episode")
    if n and (actions.min() < 0 or actions.max() >= N_ACTIONS):
        raise ValueError(f"actions must lie in [0, {N_ACTIONS})")
    new_pos, collided, rounds = kernels.resolve_moves(
        state.positions, actions, instance.map.obstacles.view(np.uint8)
    )
    new_state = EnvState(new_pos, state.goals, state.step_count + 1, state.step_limit)
    arrived = new_state.arrived
    rewards = np.where(
        actions == STAY,
        np.where(arrived, REWARD_STAY_ON_GOAL, REWARD_STAY_OFF_GOAL),
        REWARD_MOVE,
    ).astype(np.float32)
    rewards[collided] = REWARD_COLLISION
    if n and arrived.all():
        rewards[:] = REWARD_FINISH
    return new_state, StepOutcome(rewards, collided, new_state.done, rounds)


def is_success(state: EnvState) -> bool:
    return bool(state.arrived.all()) and state.step_count <= state.step_limit


class MAPFEnv:
    """One episode on one instance with cached per-agent heuristic planes."""

    def __init__(self, instance: Instance, step_limit: int = DEFAULT_STEP_LIMIT, fov: int = DEFAULT_FOV):
        if fov % 2 == 0:
            raise ValueError(f"fov must be odd, got {fov}")
        self.instance = instance
        self.fov = fov
        self.step_limit = step_limit
        rad = fov // 2
        self._rad = rad
        m = instance.map.size
        self.fields = [distance_field(instance.map, g) for g in instance.goals]
        self._obstacles = np.pad(instance.map.obstacles.astype(np.uint8), rad, constant_values=1)
        n = instance.n_agents
        self._planes = np.zeros((n, m + 2 * rad, m + 2 * rad, 4), dtype=np.uint8)
        for i, f in enumerate(self.fields):
            self._planes[i, rad:rad + m, rad:rad + m] = heuristic_planes(instance.map, f)
        self.state = initial_state(instance, step_limit)

    @property
    def n_agents(self) -> int:
        return self.instance.n_agents

    def reset(self) -> np.ndarray:
        self.state = initial_state(self.instance, self.step_limit)
        return self.observe()

    def observe(self) -> np.ndarray:
        """(n, fov, fov, 6) uint8 observations for all agents."""
        n, fov, rad = self.n_agents, self.fov, self._rad
        m = self.instance.map.size
        occ = np.zeros((m + 2 * rad, m + 2 * rad), dtype=np.uint8)
        pos = self.state.positions
        occ[pos[:, 0] + rad, pos[:, 1] + rad] = 1
        out = np.empty((n, fov, fov, OBS_CHANNELS), dtype=np.uint8)
        for i in range(n):
            r, c = pos[i]
            win = (slice(r, r + fov), slice(c, c + fov))
            out[i, :, :, 0] = self._obstacles[win]
            out[i, :, :, 1] = occ[win]
            out[i, rad, rad, 1] = 0
            out[i, :, :, 2:] = self._planes[i][win]
        return out

    def neighbors(self):
        return neighbors_in_fov(self.state.positions, self.fov)

    def step(self, actions) -> StepOutcome:
        self.state, outcome = step(self.state, self.instance, actions)
        return outcome


# -- text format -----------------------------------------------------------

def format_instance(instance: Instance) -> str:
    grid = instance.map
    lines = [f"{grid.size} {instance.n_agents}"]
    for row in grid.obstacles:
        lines.append("".join("#" if v else "." for v in row))
    for s, g in zip(instance.starts, instance.goals):
        lines.append(f"{s[0]} {s[1]} {g[0]} {g[1]}")
    return "\n".join(lines) + "\n"


def parse_instance(text: str) -> Instance:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        m, n = (int(v) for v in lines[0].split())
        rows = lines[1:1 + m]
        if len(rows) != m or any(len(r) != m or set(r) - {".", "#"} for r in rows):
            raise ValueError("map block must be m lines of m characters from '.#'")
        obstacles = np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)
        pairs = [list(map(int, ln.split())) for ln in lines[1 + m:1 + m + n]]
        if len(pairs) != n or any(len(p) != 4 for p in pairs) or len(lines) != 1 + m + n:
            raise ValueError(f"expected {n} agent lines 'sx sy gx gy'")
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed instance: {exc}") from None
    arr = np.array(pairs, dtype=np.int64).reshape(n, 4)
    return Instance(GridMap(obstacles), arr[:, :2], arr[:, 2:])


def write_instance(path, instance: Instance) -> None:
    Path(path).write_text(format_instance(instance))


def read_instance(path) -> Instance:
    return parse_instance(Path(path).read_text())

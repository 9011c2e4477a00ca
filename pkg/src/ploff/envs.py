"""Deterministic environments: tabular gridworlds with walls and a continuous
point-mass, plus the one-hot encodings consumed by the learning pipeline.

Environments are immutable after construction; stepping is a pure function of
(state, action), so instances can be shared freely between workers.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ValidationError

# Gridworld action order: up, down, left, right (row/col deltas).
GRID_ACTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))
GRID_ACTION_NAMES = ("up", "down", "left", "right")

WALL, FREE, GOAL, START = "#", ".", "G", "S"


@dataclass(frozen=True)
class GridMap:
    """ASCII grid: '#' wall, '.' free, 'G' goal, 'S' start."""

    rows: int
    cols: int
    cells: tuple[str, ...]  # row-major, one char per cell

    def cell(self, r: int, c: int) -> str:
        return self.cells[r * self.cols + c]

    def goal_cell(self) -> tuple[int, int]:
        i = self.cells.index(GOAL)
        return divmod(i, self.cols)

    def start_cells(self) -> list[tuple[int, int]]:
        return [divmod(i, self.cols) for i, ch in enumerate(self.cells) if ch == START]

    def is_wall(self, r: int, c: int) -> bool:
        return self.cell(r, c) == WALL


def parse_map_text(text: str) -> GridMap:
    """Parse an ASCII map and validate it (rectangular, one goal, some start)."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValidationError("empty map")
    cols = len(lines[0])
    if any(len(line) != cols for line in lines):
        raise ValidationError("map is not rectangular")
    cells = tuple(ch for line in lines for ch in line)
    allowed = {WALL, FREE, GOAL, START}
    bad = sorted(set(cells) - allowed)
    if bad:
        raise ValidationError(f"unknown map characters: {bad}")
    if cells.count(GOAL) != 1:
        raise ValidationError(f"map must contain exactly one goal, found {cells.count(GOAL)}")
    if cells.count(START) == 0:
        raise ValidationError("map must contain at least one start cell")
    if all(ch == WALL for ch in cells):
        raise ValidationError("map has no free cells")
    return GridMap(rows=len(lines), cols=cols, cells=cells)


def load_map(path: str | Path) -> GridMap:
    return parse_map_text(Path(path).read_text(encoding="utf-8"))


def builtin_map(name: str) -> GridMap:
    """Load a map bundled with the package (e.g. 'two_room')."""
    ref = resources.files("ploff.maps").joinpath(f"{name}.txt")
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"no builtin map named {name!r}") from None
    return parse_map_text(text)


@dataclass(frozen=True)
class TabularMDP:
    """Finite deterministic MDP given by dense next-state/reward tables."""

    num_states: int
    num_actions: int
    next_state: np.ndarray  # (S, A) int
    reward: np.ndarray  # (S, A) float
    terminal: np.ndarray  # (S,) bool
    time_limit: int
    start_states: tuple[int, ...]
    grid: GridMap | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.time_limit < 1:
            raise ValidationError("time_limit must be >= 1")
        if not self.start_states:
            raise ValidationError("need at least one start state")
        ns = np.asarray(self.next_state)
        if ns.shape != (self.num_states, self.num_actions):
            raise ValidationError("next_state table has wrong shape")
        if ns.min() < 0 or ns.max() >= self.num_states:
            raise ValidationError("next_state entries out of range")
        if self.reward.shape != (self.num_states, self.num_actions):
            raise ValidationError("reward table has wrong shape")
        if not np.all(np.isfinite(self.reward)):
            raise ValidationError("rewards must be finite")
        if self.terminal.shape != (self.num_states,):
            raise ValidationError("terminal table has wrong shape")


def build_gridworld(grid: GridMap, time_limit: int = 50, goal_reward: float = 1.0) -> TabularMDP:
    """Tabular MDP over all map cells with 4 move actions.

    Moves into walls or off-grid are no-ops. The goal cell is a single
    reward state: it absorbs, and every step that enters it (the self-loop
    included) pays ``goal_reward``, so an agent parked there keeps
    collecting reward until the time limit ends the episode. No state is
    terminal. Wall cells are unreachable self-loops kept so that state
    index == cell index (row * cols + col).
    """
    S = grid.rows * grid.cols
    A = len(GRID_ACTIONS)
    next_state = np.zeros((S, A), dtype=np.int64)
    reward = np.zeros((S, A), dtype=np.float64)
    terminal = np.zeros(S, dtype=bool)
    gr, gc = grid.goal_cell()
    goal_idx = gr * grid.cols + gc

    for r in range(grid.rows):
        for c in range(grid.cols):
            s = r * grid.cols + c
            if grid.is_wall(r, c) or s == goal_idx:
                next_state[s, :] = s  # absorbing (walls unreachable)
                if s == goal_idx:
                    reward[s, :] = goal_reward
                continue
            for a, (dr, dc) in enumerate(GRID_ACTIONS):
                nr, nc = r + dr, c + dc
                blocked = not (0 <= nr < grid.rows and 0 <= nc < grid.cols) or grid.is_wall(nr, nc)
                ns = s if blocked else nr * grid.cols + nc
                next_state[s, a] = ns
                if ns == goal_idx:
                    reward[s, a] = goal_reward

    starts = tuple(r * grid.cols + c for r, c in grid.start_cells())
    return TabularMDP(
        num_states=S,
        num_actions=A,
        next_state=next_state,
        reward=reward,
        terminal=terminal,
        time_limit=time_limit,
        start_states=starts,
        grid=grid,
    )


def step_tabular(mdp: TabularMDP, s: int, a: int) -> tuple[int, float, bool]:
    """One transition; done is the terminal flag of the successor state.

    Time-limit truncation is the episode runner's business, not the MDP's.
    """
    if not (0 <= s < mdp.num_states):
        raise ValidationError(f"state {s} out of range")
    if not (0 <= a < mdp.num_actions):
        raise ValidationError(f"action {a} out of range")
    ns = int(mdp.next_state[s, a])
    return ns, float(mdp.reward[s, a]), bool(mdp.terminal[ns])


def one_hot(s: int, a: int, mdp: TabularMDP) -> np.ndarray:
    """Concatenated one-hot encoding of (state, action); two unit entries."""
    if not (0 <= s < mdp.num_states and 0 <= a < mdp.num_actions):
        raise ValidationError("index out of range for one_hot")
    out = np.zeros(mdp.num_states + mdp.num_actions, dtype=np.float64)
    out[s] = 1.0
    out[mdp.num_states + a] = 1.0
    return out


def state_one_hot(s: int, num_states: int) -> np.ndarray:
    out = np.zeros(num_states, dtype=np.float64)
    out[s] = 1.0
    return out


def decode_one_hot(v: np.ndarray) -> int:
    """Index of the active entry of a one-hot vector."""
    return int(np.argmax(v))


@dataclass(frozen=True)
class ContinuousEnv:
    """Deterministic continuous-control environment (point-mass family).

    State is [x, y, vx, vy]; actions are accelerations clipped to the box.
    Dynamics: position advances with the old velocity, then velocity
    integrates the clipped action and is clipped to +-vmax. Reward is minus
    the post-transition distance to the goal.
    """

    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    dt: float
    vmax: float
    goal: np.ndarray
    reward_spec: str
    time_limit: int
    start_state: np.ndarray

    def step(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
        a = np.clip(np.asarray(action, dtype=np.float64), self.action_low, self.action_high)
        pos, vel = state[:2], state[2:]
        new_pos = pos + vel * self.dt
        new_vel = np.clip(vel + a * self.dt, -self.vmax, self.vmax)
        next_state = np.concatenate([new_pos, new_vel])
        reward = -float(np.linalg.norm(new_pos - self.goal))
        return next_state, reward

    def reset(self) -> np.ndarray:
        return self.start_state.copy()


def build_pointmass(
    dt: float = 0.05,
    vmax: float = 1.0,
    goal: tuple[float, float] = (1.0, 1.0),
    start: tuple[float, float] = (0.0, 0.0),
    time_limit: int = 100,
) -> ContinuousEnv:
    """2-D point-mass with acceleration control in [-1, 1]^2."""
    if dt <= 0:
        raise ValidationError("dt must be positive")
    if vmax <= 0:
        raise ValidationError("vmax must be positive")
    if time_limit < 1:
        raise ValidationError("time_limit must be >= 1")
    return ContinuousEnv(
        state_dim=4,
        action_dim=2,
        action_low=np.full(2, -1.0),
        action_high=np.full(2, 1.0),
        dt=float(dt),
        vmax=float(vmax),
        goal=np.asarray(goal, dtype=np.float64),
        reward_spec="neg_goal_distance",
        time_limit=int(time_limit),
        start_state=np.array([start[0], start[1], 0.0, 0.0], dtype=np.float64),
    )


def grid_bfs_distances(grid: GridMap, source: tuple[int, int]) -> np.ndarray:
    """Wall-respecting shortest-path step counts from ``source`` to every cell.

    Unreachable cells and walls get -1.
    """
    dist = np.full(grid.rows * grid.cols, -1, dtype=np.int64)
    sr, sc = source
    if grid.is_wall(sr, sc):
        raise ValidationError("BFS source is a wall cell")
    start = sr * grid.cols + sc
    dist[start] = 0
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        r, c = divmod(cur, grid.cols)
        for dr, dc in GRID_ACTIONS:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < grid.rows and 0 <= nc < grid.cols):
                continue
            if grid.is_wall(nr, nc):
                continue
            nxt = nr * grid.cols + nc
            if dist[nxt] < 0:
                dist[nxt] = dist[cur] + 1
                queue.append(nxt)
    return dist


@dataclass(frozen=True)
class ActionSpace:
    """Action support for uniform sampling: one-hot indices or a box.

    Discrete actions are represented one-hot so they concatenate with state
    vectors; box actions are raw coordinates within [low, high].
    """

    kind: str  # "discrete" | "box"
    num_actions: int = 0
    low: tuple[float, ...] = ()
    high: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "discrete":
            if self.num_actions < 1:
                raise ValidationError("discrete space needs num_actions >= 1")
        elif self.kind == "box":
            if len(self.low) == 0 or len(self.low) != len(self.high):
                raise ValidationError("box space needs matching nonempty bounds")
            if any(lo > hi for lo, hi in zip(self.low, self.high)):
                raise ValidationError("box low bound exceeds high bound")
        else:
            raise ValidationError(f"unknown action space kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.num_actions if self.kind == "discrete" else len(self.low)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """n uniform actions, shape (n, dim)."""
        if self.kind == "discrete":
            idx = rng.integers(0, self.num_actions, size=n)
            return np.eye(self.num_actions)[idx]
        low = np.asarray(self.low)
        high = np.asarray(self.high)
        return rng.uniform(low, high, size=(n, self.dim))

    def loss_actions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Actions for the action-averaged loss target.

        Finite spaces with n >= |A| enumerate every action once (exact mean,
        consumes no randomness); otherwise fall back to uniform sampling.
        """
        if n < 1:
            raise ValidationError("need at least one action sample")
        if self.kind == "discrete" and n >= self.num_actions:
            return np.eye(self.num_actions)
        return self.sample(rng, n)


def discrete_space(num_actions: int) -> ActionSpace:
    return ActionSpace(kind="discrete", num_actions=num_actions)


def box_space(low: np.ndarray, high: np.ndarray) -> ActionSpace:
    return ActionSpace(kind="box", low=tuple(float(x) for x in low), high=tuple(float(x) for x in high))


def env_action_space(env: "ContinuousEnv | TabularMDP") -> ActionSpace:
    if isinstance(env, TabularMDP):
        return discrete_space(env.num_actions)
    return box_space(env.action_low, env.action_high)


def two_state_self_loop() -> TabularMDP:
    """Two absorbing states with rewards 1 and 0 under a single action.

    The distance between the states solves x = 1 + gamma * x, i.e.
    1 / (1 - gamma); handy as a closed-form check.
    """
    return TabularMDP(
        num_states=2,
        num_actions=1,
        next_state=np.array([[0], [1]], dtype=np.int64),
        reward=np.array([[1.0], [0.0]]),
        terminal=np.zeros(2, dtype=bool),
        time_limit=50,
        start_states=(0,),
    )


def random_mdp(
    num_states: int,
    num_actions: int,
    rng: np.random.Generator,
    terminal_frac: float = 0.0,
    time_limit: int = 50,
) -> TabularMDP:
    """Random deterministic MDP for property-test corpora."""
    next_state = rng.integers(0, num_states, size=(num_states, num_actions))
    reward = rng.uniform(0.0, 1.0, size=(num_states, num_actions))
    terminal = rng.random(num_states) < terminal_frac
    return TabularMDP(
        num_states=num_states,
        num_actions=num_actions,
        next_state=next_state.astype(np.int64),
        reward=reward,
        terminal=terminal,
        time_limit=time_limit,
        start_states=(0,),
    )

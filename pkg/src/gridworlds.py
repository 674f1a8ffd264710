"""
Deterministic gridworld tasks.

Two domains are provided:

- ComboGrid: a fully observable W x W grid where the agent moves one cell only
  after completing a four-action "combo". Source tasks walk from a start to a
  single goal (reward -1 per step); the target task collects four markers
  (reward +10 each).
- Maze: a partially observable crossing / four-rooms grid with turn-left,
  turn-right and forward actions and a 5x5 egocentric view.

The step and encode functions are pure; `GridTaskEnv` wraps them in the
gymnasium environment interface used by the trainer.
"""

import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from .errors import ConfigurationError, invalid_action_error
from .utils import dump_yaml, read_yaml_file, write_text

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]  # (row, col); row grows downwards

N_PRIMITIVES = 3

# Combo -> (row delta, col delta)
COMBOS: Dict[Tuple[int, ...], Cell] = {
    (0, 2, 2, 1): (1, 0),  # down
    (0, 0, 1, 1): (-1, 0),  # up
    (1, 2, 1, 0): (0, 1),  # right
    (1, 0, 2, 2): (0, -1),  # left
}
COMBO_LENGTH = 4
COMBO_PREFIXES: FrozenSet[Tuple[int, ...]] = frozenset(
    combo[:k] for combo in COMBOS for k in range(COMBO_LENGTH)
)

COMBOGRID_SIZES = (3, 4, 5, 6)
COMBOGRID_SOURCE_STEP_FACTOR = 80
COMBOGRID_TARGET_STEP_FACTOR = 16
COMBOGRID_MARKER_REWARD = 10.0

MAZE_SOURCE_MAX_STEPS = 1000
MAZE_TARGET_MAX_STEPS = 361
MAZE_DEFAULT_TARGET_SIZE = 19
VIEW_SIZE = 5
CELL_CHANNELS = 3  # goal, wall, empty

TURN_LEFT, TURN_RIGHT, FORWARD = 0, 1, 2


class DomainKind(str, Enum):
    """Task family."""

    COMBOGRID = "combogrid"
    MAZE = "maze"


class Phase(str, Enum):
    """Source tasks train the policies to decompose; target tasks test transfer."""

    SOURCE = "source"
    TARGET = "target"


class Facing(IntEnum):
    """Maze agent orientation, in clockwise order."""

    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


FACING_VECTORS: Dict[Facing, Cell] = {
    Facing.NORTH: (-1, 0),
    Facing.EAST: (0, 1),
    Facing.SOUTH: (1, 0),
    Facing.WEST: (0, -1),
}


def _as_cell(value: Iterable[int]) -> Cell:
    row, col = value
    return (int(row), int(col))


@dataclass(frozen=True)
class GridSpec:
    """
    Static description of one task.

    Attributes:
        width: Number of columns
        height: Number of rows
        walls: Blocked cells
        goals: Goal cells (one for source tasks, markers for the ComboGrid target)
        starts: Start candidates; `reset` samples uniformly among them
        domain_kind: combogrid or maze
        phase: source or target, selects rewards and the step limit
        max_steps: Truncation limit
        facing: Initial maze orientation (ignored by ComboGrid)
        task_id: Identifier used in files and logs
    """

    width: int
    height: int
    walls: FrozenSet[Cell]
    goals: Tuple[Cell, ...]
    starts: Tuple[Cell, ...]
    domain_kind: DomainKind
    phase: Phase
    max_steps: int
    facing: Facing = Facing.EAST
    task_id: str = "task"

    def __post_init__(self) -> None:
        object.__setattr__(self, "walls", frozenset(_as_cell(w) for w in self.walls))
        object.__setattr__(self, "goals", tuple(_as_cell(g) for g in self.goals))
        object.__setattr__(self, "starts", tuple(_as_cell(s) for s in self.starts))
        object.__setattr__(self, "domain_kind", DomainKind(self.domain_kind))
        object.__setattr__(self, "phase", Phase(self.phase))
        object.__setattr__(self, "facing", Facing(self.facing))

        if self.width < 1 or self.height < 1:
            raise ConfigurationError(
                f"Grid dimensions must be positive, got {self.width}x{self.height}"
            )
        if self.max_steps < 1:
            raise ConfigurationError(f"max_steps must be positive, got {self.max_steps}")
        if not self.goals:
            raise ConfigurationError(f"Task '{self.task_id}' has no goals")
        if not self.starts:
            raise ConfigurationError(f"Task '{self.task_id}' has no start cell")
        for name, cells in (("wall", self.walls), ("goal", self.goals), ("start", self.starts)):
            for cell in cells:
                if not self.in_bounds(cell):
                    raise ConfigurationError(
                        f"Task '{self.task_id}': {name} {cell} is outside the "
                        f"{self.height}x{self.width} grid"
                    )
        for cell in self.goals + self.starts:
            if cell in self.walls:
                raise ConfigurationError(
                    f"Task '{self.task_id}': cell {cell} is both a wall and a start/goal"
                )

    @property
    def start(self) -> Cell:
        """The first start candidate."""
        return self.starts[0]

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def in_bounds(self, cell: Cell) -> bool:
        row, col = cell
        return 0 <= row < self.height and 0 <= col < self.width

    def is_open(self, cell: Cell) -> bool:
        """A cell the agent may occupy."""
        return self.in_bounds(cell) and cell not in self.walls

    def cell_index(self, cell: Cell) -> int:
        """Row-major index of a cell."""
        return cell[0] * self.width + cell[1]


@dataclass(frozen=True)
class ComboState:
    """ComboGrid state: position, pending combo prefix and collected markers."""

    agent: Cell
    buffer: Tuple[int, ...] = ()
    collected: Tuple[bool, ...] = ()
    steps_taken: int = 0


@dataclass(frozen=True)
class MazeState:
    """Maze state: position and orientation."""

    agent: Cell
    facing: Facing = Facing.EAST
    steps_taken: int = 0


State = Union[ComboState, MazeState]


@dataclass(frozen=True, eq=False)
class StepResult:
    """Outcome of one primitive transition."""

    obs: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


def _check_action(action: Any) -> int:
    if isinstance(action, bool) or not isinstance(action, (int, np.integer)):
        raise invalid_action_error(action, N_PRIMITIVES)
    if not 0 <= int(action) < N_PRIMITIVES:
        raise invalid_action_error(action, N_PRIMITIVES)
    return int(action)


def _resolve_phase(spec: GridSpec, phase: Optional[Union[Phase, str]]) -> Phase:
    return spec.phase if phase is None else Phase(phase)


# ---------------------------------------------------------------------------
# ComboGrid
# ---------------------------------------------------------------------------


def combogrid_step(
    state: ComboState,
    spec: GridSpec,
    action: int,
    phase: Optional[Union[Phase, str]] = None,
) -> Tuple[ComboState, StepResult]:
    """
    Apply one primitive action to a ComboGrid state.

    The action is appended to the combo buffer. A completed combo moves the
    agent one cell (unless a wall or the border blocks it) and clears the
    buffer; an action that leaves the buffer outside every combo prefix clears
    the buffer and is discarded.

    Args:
        state: Current state
        spec: Task description
        action: Primitive action in {0, 1, 2}
        phase: Overrides `spec.phase` when given

    Returns:
        The successor state and the step result

    Raises:
        InvalidActionError: If the action is not in {0, 1, 2}
    """
    action = _check_action(action)
    phase = _resolve_phase(spec, phase)

    buffer = state.buffer + (action,)
    agent = state.agent
    move = COMBOS.get(buffer)
    if move is not None:
        ahead = (agent[0] + move[0], agent[1] + move[1])
        if spec.is_open(ahead):
            agent = ahead
        buffer = ()
    elif buffer not in COMBO_PREFIXES:
        buffer = ()

    collected = list(state.collected) if state.collected else [False] * len(spec.goals)
    steps = state.steps_taken + 1
    reward = 0.0
    entered_goal = agent in spec.goals and not collected[spec.goals.index(agent)]
    if entered_goal:
        collected[spec.goals.index(agent)] = True

    if phase is Phase.SOURCE:
        terminal = entered_goal
        reward = 0.0 if terminal else -1.0
    else:
        if entered_goal:
            reward = COMBOGRID_MARKER_REWARD
        terminal = all(collected)
    truncated = not terminal and steps >= spec.max_steps

    new_state = ComboState(
        agent=agent, buffer=buffer, collected=tuple(collected), steps_taken=steps
    )
    return new_state, StepResult(
        obs=combogrid_encode(new_state, spec),
        reward=reward,
        terminal=terminal,
        truncated=truncated,
    )


def combogrid_encode(state: ComboState, spec: GridSpec) -> np.ndarray:
    """
    Encode a ComboGrid state.

    Layout: one-hot agent cell (W*H), multi-hot uncollected goals (W*H), then
    three buffer slots with a one-hot over the three actions each (zero-padded).
    """
    n = spec.n_cells
    obs = np.zeros(observation_length(spec), dtype=np.float64)
    obs[spec.cell_index(state.agent)] = 1.0
    collected = state.collected or (False,) * len(spec.goals)
    for goal, taken in zip(spec.goals, collected):
        if not taken:
            obs[n + spec.cell_index(goal)] = 1.0
    for slot, action in enumerate(state.buffer):
        obs[2 * n + slot * N_PRIMITIVES + action] = 1.0
    return obs


# ---------------------------------------------------------------------------
# Maze
# ---------------------------------------------------------------------------


def maze_step(
    state: MazeState,
    spec: GridSpec,
    action: int,
    phase: Optional[Union[Phase, str]] = None,
) -> Tuple[MazeState, StepResult]:
    """
    Apply one primitive action to a maze state.

    0 turns left, 1 turns right, 2 moves one cell forward unless blocked.
    Source tasks pay -1 per step and 0 on the step that reaches the goal;
    target tasks pay 1 on reaching the goal and 0 otherwise.

    Raises:
        InvalidActionError: If the action is not in {0, 1, 2}
    """
    action = _check_action(action)
    phase = _resolve_phase(spec, phase)

    agent, facing = state.agent, state.facing
    if action == TURN_LEFT:
        facing = Facing((facing - 1) % 4)
    elif action == TURN_RIGHT:
        facing = Facing((facing + 1) % 4)
    else:
        d_row, d_col = FACING_VECTORS[facing]
        ahead = (agent[0] + d_row, agent[1] + d_col)
        if spec.is_open(ahead):
            agent = ahead

    steps = state.steps_taken + 1
    terminal = agent in spec.goals
    if phase is Phase.SOURCE:
        reward = 0.0 if terminal else -1.0
    else:
        reward = 1.0 if terminal else 0.0
    truncated = not terminal and steps >= spec.max_steps

    new_state = MazeState(agent=agent, facing=facing, steps_taken=steps)
    return new_state, StepResult(
        obs=maze_encode(new_state, spec),
        reward=reward,
        terminal=terminal,
        truncated=truncated,
    )


def _view_cell(state: MazeState, depth: int, lateral: int) -> Cell:
    forward = FACING_VECTORS[state.facing]
    right = FACING_VECTORS[Facing((state.facing + 1) % 4)]
    row = state.agent[0] + depth * forward[0] + lateral * right[0]
    col = state.agent[1] + depth * forward[1] + lateral * right[1]
    return (row, col)


def visible_cells(state: MazeState, spec: GridSpec) -> FrozenSet[Tuple[int, int]]:
    """
    Window positions (depth, lateral) visible from the agent.

    Visibility spreads from the agent cell to 4-neighbours inside the window;
    walls are seen but stop the spread. Out-of-bounds positions are never visible.
    """
    half = VIEW_SIZE // 2
    seen = {(0, 0)}
    queue = deque([(0, 0)])
    while queue:
        depth, lateral = queue.popleft()
        if _view_cell(state, depth, lateral) in spec.walls:
            continue
        for d_depth, d_lat in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nxt = (depth + d_depth, lateral + d_lat)
            if nxt in seen:
                continue
            if not (0 <= nxt[0] < VIEW_SIZE and -half <= nxt[1] <= half):
                continue
            if not spec.in_bounds(_view_cell(state, *nxt)):
                continue
            seen.add(nxt)
            queue.append(nxt)
    return frozenset(seen)


def maze_encode(state: MazeState, spec: GridSpec) -> np.ndarray:
    """
    Encode the 5x5 egocentric view plus a facing one-hot.

    The window spans five rows ahead (the agent's own row included) and two
    cells to each side. Rows run from the farthest to the agent's row, cells
    from left to right; each cell is a one-hot over (goal, wall, empty), or all
    zeros when it is out of bounds or hidden behind walls. Length 79.
    """
    half = VIEW_SIZE // 2
    visible = visible_cells(state, spec)
    view = np.zeros((VIEW_SIZE, VIEW_SIZE, CELL_CHANNELS), dtype=np.float64)
    for depth in range(VIEW_SIZE):
        for lateral in range(-half, half + 1):
            if (depth, lateral) not in visible:
                continue
            cell = _view_cell(state, depth, lateral)
            if cell in spec.walls:
                channel = 1
            elif cell in spec.goals:
                channel = 0
            else:
                channel = 2
            view[VIEW_SIZE - 1 - depth, lateral + half, channel] = 1.0
    facing = np.zeros(4, dtype=np.float64)
    facing[int(state.facing)] = 1.0
    return np.concatenate([view.reshape(-1), facing])


# ---------------------------------------------------------------------------
# Domain dispatch
# ---------------------------------------------------------------------------


def observation_length(spec: GridSpec) -> int:
    """Length of the observation vector for a task."""
    if spec.domain_kind is DomainKind.COMBOGRID:
        return 2 * spec.n_cells + (COMBO_LENGTH - 1) * N_PRIMITIVES
    return VIEW_SIZE * VIEW_SIZE * CELL_CHANNELS + 4


def initial_state(spec: GridSpec, start: Optional[Cell] = None) -> State:
    """The state at the beginning of an episode."""
    start = spec.start if start is None else _as_cell(start)
    if not spec.is_open(start):
        raise ConfigurationError(f"Start {start} is not an open cell of '{spec.task_id}'")
    if spec.domain_kind is DomainKind.COMBOGRID:
        return ComboState(agent=start, collected=(False,) * len(spec.goals))
    return MazeState(agent=start, facing=spec.facing)


def step_task(state: State, spec: GridSpec, action: int) -> Tuple[State, StepResult]:
    if spec.domain_kind is DomainKind.COMBOGRID:
        return combogrid_step(state, spec, action)  # type: ignore[arg-type]
    return maze_step(state, spec, action)  # type: ignore[arg-type]


def encode_task(state: State, spec: GridSpec) -> np.ndarray:
    if spec.domain_kind is DomainKind.COMBOGRID:
        return combogrid_encode(state, spec)  # type: ignore[arg-type]
    return maze_encode(state, spec)  # type: ignore[arg-type]


def shortest_path_length(spec: GridSpec, start: Optional[Cell] = None) -> Optional[int]:
    """
    Number of cell-to-cell moves from a start to the nearest goal.

    Returns:
        The move count, or None if no goal is reachable
    """
    start = spec.start if start is None else start
    goals = set(spec.goals)
    dist = {start: 0}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell in goals:
            return dist[cell]
        for d_row, d_col in FACING_VECTORS.values():
            nxt = (cell[0] + d_row, cell[1] + d_col)
            if nxt not in dist and spec.is_open(nxt):
                dist[nxt] = dist[cell] + 1
                queue.append(nxt)
    return None


class GridTaskEnv(gym.Env):
    """
    gymnasium environment over a `GridSpec`.

    `reset` samples the start from the task's start candidates (or uses
    `options={"start": cell}`); `step` returns the usual five-tuple with
    `info["duration"] == 1` and the successor state in `info["state"]`.
    """

    metadata: Dict[str, Any] = {"render_modes": []}

    def __init__(self, task: GridSpec):
        super().__init__()
        self.task = task
        self.action_space = spaces.Discrete(N_PRIMITIVES)
        self.observation_space = spaces.Box(
            low=0.0, high=1.0, shape=(observation_length(task),), dtype=np.float64
        )
        self.state: Optional[State] = None

    def reset(
        self, *, seed: Optional[int] = None, options: Optional[Dict[str, Any]] = None
    ) -> Tuple[np.ndarray, Dict[str, Any]]:
        super().reset(seed=seed)
        start = (options or {}).get("start")
        if start is None:
            starts = self.task.starts
            start = starts[0]
            if len(starts) > 1:
                start = starts[int(self.np_random.integers(len(starts)))]
        self.state = initial_state(self.task, start)
        return encode_task(self.state, self.task), {"state": self.state}

    def step(self, action: Any) -> Tuple[np.ndarray, float, bool, bool, Dict[str, Any]]:
        if self.state is None:
            raise ConfigurationError("reset() must be called before step()")
        self.state, result = step_task(self.state, self.task, action)
        info = {"duration": 1, "state": self.state}
        return result.obs, result.reward, result.terminal, result.truncated, info


def make_env(task: GridSpec) -> GridTaskEnv:
    """Create a fresh environment for a task."""
    return GridTaskEnv(task)


# ---------------------------------------------------------------------------
# Task sets
# ---------------------------------------------------------------------------


def _combogrid_tasks(size: int) -> Tuple[List[GridSpec], List[GridSpec]]:
    last = size - 1
    corners = [(0, 0), (0, last), (last, 0), (last, last)]
    sources = []
    for index, start in enumerate(corners):
        goal = (last - start[0], last - start[1])
        sources.append(
            GridSpec(
                width=size,
                height=size,
                walls=frozenset(),
                goals=(goal,),
                starts=(start,),
                domain_kind=DomainKind.COMBOGRID,
                phase=Phase.SOURCE,
                max_steps=size * size * COMBOGRID_SOURCE_STEP_FACTOR,
                task_id=f"combogrid{size}-source-{index}",
            )
        )
    target = GridSpec(
        width=size,
        height=size,
        walls=frozenset(),
        goals=tuple(corners),
        starts=((size // 2, size // 2),),
        domain_kind=DomainKind.COMBOGRID,
        phase=Phase.TARGET,
        max_steps=size * size * COMBOGRID_TARGET_STEP_FACTOR,
        task_id=f"combogrid{size}-target-0",
    )
    return sources, [target]


def _border(size: int) -> set:
    last = size - 1
    cells = set()
    for i in range(size):
        cells.update({(0, i), (last, i), (i, 0), (i, last)})
    return cells


def _crossing_task(size: int, seed: int, index: int) -> GridSpec:
    rng = np.random.default_rng([seed, index])
    last = size - 1
    walls = _border(size)
    line = int(rng.integers(2, last - 1))
    gap = int(rng.integers(1, last))
    vertical = bool(rng.integers(2))
    for i in range(1, last):
        if i != gap:
            walls.add((i, line) if vertical else (line, i))
    return GridSpec(
        width=size,
        height=size,
        walls=frozenset(walls),
        goals=((last - 1, last - 1),),
        starts=((1, 1),),
        domain_kind=DomainKind.MAZE,
        phase=Phase.SOURCE,
        max_steps=MAZE_SOURCE_MAX_STEPS,
        facing=Facing.EAST,
        task_id=f"crossing{size}-source-{index}",
    )


def _four_rooms_tasks(size: int, seed: int) -> List[GridSpec]:
    rng = np.random.default_rng([seed, 1000 + size])
    last = size - 1
    mid = size // 2
    walls = _border(size)
    for i in range(1, last):
        walls.add((i, mid))
        walls.add((mid, i))
    # one door per shared wall segment
    doors = [
        (int(rng.integers(1, mid)), mid),
        (int(rng.integers(mid + 1, last)), mid),
        (mid, int(rng.integers(1, mid))),
        (mid, int(rng.integers(mid + 1, last))),
    ]
    walls.difference_update(doors)
    layouts = [
        ((1, 1), (mid - 1, mid - 1)),  # same room
        ((1, 1), (mid - 1, last - 1)),  # adjacent room
        ((1, 1), (last - 1, last - 1)),  # opposite room
    ]
    return [
        GridSpec(
            width=size,
            height=size,
            walls=frozenset(walls),
            goals=(goal,),
            starts=(start,),
            domain_kind=DomainKind.MAZE,
            phase=Phase.TARGET,
            max_steps=MAZE_TARGET_MAX_STEPS,
            facing=Facing.EAST,
            task_id=f"fourrooms{size}-target-{index}",
        )
        for index, (start, goal) in enumerate(layouts)
    ]


def build_task_sets(
    domain_kind: Union[DomainKind, str],
    size: int,
    seed: int = 0,
    target_size: Optional[int] = None,
) -> Tuple[List[GridSpec], List[GridSpec]]:
    """
    Build the source and target task lists for a domain.

    ComboGrid: four source tasks running corner to opposite corner and one
    target task starting in the centre with a marker in every corner. Maze:
    three crossing tasks of `size` and three four-rooms tasks of `target_size`
    (default 19) with increasing start/goal separation. Layouts depend only on
    the arguments.

    Raises:
        ConfigurationError: If the size is not supported for the domain
    """
    kind = DomainKind(domain_kind)
    if kind is DomainKind.COMBOGRID:
        if size not in COMBOGRID_SIZES:
            raise ConfigurationError(
                f"ComboGrid size must be one of {COMBOGRID_SIZES}, got {size}"
            )
        return _combogrid_tasks(size)

    target_size = MAZE_DEFAULT_TARGET_SIZE if target_size is None else target_size
    for name, value in (("size", size), ("target_size", target_size)):
        if value < 7 or value % 2 == 0:
            raise ConfigurationError(f"Maze {name} must be an odd number >= 7, got {value}")
    sources = [_crossing_task(size, seed, index) for index in range(3)]
    return sources, _four_rooms_tasks(target_size, seed)


# ---------------------------------------------------------------------------
# Task-set files
# ---------------------------------------------------------------------------


def task_to_dict(spec: GridSpec) -> Dict[str, Any]:
    """Plain-data form of a task, as written to task-set files."""
    return {
        "task_id": spec.task_id,
        "domain_kind": spec.domain_kind.value,
        "phase": spec.phase.value,
        "width": spec.width,
        "height": spec.height,
        "max_steps": spec.max_steps,
        "facing": spec.facing.name.lower(),
        "walls": [list(cell) for cell in sorted(spec.walls)],
        "starts": [list(cell) for cell in spec.starts],
        "goals": [list(cell) for cell in spec.goals],
    }


def task_from_dict(data: Dict[str, Any]) -> GridSpec:
    """
    Rebuild a task from its plain-data form.

    Raises:
        ConfigurationError: If keys are missing or values are invalid
    """
    required = ("domain_kind", "phase", "width", "height", "max_steps", "starts", "goals")
    missing = [key for key in required if key not in data]
    if missing:
        raise ConfigurationError(f"Task description is missing keys: {missing}")
    try:
        facing = Facing[str(data.get("facing", "east")).upper()]
        return GridSpec(
            width=int(data["width"]),
            height=int(data["height"]),
            walls=frozenset(_as_cell(c) for c in data.get("walls") or []),
            goals=tuple(_as_cell(c) for c in data["goals"]),
            starts=tuple(_as_cell(c) for c in data["starts"]),
            domain_kind=DomainKind(data["domain_kind"]),
            phase=Phase(data["phase"]),
            max_steps=int(data["max_steps"]),
            facing=facing,
            task_id=str(data.get("task_id", "task")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"Invalid task description: {exc}") from exc


def write_task_file(tasks: Iterable[GridSpec], path: Union[str, Path]) -> Path:
    """Write a task-set description file."""
    return write_text(path, dump_yaml({"tasks": [task_to_dict(t) for t in tasks]}))


def read_task_file(path: Union[str, Path]) -> List[GridSpec]:
    """Read a task-set description file written by `write_task_file`."""
    data = read_yaml_file(path)
    if not isinstance(data, dict) or not isinstance(data.get("tasks"), list):
        raise ConfigurationError(f"{path}: expected a mapping with a 'tasks' list")
    return [task_from_dict(item) for item in data["tasks"]]

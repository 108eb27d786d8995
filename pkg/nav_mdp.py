"""
Grid MDP for area-level rover navigation
Action semantics, transitions, rewards, termination and the success criterion
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

# x1 grows eastward (column), x2 grows southward (row)
ACTION_DELTAS: Tuple[Cell, ...] = (
    (1, 0),    # 0 east
    (0, 1),    # 1 south
    (-1, 0),   # 2 west
    (0, -1),   # 3 north
    (1, 1),    # 4 southeast
    (1, -1),   # 5 northeast
    (-1, 1),   # 6 southwest
    (-1, -1),  # 7 northwest
)
ACTION_NAMES = ('east', 'south', 'west', 'north', 'southeast', 'northeast', 'southwest', 'northwest')
NUM_ACTIONS = len(ACTION_DELTAS)

REWARD_GOAL = 1.0
REWARD_STEP = -1.0


class TerminalStateError(RuntimeError):
    """Raised when a terminal state is stepped"""


class MalformedTrajectoryError(ValueError):
    """Raised when consecutive trajectory cells are not one action apart"""


class Termination(str, Enum):
    SUCCESS = 'success'
    HIT_RISKY = 'hit_risky'
    OFF_GRID = 'off_grid'
    STEP_LIMIT = 'step_limit'


@dataclass(frozen=True, eq=False)
class NavWorld:
    """Compressed traversability grid with a goal; grid[x2, x1] is True when safe"""

    grid: np.ndarray
    goal: Cell
    source_map_id: str = ''
    cell_size: int = 4

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=bool)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ValueError(f"Grid must be square, got shape {grid.shape}")
        if grid.shape[0] < 2 and grid.size != 1:
            raise ValueError("Grid edge must be at least 2")
        grid = grid.copy()
        grid.setflags(write=False)
        object.__setattr__(self, 'grid', grid)
        goal = (int(self.goal[0]), int(self.goal[1]))
        object.__setattr__(self, 'goal', goal)
        if not self.in_grid(goal):
            raise ValueError(f"Goal {goal} outside {self.size}x{self.size} grid")
        if not self.is_safe(goal):
            raise ValueError(f"Goal {goal} is not traversable")

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    @property
    def image_size(self) -> int:
        return self.size * self.cell_size

    def in_grid(self, cell: Cell) -> bool:
        """True when the cell lies on the grid"""
        return 0 <= cell[0] < self.size and 0 <= cell[1] < self.size

    def is_safe(self, cell: Cell) -> bool:
        """True for in-grid traversable cells"""
        return bool(self.grid[cell[1], cell[0]])

    def default_max_steps(self) -> int:
        """Episode step limit of 4N"""
        return 4 * self.size


@dataclass(frozen=True)
class NavState:
    world: NavWorld
    pos: Cell
    step_count: int = 0
    termination: Optional[Termination] = None
    max_steps: Optional[int] = None

    @property
    def terminal(self) -> bool:
        return self.termination is not None

    def step_limit(self) -> int:
        """This episode's step limit, 4N unless overridden"""
        return self.max_steps if self.max_steps is not None else self.world.default_max_steps()


@dataclass(frozen=True)
class StepResult:
    next: NavState
    reward: float

    @property
    def termination(self) -> Optional[Termination]:
        return self.next.termination


def initial_state(world: NavWorld, start: Cell, max_steps: Optional[int] = None) -> NavState:
    """Fresh episode at the start cell"""
    start = (int(start[0]), int(start[1]))
    if not world.in_grid(start) or not world.is_safe(start):
        raise ValueError(f"Start {start} is not a traversable cell")
    return NavState(world=world, pos=start, max_steps=max_steps)


def action_delta(a: int) -> Cell:
    """(dx1, dx2) offset of an action id"""
    return ACTION_DELTAS[a]


def step(s: NavState, a: int) -> StepResult:
    """Apply one action; the rover moves one compressed cell"""
    if s.terminal:
        raise TerminalStateError(f"Cannot step terminal state at {s.pos} ({s.termination.value})")
    if not 0 <= a < NUM_ACTIONS:
        raise ValueError(f"Invalid action id: {a}")

    dx1, dx2 = action_delta(a)
    pos = (s.pos[0] + dx1, s.pos[1] + dx2)
    world = s.world
    reward = REWARD_GOAL if pos == world.goal else REWARD_STEP
    count = s.step_count + 1

    if not world.in_grid(pos):
        termination = Termination.OFF_GRID
    elif not world.is_safe(pos):
        termination = Termination.HIT_RISKY
    elif pos == world.goal:
        termination = Termination.SUCCESS
    elif count >= s.step_limit():
        termination = Termination.STEP_LIMIT
    else:
        termination = None

    return StepResult(
        next=NavState(world=world, pos=pos, step_count=count, termination=termination, max_steps=s.max_steps),
        reward=reward,
    )


def action_between(a: Cell, b: Cell) -> int:
    """Action id moving from a to b, if they are one move apart"""
    delta = (b[0] - a[0], b[1] - a[1])
    try:
        return ACTION_DELTAS.index(delta)
    except ValueError:
        raise MalformedTrajectoryError(f"Cells {a} and {b} are not adjacent") from None


def is_successful_trajectory(world: NavWorld, positions: Sequence[Cell]) -> bool:
    """Adjacent moves over safe cells that end on the goal"""
    if len(positions) == 0:
        raise MalformedTrajectoryError("Trajectory has no positions")
    cells = [(int(p[0]), int(p[1])) for p in positions]
    for a, b in zip(cells, cells[1:]):
        action_between(a, b)
    for cell in cells:
        if not world.in_grid(cell) or not world.is_safe(cell):
            return False
    return cells[-1] == world.goal


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """Sum of gamma^t * r_t"""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    total = 0.0
    discount = 1.0
    for r in rewards:
        total += discount * r
        discount *= gamma
    return total

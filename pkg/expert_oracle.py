"""
Expert oracle on the compressed grid
Exact value iteration, breadth-first distance fields, optimal action labels,
expert trajectories and dataset construction
"""

import hashlib
import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from nav_mdp import ACTION_DELTAS, NUM_ACTIONS, REWARD_GOAL, REWARD_STEP, Cell, NavWorld, is_successful_trajectory
from terrain_synth import TerrainMap, TerrainParams, compress_risky, generate_terrain

logger = logging.getLogger(__name__)


class NoOptimalActionError(ValueError):
    """Raised for the goal cell or cells that cannot reach it"""


class DatasetGenerationError(RuntimeError):
    """Raised when a map keeps failing the reachability requirements"""


@dataclass(frozen=True, eq=False)
class DistanceField:
    dist: np.ndarray  # [x2, x1], steps to goal, inf where unreachable
    world: NavWorld

    def at(self, cell: Cell) -> float:
        """Steps to the goal; inf when unreachable"""
        return float(self.dist[cell[1], cell[0]])

    def reachable_cells(self, exclude_goal: bool = True) -> List[Cell]:
        """Cells with a finite distance to the goal"""
        rows, cols = np.nonzero(np.isfinite(self.dist))
        cells = [(int(c), int(r)) for r, c in zip(rows, cols)]
        if exclude_goal:
            cells = [c for c in cells if c != self.world.goal]
        return cells


@dataclass(frozen=True, eq=False)
class ValueField:
    V: np.ndarray  # [x2, x1]
    Q: np.ndarray  # [x2, x1, a]
    gamma: float
    iterations: int = 0


@dataclass
class ExpertTrajectory:
    map_id: str
    goal: Cell
    positions: List[Cell]
    actions: List[int]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'goal': list(self.goal),
            'positions': [list(p) for p in self.positions],
            'actions': list(self.actions),
        }

    @classmethod
    def from_dict(cls, map_id: str, data: Dict[str, Any]) -> 'ExpertTrajectory':
        return cls(
            map_id=map_id,
            goal=tuple(data['goal']),
            positions=[tuple(p) for p in data['positions']],
            actions=[int(a) for a in data['actions']],
        )


@dataclass
class MapEntry:
    map_id: str
    seed: int
    split: str
    grid: np.ndarray
    trajectories: List[ExpertTrajectory]
    terrain: Optional[TerrainMap] = None

    @property
    def goals(self) -> List[Cell]:
        return sorted({t.goal for t in self.trajectories})


@dataclass
class DatasetManifest:
    maps: List[MapEntry]
    seed: int
    image_size: int
    cell_size: int
    risk_fraction: float
    params_digest: str
    goal_mode: str = config.GOAL_MODE
    terrain_params: Dict[str, Any] = field(default_factory=dict)

    def split(self, name: str) -> List[MapEntry]:
        return [m for m in self.maps if m.split == name]

    def counts(self) -> Dict[str, int]:
        """Map, trajectory and sample totals per split"""
        train = self.split('train')
        test = self.split('test')
        return {
            'maps': len(self.maps),
            'train_maps': len(train),
            'test_maps': len(test),
            'trajectories': sum(len(m.trajectories) for m in self.maps),
            'train_samples': sum(len(t.actions) for m in train for t in m.trajectories),
            'test_samples': sum(len(t.actions) for m in test for t in m.trajectories),
        }


def _successors(n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-action successor rows, cols and in-grid mask, each shaped [a, x2, x1]"""
    rows, cols = np.mgrid[0:n, 0:n]
    succ_r = np.stack([rows + d2 for _, d2 in ACTION_DELTAS])
    succ_c = np.stack([cols + d1 for d1, _ in ACTION_DELTAS])
    inside = (succ_r >= 0) & (succ_r < n) & (succ_c >= 0) & (succ_c < n)
    return np.clip(succ_r, 0, n - 1), np.clip(succ_c, 0, n - 1), inside


def value_iteration(world: NavWorld, gamma: float = 0.99, tol: float = 1e-6, max_iterations: int = 100000) -> ValueField:
    """Synchronous Bellman backups; failure terminals keep paying the step penalty forever"""
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")

    n = world.size
    safe = world.grid
    g1, g2 = world.goal
    trap_value = REWARD_STEP / (1.0 - gamma)
    succ_r, succ_c, inside = _successors(n)
    succ_safe = inside & safe[succ_r, succ_c]
    into_goal = inside & (succ_r == g2) & (succ_c == g1)
    live = safe.copy()
    live[g2, g1] = False

    V = np.where(safe, 0.0, trap_value)
    V[g2, g1] = 0.0
    Q = np.zeros((NUM_ACTIONS, n, n))
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        nxt = np.where(succ_safe, V[succ_r, succ_c], trap_value)
        Q = np.where(into_goal, REWARD_GOAL, REWARD_STEP + gamma * nxt)
        V_new = np.where(live, Q.max(axis=0), V)
        delta = np.max(np.abs(V_new - V))
        V = V_new
        if delta < tol:
            break
    else:
        logger.warning(f"Value iteration hit {max_iterations} iterations without reaching tol={tol}")

    # terminals: every action keeps V
    Q = np.where(live[None], Q, V[None])
    return ValueField(V=V, Q=np.moveaxis(Q, 0, -1), gamma=gamma, iterations=iterations)


def greedy_policy(field: ValueField) -> np.ndarray:
    """Argmax-Q action per cell; numpy argmax keeps the smallest id on ties"""
    return np.argmax(field.Q, axis=-1)


def distance_field(world: NavWorld) -> DistanceField:
    """Breadth-first steps-to-goal over traversable 8-neighbours"""
    n = world.size
    dist = np.full((n, n), np.inf)
    g1, g2 = world.goal
    dist[g2, g1] = 0.0
    queue = deque([world.goal])
    while queue:
        x1, x2 = queue.popleft()
        d = dist[x2, x1] + 1
        for dx1, dx2 in ACTION_DELTAS:
            y1, y2 = x1 + dx1, x2 + dx2
            if 0 <= y1 < n and 0 <= y2 < n and world.grid[y2, y1] and dist[y2, y1] > d:
                dist[y2, y1] = d
                queue.append((y1, y2))
    return DistanceField(dist=dist, world=world)


def optimal_action(field: DistanceField, pos: Cell) -> int:
    """Action reaching a neighbour one step closer to the goal; smallest id on ties"""
    d = field.at(pos)
    if not np.isfinite(d):
        raise NoOptimalActionError(f"Cell {pos} cannot reach the goal")
    if d == 0:
        raise NoOptimalActionError(f"Cell {pos} is the goal")
    n = field.world.size
    for a, (dx1, dx2) in enumerate(ACTION_DELTAS):
        y1, y2 = pos[0] + dx1, pos[1] + dx2
        if 0 <= y1 < n and 0 <= y2 < n and field.dist[y2, y1] == d - 1:
            return a
    raise NoOptimalActionError(f"Distance field inconsistent at {pos}")


def optimal_action_table(field: DistanceField) -> np.ndarray:
    """optimal_action for every cell, -1 for the goal and unreachable cells"""
    n = field.world.size
    table = np.full((n, n), -1, dtype=np.int64)
    for x1, x2 in field.reachable_cells():
        table[x2, x1] = optimal_action(field, (x1, x2))
    return table


def sample_trajectory(field: DistanceField, start: Cell) -> ExpertTrajectory:
    """Follow optimal actions from start to the goal"""
    start = (int(start[0]), int(start[1]))
    if not np.isfinite(field.at(start)):
        raise NoOptimalActionError(f"Start {start} cannot reach the goal")
    positions = [start]
    actions: List[int] = []
    pos = start
    while pos != field.world.goal:
        a = optimal_action(field, pos)
        dx1, dx2 = ACTION_DELTAS[a]
        pos = (pos[0] + dx1, pos[1] + dx2)
        actions.append(a)
        positions.append(pos)
    return ExpertTrajectory(map_id=field.world.source_map_id, goal=field.world.goal, positions=positions, actions=actions)


def map_seed(seed: int, index: int, attempt: int = 0) -> int:
    """64-bit per-map seed derived from (global seed, map index, attempt)"""
    return int(np.random.SeedSequence([seed, index, attempt]).generate_state(1, dtype=np.uint64)[0])


def label_map(
    map_id: str,
    terrain: TerrainMap,
    rng: np.random.Generator,
    trajectories_per_map: int,
    cell_size: int,
    risk_fraction: float,
    goal_mode: str = config.GOAL_MODE,
) -> Optional[Tuple[np.ndarray, List[ExpertTrajectory]]]:
    """Pick goals and starts for one map; None when the map cannot host enough trajectories"""
    grid = compress_risky(terrain.risky, cell_size, risk_fraction)
    safe_cells = [(int(c), int(r)) for r, c in zip(*np.nonzero(grid))]
    if len(safe_cells) < 2:
        return None

    def pick_goal() -> Cell:
        return safe_cells[int(rng.integers(len(safe_cells)))]

    trajectories: List[ExpertTrajectory] = []
    if goal_mode == 'shared':
        world = NavWorld(grid=grid, goal=pick_goal(), source_map_id=map_id, cell_size=cell_size)
        field = distance_field(world)
        starts = field.reachable_cells()
        if len(starts) < trajectories_per_map:
            return None
        for i in rng.choice(len(starts), size=trajectories_per_map, replace=False):
            trajectories.append(sample_trajectory(field, starts[int(i)]))
    elif goal_mode == 'per_trajectory':
        for _ in range(trajectories_per_map):
            world = NavWorld(grid=grid, goal=pick_goal(), source_map_id=map_id, cell_size=cell_size)
            field = distance_field(world)
            starts = field.reachable_cells()
            if not starts:
                return None
            trajectories.append(sample_trajectory(field, starts[int(rng.integers(len(starts)))]))
    else:
        raise ValueError(f"Unknown goal mode: {goal_mode}")
    return grid, trajectories


def _build_map(args: Tuple[int, int, TerrainParams, int, float, str, int]) -> MapEntry:
    index, seed, params, trajectories_per_map, risk_fraction, goal_mode, max_attempts = args
    map_id = f"map_{index:05d}"
    for attempt in range(max_attempts):
        s = map_seed(seed, index, attempt)
        terrain = generate_terrain(s, params)
        rng = np.random.default_rng(s)
        labelled = label_map(map_id, terrain, rng, trajectories_per_map, params.cell_size, risk_fraction, goal_mode)
        if labelled is not None:
            grid, trajectories = labelled
            return MapEntry(map_id=map_id, seed=s, split='', grid=grid, trajectories=trajectories, terrain=terrain)
        logger.warning(f"{map_id} attempt {attempt} rejected: fewer than {trajectories_per_map} reachable starts")
    raise DatasetGenerationError(
        f"{map_id}: no usable terrain after {max_attempts} attempts; craters may be too dense for "
        f"risk_fraction={risk_fraction}"
    )


def assign_splits(maps: Sequence[MapEntry], seed: int):
    """Split by map, 6/7 train and 1/7 test"""
    n_test = max(1, len(maps) // 7)
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(len(maps))
    test = set(int(i) for i in order[:n_test])
    for i, entry in enumerate(maps):
        entry.split = 'test' if i in test else 'train'


def build_dataset(
    gen_params: TerrainParams,
    n_maps: int,
    trajectories_per_map: int,
    seed: int,
    risk_fraction: float = config.RISK_FRACTION,
    goal_mode: str = config.GOAL_MODE,
    workers: int = 1,
    max_attempts: int = config.MAX_MAP_ATTEMPTS,
    sink: Optional[Callable[[MapEntry], None]] = None,
) -> DatasetManifest:
    """Generate and label maps; `sink` receives each map (with terrain) as soon as it is ready"""
    if n_maps < 7:
        raise ValueError(f"n_maps must be at least 7 for a 6:1 split, got {n_maps}")
    if trajectories_per_map < 1:
        raise ValueError(f"trajectories_per_map must be positive, got {trajectories_per_map}")

    jobs = [(i, seed, gen_params, trajectories_per_map, risk_fraction, goal_mode, max_attempts) for i in range(n_maps)]
    maps: List[MapEntry] = []

    def collect(entry: MapEntry):
        if sink is not None:
            sink(entry)
            entry.terrain = None
        maps.append(entry)
        if len(maps) % 100 == 0:
            logger.info(f"Generated {len(maps)}/{n_maps} maps")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for entry in pool.map(_build_map, jobs, chunksize=8):
                collect(entry)
    else:
        for job in jobs:
            collect(_build_map(job))
    assign_splits(maps, seed)
    logger.info(f"Built {n_maps} maps with {trajectories_per_map} trajectories each")
    return DatasetManifest(
        maps=maps,
        seed=seed,
        image_size=gen_params.image_size,
        cell_size=gen_params.cell_size,
        risk_fraction=risk_fraction,
        params_digest=gen_params.digest(),
        goal_mode=goal_mode,
        terrain_params=gen_params.to_dict(),
    )


def build_dataset_from_images(
    terrains: Sequence[Tuple[str, TerrainMap]],
    trajectories_per_map: int,
    seed: int,
    cell_size: int = config.CELL_SIZE,
    risk_fraction: float = config.RISK_FRACTION,
    goal_mode: str = config.GOAL_MODE,
) -> DatasetManifest:
    """Label ingested imagery; maps that cannot host enough trajectories are skipped"""
    maps: List[MapEntry] = []
    for index, (name, terrain) in enumerate(terrains):
        rng = np.random.default_rng(map_seed(seed, index))
        labelled = label_map(name, terrain, rng, trajectories_per_map, cell_size, risk_fraction, goal_mode)
        if labelled is None:
            logger.warning(f"Skipping {name}: fewer than {trajectories_per_map} reachable starts")
            continue
        grid, trajectories = labelled
        maps.append(MapEntry(map_id=name, seed=0, split='', grid=grid, trajectories=trajectories, terrain=terrain))
    if len(maps) < 7:
        raise DatasetGenerationError(f"Only {len(maps)} usable images; at least 7 are needed for a 6:1 split")
    sizes = {m.terrain.size for m in maps}
    if len(sizes) != 1:
        raise ValueError(f"Ingested images differ in size: {sorted(sizes)}")
    assign_splits(maps, seed)
    digest = hashlib.sha256(''.join(m.terrain.params_digest for m in maps).encode('utf-8')).hexdigest()
    return DatasetManifest(
        maps=maps,
        seed=seed,
        image_size=sizes.pop(),
        cell_size=cell_size,
        risk_fraction=risk_fraction,
        params_digest=digest,
        goal_mode=goal_mode,
    )


def audit_dataset(manifest: DatasetManifest) -> int:
    """Count stored labels that disagree with a recomputed oracle"""
    mismatches = 0
    for entry in manifest.maps:
        fields: Dict[Cell, DistanceField] = {}
        for traj in entry.trajectories:
            if traj.goal not in fields:
                world = NavWorld(grid=entry.grid, goal=traj.goal, source_map_id=entry.map_id, cell_size=manifest.cell_size)
                fields[traj.goal] = distance_field(world)
            field = fields[traj.goal]
            if not is_successful_trajectory(field.world, traj.positions):
                mismatches += len(traj.actions)
                continue
            for pos, action in zip(traj.positions, traj.actions):
                if optimal_action(field, pos) != action:
                    mismatches += 1
    if mismatches:
        logger.error(f"Dataset audit found {mismatches} mislabelled samples")
    return mismatches

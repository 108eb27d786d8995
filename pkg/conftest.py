"""
Shared pytest fixtures
"""

import numpy as np
import pytest

from dataset_manager import DatasetManager
from expert_oracle import build_dataset
from nav_mdp import NavWorld
from terrain_synth import default_terrain_params

TINY_SIZE = 32
TINY_MAPS = 7
TINY_TRAJ = 3
TINY_SEED = 3


def make_world(n=5, goal=(4, 4), risky=()):
    grid = np.ones((n, n), dtype=bool)
    for x1, x2 in risky:
        grid[x2, x1] = False
    return NavWorld(grid=grid, goal=goal)


@pytest.fixture
def empty_world():
    return make_world


@pytest.fixture(scope='session')
def tiny_dataset_dir(tmp_path_factory):
    """Seven 32px maps with three trajectories each, saved to disk"""
    out = tmp_path_factory.mktemp('tiny_data')
    manager = DatasetManager(str(out))
    params = default_terrain_params(TINY_SIZE)
    manifest = build_dataset(params, TINY_MAPS, TINY_TRAJ, TINY_SEED,
                             sink=lambda entry: manager.save_map(entry, params.cell_size))
    manager.save_manifest(manifest)
    return out


@pytest.fixture(scope='session')
def tiny_splits(tiny_dataset_dir):
    manager = DatasetManager(str(tiny_dataset_dir))
    manifest = manager.load_manifest()
    return manifest, manager.load_samples(manifest, 'train'), manager.load_samples(manifest, 'test')

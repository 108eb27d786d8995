import json

import numpy as np
import pytest

from conftest import TINY_MAPS, TINY_SEED, TINY_SIZE, TINY_TRAJ
from dataset_manager import DatasetManager, materialize_samples
from expert_oracle import audit_dataset, build_dataset
from terrain_synth import default_terrain_params, generate_terrain


def test_dataset_layout(tiny_dataset_dir):
    manager = DatasetManager(str(tiny_dataset_dir))
    assert manager.exists()
    manifest = json.loads(manager.manifest_file.read_text())
    assert manifest['counts']['maps'] == TINY_MAPS
    assert manifest['counts']['train_maps'] == 6
    assert manifest['counts']['test_maps'] == 1
    assert manifest['seed'] == TINY_SEED
    for item in manifest['maps']:
        map_dir = manager.map_dir(item['map_id'])
        for name in ('gray.png', 'edge.png', 'risky.png', 'meta.json'):
            assert (map_dir / name).exists()


def test_meta_records_goal_and_grid(tiny_dataset_dir):
    manager = DatasetManager(str(tiny_dataset_dir))
    meta = json.loads((manager.map_dir('map_00000') / 'meta.json').read_text())
    assert meta['grid_size'] == TINY_SIZE // 4
    assert meta['cell_size'] == 4
    assert len(meta['grid']) == TINY_SIZE // 4
    assert len(meta['trajectories']) == TINY_TRAJ
    assert all(t['goal'] == meta['goal'] for t in meta['trajectories'])


def test_manifest_round_trip(tiny_dataset_dir):
    manager = DatasetManager(str(tiny_dataset_dir))
    manifest = manager.load_manifest()
    assert manifest.image_size == TINY_SIZE
    assert manifest.cell_size == 4
    assert manifest.counts()['trajectories'] == TINY_MAPS * TINY_TRAJ
    assert audit_dataset(manifest) == 0

    regenerated = build_dataset(default_terrain_params(TINY_SIZE), TINY_MAPS, TINY_TRAJ, TINY_SEED)
    for stored, fresh in zip(manifest.maps, regenerated.maps):
        assert stored.split == fresh.split
        np.testing.assert_array_equal(stored.grid, fresh.grid)


def test_stored_rasters_match_generator(tiny_dataset_dir):
    manager = DatasetManager(str(tiny_dataset_dir))
    manifest = manager.load_manifest()
    entry = manifest.maps[0]
    stored = manager.load_terrain(entry)
    fresh = generate_terrain(entry.seed, default_terrain_params(TINY_SIZE))
    np.testing.assert_allclose(stored.gray, fresh.gray, atol=1e-12)
    np.testing.assert_array_equal(stored.risky, fresh.risky)
    np.testing.assert_array_equal(stored.edge, fresh.edge)


def test_manifest_digest_is_stable(tiny_dataset_dir):
    manager = DatasetManager(str(tiny_dataset_dir))
    assert manager.manifest_digest() == manager.manifest_digest()
    assert len(manager.manifest_digest()) == 64


def test_load_samples(tiny_splits):
    manifest, train_set, test_set = tiny_splits
    counts = manifest.counts()
    assert len(train_set) == counts['train_samples']
    assert len(test_set) == counts['test_samples']
    assert train_set.encodings.shape[1:] == (3, TINY_SIZE, TINY_SIZE)
    assert train_set.encodings.dtype == np.float32
    # shared goals: one encoding per map
    assert len(train_set.worlds) == 6
    assert all(len(s) == TINY_TRAJ for s in train_set.starts)
    assert train_set.labels.min() >= 0 and train_set.labels.max() < 8


def test_sample_batch(tiny_splits):
    _, train_set, _ = tiny_splits
    x, pos, labels = train_set.batch(np.array([0, 1, 2]))
    assert x.shape == (3, 3, TINY_SIZE, TINY_SIZE)
    assert pos.shape == (3, 2)
    assert labels.shape == (3,)


def test_samples_carry_goal_channel(tiny_splits):
    _, train_set, _ = tiny_splits
    for e, world in enumerate(train_set.worlds):
        g1, g2 = world.goal
        target = train_set.encodings[e, 2]
        assert target.sum() == 16
        assert target[g2 * 4, g1 * 4] == 1.0


def test_materialize_from_memory():
    manifest = build_dataset(default_terrain_params(32), 7, 2, seed=8)
    samples = materialize_samples(manifest, 'test')
    assert samples.split == 'test'
    assert len(samples) == manifest.counts()['test_samples']


def test_materialize_without_terrain_fails():
    manifest = build_dataset(default_terrain_params(32), 7, 2, seed=8, sink=lambda entry: None)
    with pytest.raises(ValueError):
        materialize_samples(manifest, 'train')


def test_unknown_split_rejected(tiny_splits):
    manifest, _, _ = tiny_splits
    with pytest.raises(ValueError):
        materialize_samples(manifest, 'validation')


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        DatasetManager(str(tmp_path / 'nothing')).load_manifest()


def test_save_map_requires_terrain(tmp_path):
    manifest = build_dataset(default_terrain_params(32), 7, 1, seed=0, sink=lambda entry: None)
    with pytest.raises(ValueError):
        DatasetManager(str(tmp_path)).save_map(manifest.maps[0], 4)


def test_statistics(tiny_dataset_dir):
    stats = DatasetManager(str(tiny_dataset_dir)).get_statistics()
    assert stats['counts']['maps'] == TINY_MAPS
    assert stats['image_size'] == TINY_SIZE
    assert stats['storage_size_mb'] >= 0

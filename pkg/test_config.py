import pytest

import config
from config import RunConfig, full_scale


def test_defaults():
    run = RunConfig()
    assert run.cell_size == 4
    assert run.trajectories_per_map == 7
    assert run.l2_lambda == 1e-4
    assert run.lr == 1e-3
    assert run.batch_size == 128
    assert run.goal_mode == 'shared'
    assert config.CANNY_SIGMA == 1.4
    assert (config.CANNY_LOW, config.CANNY_HIGH) == (0.1, 0.3)


def test_round_trip():
    run = RunConfig(seed=5, arch_id='vin', terrain={'rim_brightness': 0.3})
    assert RunConfig.from_dict(run.to_dict()) == run


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match='colour'):
        RunConfig.from_dict({'colour': 'red'})


def test_merged_skips_none():
    run = RunConfig(epochs=3).merged({'epochs': None, 'lr': 0.01})
    assert run.epochs == 3
    assert run.lr == 0.01


def test_full_scale():
    run = full_scale(RunConfig(epochs=2))
    assert run.image_size == 128
    assert run.n_maps == 10000
    assert run.epochs == 2


def test_deterministic_forces_single_worker():
    assert RunConfig(workers=4, deterministic=True).effective_workers() == 1
    assert RunConfig(workers=4).effective_workers() == 4
    assert RunConfig(workers=0).effective_workers() == 1

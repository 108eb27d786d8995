import json

import numpy as np
from PIL import Image

from config import RunConfig
from models import ModelSpec, build_model
from run_manager import RunManager
from train_eval import EpochMetrics, MetricsRecord


def _record():
    return MetricsRecord(arch_id='b1net', epochs=[
        EpochMetrics(epoch=1, loss=2.1, train_acc=0.2, test_acc=0.1, seconds=3.0),
    ], train_succ=0.1, test_succ=0.0, best_epoch=1)


def test_config_round_trip(tmp_path):
    manager = RunManager(str(tmp_path / 'run'))
    assert manager.load_config() is None
    run = RunConfig(seed=9, arch_id='b1net')
    manager.save_config(run)
    assert manager.load_config() == run


def test_metrics_keep_seconds_by_default(tmp_path):
    manager = RunManager(str(tmp_path))
    manager.save_metrics(_record())
    assert manager.load_metrics() == _record()


def test_deterministic_metrics_move_seconds_to_timings(tmp_path):
    manager = RunManager(str(tmp_path))
    manager.save_metrics(_record(), deterministic=True)
    metrics = json.loads(manager.metrics_file.read_text())
    timings = json.loads(manager.timings_file.read_text())
    assert metrics['epochs'][0]['seconds'] is None
    assert timings['seconds'] == [3.0]
    assert timings['mean_epoch_seconds'] == 3.0


def test_checkpoint_round_trip(tmp_path):
    manager = RunManager(str(tmp_path / 'run'))
    model = build_model(ModelSpec(arch_id='b2net', image_size=16), seed=2)
    manager.save_checkpoint(model, {'epoch': 1})
    restored = manager.load_checkpoint('b2net')
    for name, value in model.params.items():
        np.testing.assert_array_equal(restored.params[name], value)


def test_images(tmp_path):
    manager = RunManager(str(tmp_path))
    assert manager.image_count() == 0
    manager.save_image('a.png', Image.new('L', (4, 4)))
    manager.save_image('b.png', Image.new('RGB', (4, 4)))
    assert manager.image_count() == 2

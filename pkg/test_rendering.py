import numpy as np
import pytest

from conftest import make_world
from rendering import (
    CONSTANT_GRAY,
    GOAL_RGB,
    PATH_RGB,
    START_RGB,
    normalize_values,
    plot_training_curves,
    render_trajectory_overlay,
    render_value_map,
    value_contrast,
    value_map,
)
from models import ModelSpec, build_model
from terrain_synth import default_terrain_params, generate_terrain
from dataset_manager import SampleSet
from train_eval import EpochMetrics, MetricsRecord, OraclePolicy


class ConstantPolicy:
    def action_values(self, encoding, world=None):
        n = encoding.shape[-1] // 4
        return np.ones((n, n, 8))


@pytest.fixture
def terrain():
    return generate_terrain(0, default_terrain_params(16))


def test_normalize_values_spans_full_range():
    pixels = normalize_values(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert pixels.dtype == np.uint8
    assert pixels.min() == 0 and pixels.max() == 255


def test_constant_value_map_renders_mid_gray(terrain):
    image = render_value_map(ConstantPolicy(), terrain, (1, 1), 4)
    assert image.size == (4, 4)
    assert image.mode == 'L'
    assert set(np.asarray(image).ravel()) == {CONSTANT_GRAY}


def test_model_value_map_shape(terrain):
    model = build_model(ModelSpec(arch_id='dbnet', image_size=16))
    image = render_value_map(model, terrain, (3, 0), 4, upscale=True)
    assert image.size == (16, 16)


def test_oracle_value_map_marks_planned_cells():
    world = make_world(n=4, goal=(3, 3), risky=[(1, 0), (1, 1), (0, 1)])
    values = value_map(OraclePolicy(), np.zeros((3, 16, 16)), world)
    assert values.shape == (4, 4)
    assert values[0, 0] == 0.0
    assert values[2, 2] == 1.0


def test_trajectory_overlay_colours(terrain):
    image = render_trajectory_overlay(terrain, [(0, 0), (1, 0), (2, 0), (3, 0)], 4)
    assert image.size == (16, 16)
    assert image.mode == 'RGB'
    assert image.getpixel((2, 2)) == START_RGB
    assert image.getpixel((14, 2)) == GOAL_RGB
    assert image.getpixel((8, 2)) == PATH_RGB


def test_trajectory_overlay_with_separate_goal(terrain):
    image = render_trajectory_overlay(terrain, [(0, 0), (1, 1)], 4, goal=(3, 3))
    assert image.getpixel((14, 14)) == GOAL_RGB
    assert image.getpixel((6, 6)) == PATH_RGB


def test_empty_trajectory_rejected(terrain):
    with pytest.raises(ValueError):
        render_trajectory_overlay(terrain, [], 4)


def test_plot_training_curves(tmp_path):
    record = MetricsRecord(arch_id='dbnet', epochs=[
        EpochMetrics(epoch=1, loss=2.0, train_acc=0.3, test_acc=0.2, seconds=None),
        EpochMetrics(epoch=2, loss=1.0, train_acc=0.6, test_acc=0.5, seconds=None),
    ])
    path = tmp_path / 'curves.png'
    plot_training_curves({'dbnet': record}, path)
    assert path.exists() and path.stat().st_size > 0


class RiskSeekingPolicy:
    """Values risky cells highest"""

    def action_values(self, encoding, world=None):
        values = np.where(world.grid, 0.0, 1.0)
        return np.repeat(values[:, :, None], 8, axis=-1)


def _contrast_samples(*worlds):
    return SampleSet(
        split='test',
        encodings=np.zeros((len(worlds), 3, 24, 24), dtype=np.float32),
        enc_index=np.zeros(0, dtype=np.int64),
        positions=np.zeros((0, 2), dtype=np.int64),
        labels=np.zeros(0, dtype=np.int64),
        worlds=list(worlds),
        starts=[[] for _ in worlds],
    )


def test_value_contrast_oracle_is_lighter_near_goal():
    samples = _contrast_samples(
        make_world(n=6, goal=(5, 5), risky=[(2, 2), (2, 3)]),
        make_world(n=6, goal=(0, 3), risky=[(3, 0), (4, 4), (5, 1)]),
    )
    assert value_contrast(OraclePolicy(), samples) == {'maps': 2, 'lighter': 2, 'fraction': 1.0}


def test_value_contrast_flags_inverted_policy():
    samples = _contrast_samples(make_world(n=6, goal=(5, 5), risky=[(2, 2)]))
    assert value_contrast(RiskSeekingPolicy(), samples) == {'maps': 1, 'lighter': 0, 'fraction': 0.0}


def test_value_contrast_skips_maps_without_risk():
    samples = _contrast_samples(make_world(n=6, goal=(5, 5)))
    assert value_contrast(OraclePolicy(), samples) == {'maps': 0, 'lighter': 0, 'fraction': None}

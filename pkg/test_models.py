import numpy as np
import pytest

from models import (
    ARCHS,
    DBNet,
    LocalNet,
    ModelSpec,
    VIN,
    build_ablation,
    build_model,
    dbnet_forward,
    load_model,
    model_gradient_check,
    save_model,
    vin_forward,
)
from tensor_nn import CheckpointError, ResidualBlock, ShapeError


def _inputs(batch, size, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((batch, 3, size, size))
    pos = rng.integers(0, size // 4, size=(batch, 2))
    return x, pos


def test_reprocess_shape_at_full_size():
    model = DBNet(ModelSpec(image_size=128))
    feat = model.reprocess.forward(np.zeros((1, 3, 128, 128), dtype=np.float32))
    assert feat.shape == (1, 12, 32, 32)
    assert not feat.any()


def test_fc1_fan_in_at_full_size():
    assert DBNet(ModelSpec(image_size=128)).fc1_fan_in() == 1280


def test_fc1_fan_in_tracks_image_size():
    assert DBNet(ModelSpec(image_size=64)).fc1_fan_in() == 20 * 4 * 4
    assert DBNet(ModelSpec(image_size=16)).fc1_fan_in() == 20


def test_dbnet_output_shapes():
    model = DBNet(ModelSpec(image_size=32))
    x, pos = _inputs(3, 32)
    out = dbnet_forward(model, x, pos)
    assert out.logits.shape == (3, 8)
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.array_equal(out.actions, out.probs.argmax(axis=1))
    f1, g = model.trunk(model._check_input(x))
    assert f1.shape == (3, 10)
    assert g.shape == (3, 10, 8, 8)


def test_branch_widths():
    model = DBNet(ModelSpec(image_size=32))
    fc_widths = [l.params[l.w].shape[1] for l in model.branch_one.layers if hasattr(l, 'fan_in')]
    assert fc_widths == [192, 10]
    residuals = [l for l in model.branch_two.layers if isinstance(l, ResidualBlock)]
    assert len(residuals) == 5


def test_untrained_logits_are_deterministic():
    x, pos = _inputs(2, 32)
    a = build_model(ModelSpec(image_size=32), seed=5).forward(x, pos)
    b = build_model(ModelSpec(image_size=32), seed=5).forward(x, pos)
    c = build_model(ModelSpec(image_size=32), seed=6).forward(x, pos)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_logits_ignore_position_without_branch_two_signal():
    model = DBNet(ModelSpec(image_size=32), seed=1)
    model.params['conv21.w'][:] = 0
    model.params['conv21.b'][:] = 0
    x, _ = _inputs(1, 32)
    a = model.forward(x, [(0, 0)])
    b = model.forward(x, [(7, 3)])
    np.testing.assert_array_equal(a, b)


def test_position_changes_logits_through_branch_two():
    model = DBNet(ModelSpec(image_size=32), seed=1)
    x, _ = _inputs(1, 32)
    assert not np.array_equal(model.forward(x, [(0, 0)]), model.forward(x, [(7, 3)]))


def test_ablation_specs():
    b1 = build_ablation('b1net', ModelSpec(image_size=32))
    assert b1.arch_id == 'b1net' and b1.image_size == 32
    with pytest.raises(ValueError):
        build_ablation('dbnet')


def test_b1net_is_branch_two_only():
    b1 = LocalNet(build_ablation('b1net', ModelSpec(image_size=32)))
    db = DBNet(ModelSpec(image_size=32))
    assert b1.output.fan_in == 10
    assert b1.num_parameters() < db.num_parameters()
    assert not any(name.startswith('fc1') for name in b1.params)


def test_b2net_has_no_residual_blocks():
    b1 = LocalNet(build_ablation('b1net', ModelSpec(image_size=32)))
    b2 = LocalNet(build_ablation('b2net', ModelSpec(image_size=32)))
    assert not any(isinstance(l, ResidualBlock) for l in b2.branch_two.layers)
    assert b2.num_parameters() < b1.num_parameters()
    x, pos = _inputs(2, 32)
    assert b2.forward(x, pos).shape == (2, 8)


def test_vin_zero_weights_leave_only_output_bias():
    model = VIN(ModelSpec(arch_id='vin', image_size=16, vin_iterations=1))
    model.params['vin_q.w'][:] = 0
    model.params['vin_q.b'][:] = 0
    model.params['fc3.b'][:] = np.arange(8, dtype=np.float32)
    x, pos = _inputs(3, 16)
    logits = vin_forward(model, x, pos).logits
    np.testing.assert_array_equal(logits, np.tile(np.arange(8, dtype=np.float32), (3, 1)))


def test_vin_value_monotone_in_reward():
    model = VIN(ModelSpec(arch_id='vin', image_size=16, vin_iterations=4), dtype=np.float64)
    rng = np.random.default_rng(2)
    model.params['vin_q.w'][:] = rng.random(model.params['vin_q.w'].shape) * 0.2
    model.params['vin_q.b'][:] = 0
    reward = rng.standard_normal((1, 1, 4, 4))
    _, low = model.iterate(reward)
    _, high = model.iterate(reward + rng.random((1, 1, 4, 4)))
    model.reset()
    assert np.all(high >= low)


@pytest.mark.parametrize('arch', ARCHS)
def test_batch_forward_matches_single_forwards(arch):
    spec = ModelSpec(arch_id=arch, image_size=16, vin_iterations=3)
    model = build_model(spec, seed=0, dtype=np.float64)
    x, pos = _inputs(3, 16, seed=4)
    batch = model.forward(x, pos)
    singles = np.concatenate([model.forward(x[i:i + 1], pos[i:i + 1]) for i in range(3)])
    np.testing.assert_allclose(batch, singles, atol=1e-6)


@pytest.mark.parametrize('arch', ARCHS)
def test_action_values_match_forward(arch):
    model = build_model(ModelSpec(arch_id=arch, image_size=16, vin_iterations=2), seed=0, dtype=np.float64)
    x, _ = _inputs(1, 16)
    table = model.action_values(x[0])
    assert table.shape == (4, 4, 8)
    np.testing.assert_allclose(table[1, 3], model.forward(x, [(3, 1)])[0], atol=1e-9)


@pytest.mark.parametrize('arch', ARCHS)
def test_end_to_end_gradient_check(arch):
    report = model_gradient_check(arch, samples=8, tolerance=1e-3, seed=0)
    assert report.passed, report.worst


def test_backward_accumulates_every_parameter():
    model = DBNet(ModelSpec(image_size=16), seed=0)
    x, pos = _inputs(2, 16)
    model.params.zero_grad()
    logits = model.forward(x, pos)
    model.backward(np.ones_like(logits))
    assert all(g.shape == model.params[name].shape for name, g in model.params.grads.items())
    assert model.params.grads['fc3.w'].any()
    assert model.params.grads['conv00.w'].any()


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(arch_id='resnet')
    with pytest.raises(ShapeError):
        ModelSpec(cell_size=8)
    with pytest.raises(ShapeError):
        ModelSpec(image_size=30)
    with pytest.raises(ValueError):
        ModelSpec(arch_id='vin', vin_iterations=0)


def test_input_validation():
    model = DBNet(ModelSpec(image_size=16))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 2, 16, 16)), [(0, 0)])
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 3, 32, 32)), [(0, 0)])
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 3, 16, 16)), [(4, 0)])


def test_save_and_load_model(tmp_path):
    model = build_model(ModelSpec(arch_id='b1net', image_size=16), seed=3)
    model.params.step = 12
    path = tmp_path / 'model.bin'
    save_model(path, model, {'epoch': 2})

    restored = load_model(path, expected_arch='b1net')
    assert restored.spec == model.spec
    assert restored.params.step == 12
    x, pos = _inputs(2, 16)
    np.testing.assert_array_equal(restored.forward(x, pos), model.forward(x, pos))


def test_load_model_rejects_other_arch(tmp_path):
    path = tmp_path / 'model.bin'
    save_model(path, build_model(ModelSpec(arch_id='vin', image_size=16, vin_iterations=2)))
    with pytest.raises(CheckpointError):
        load_model(path, expected_arch='dbnet')


def test_dbnet_too_small_fails_at_build():
    with pytest.raises(ShapeError, match='pool12'):
        build_model(ModelSpec(arch_id='dbnet', image_size=8))


def test_local_net_builds_at_minimum_size():
    model = build_model(ModelSpec(arch_id='b1net', image_size=8), seed=0)
    logits = model.forward(np.zeros((1, 3, 8, 8), dtype=np.float32), np.array([[1, 1]]))
    assert logits.shape == (1, 8)

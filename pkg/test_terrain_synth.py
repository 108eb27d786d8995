import numpy as np
import pytest

from terrain_synth import (
    CannyParams,
    TerrainMap,
    TerrainParams,
    canny_edges,
    compress_risky,
    default_terrain_params,
    encode_input,
    generate_terrain,
    load_terrain_pair,
    save_image,
)


def _blank_terrain(size):
    zeros = np.zeros((size, size))
    return TerrainMap(gray=zeros, risky=zeros.astype(bool), edge=zeros, seed=0, params_digest='')


def test_generate_terrain_is_deterministic():
    params = default_terrain_params(32)
    a = generate_terrain(11, params)
    b = generate_terrain(11, params)
    assert a.to_bytes() == b.to_bytes()
    assert a.params_digest == b.params_digest


def test_generate_terrain_differs_across_seeds():
    params = default_terrain_params(32)
    assert generate_terrain(1, params).to_bytes() != generate_terrain(2, params).to_bytes()


@pytest.mark.parametrize('seed', [0, 1, 2, 3, 4])
def test_default_risky_fraction_in_range(seed):
    terrain = generate_terrain(seed, default_terrain_params(64))
    fraction = terrain.risky.mean()
    assert 0 < fraction < 0.5
    assert terrain.gray.shape == terrain.edge.shape == (64, 64)
    assert terrain.gray.min() >= 0 and terrain.gray.max() <= 1
    assert set(np.unique(terrain.edge)) <= {0.0, 1.0}


def test_rocks_add_risk():
    base = default_terrain_params(64)
    rocky = default_terrain_params(64, rock_count_range=(4, 4))
    assert base.digest() != rocky.digest()
    assert generate_terrain(5, rocky).risky.sum() > 0


def test_params_round_trip_through_dict():
    params = default_terrain_params(48, crater_count_range=(2, 4))
    assert TerrainParams.from_dict(params.to_dict()) == params
    assert TerrainParams.from_dict(params.to_dict()).digest() == params.digest()


@pytest.mark.parametrize('size, overrides', [
    (32, {'cell_size': 5}),
    (32, {'crater_count_range': (0, 3)}),
    (32, {'crater_count_range': (5, 3)}),
    (32, {'crater_radius_range': (-1.0, 2.0)}),
    (32, {'noise_amplitude': -0.1}),
])
def test_degenerate_params_rejected(size, overrides):
    with pytest.raises(ValueError):
        default_terrain_params(size, **overrides)


def test_image_size_must_tile_into_cells():
    with pytest.raises(ValueError, match='divisible by cell_size'):
        TerrainParams(image_size=30)


def test_canny_params_validation():
    with pytest.raises(ValueError):
        CannyParams(low_threshold=0.4, high_threshold=0.3)
    with pytest.raises(ValueError):
        CannyParams(gaussian_sigma=-1.0)


def test_canny_constant_image_has_no_edges():
    edges = canny_edges(np.full((32, 32), 0.6))
    assert edges.shape == (32, 32)
    assert not edges.any()


def test_canny_vertical_step_gives_single_line():
    image = np.zeros((64, 64))
    image[:, 32:] = 1.0
    edges = canny_edges(image)
    assert np.all(edges.sum(axis=1) == 1)
    columns = np.nonzero(edges)[1]
    assert np.all(columns == columns[0])
    assert abs(columns[0] - 32) <= 1


def test_canny_output_is_binary():
    rng = np.random.default_rng(0)
    edges = canny_edges(rng.random((24, 24)))
    assert set(np.unique(edges)) <= {0.0, 1.0}


def test_canny_invariant_to_constant_offset():
    rng = np.random.default_rng(1)
    # dyadic values keep the offset exact in floating point
    image = rng.integers(0, 128, size=(16, 16)) / 256.0
    assert np.array_equal(canny_edges(image), canny_edges(image + 0.25))


def test_encode_input_goal_block():
    enc = encode_input(_blank_terrain(128), (31, 31), 4)
    assert enc.shape == (3, 128, 128)
    assert enc.dtype == np.float32
    rows, cols = np.nonzero(enc[2])
    assert rows.min() == 124 and rows.max() == 127
    assert cols.min() == 124 and cols.max() == 127
    assert enc[2].sum() == 16


def test_encode_input_uses_column_then_row():
    enc = encode_input(_blank_terrain(32), (2, 5), 4)
    assert enc[2, 20:24, 8:12].all()
    assert enc[2].sum() == 16


def test_encode_input_copies_gray_and_edge():
    terrain = generate_terrain(3, default_terrain_params(32))
    enc = encode_input(terrain, (0, 0), 4)
    np.testing.assert_allclose(enc[0], terrain.gray, atol=1e-6)
    np.testing.assert_array_equal(enc[1], terrain.edge)
    assert enc.min() >= 0 and enc.max() <= 1


def test_encode_input_rejects_goal_outside_grid():
    with pytest.raises(ValueError):
        encode_input(_blank_terrain(32), (8, 0), 4)


def test_compress_all_safe():
    assert compress_risky(np.zeros((16, 16), dtype=bool), 4).all()


def test_compress_single_risky_block():
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:8, 8:12] = True
    grid = compress_risky(mask, 4, 0.25)
    assert grid.shape == (4, 4)
    assert not grid[1, 2]
    assert grid.sum() == 15


def test_compress_threshold_is_strict():
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, :4] = True
    assert compress_risky(mask, 4, 0.25).all()
    mask[1, 0] = True
    assert not compress_risky(mask, 4, 0.25).any()


def test_compress_matches_brute_force_count():
    rng = np.random.default_rng(4)
    mask = rng.random((32, 32)) < 0.2
    grid = compress_risky(mask, 4, 0.25)
    for r in range(8):
        for c in range(8):
            count = 0
            for i in range(4):
                for j in range(4):
                    count += int(mask[r * 4 + i, c * 4 + j])
            assert grid[r, c] == (count / 16 <= 0.25)


def test_compress_is_monotone():
    rng = np.random.default_rng(5)
    mask = rng.random((32, 32)) < 0.15
    more = mask | (rng.random((32, 32)) < 0.1)
    before, after = compress_risky(mask, 4), compress_risky(more, 4)
    assert not np.any(~before & after)


def test_load_terrain_pair(tmp_path):
    gray = np.full((16, 16), 0.5)
    gray[:, 8:] = 0.9
    mask = np.zeros((16, 16))
    mask[0:4, 0:4] = 1.0
    save_image(tmp_path / 'a_gray.png', gray)
    save_image(tmp_path / 'a_mask.png', mask)

    terrain = load_terrain_pair(tmp_path / 'a_gray.png', tmp_path / 'a_mask.png')
    assert terrain.size == 16
    assert terrain.risky[:4, :4].all() and terrain.risky.sum() == 16
    assert terrain.edge.any()
    assert abs(terrain.gray[0, 0] - 128 / 255) < 1e-9


def test_load_terrain_pair_rejects_size_mismatch(tmp_path):
    save_image(tmp_path / 'g.png', np.zeros((16, 16)))
    save_image(tmp_path / 'm.png', np.zeros((8, 8)))
    with pytest.raises(ValueError):
        load_terrain_pair(tmp_path / 'g.png', tmp_path / 'm.png')

import itertools

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from f3.hashgrid import (HashGridConfig, encode, encode_autograd, encode_backward, init_tables, is_direct,
                         level_resolutions, scatter_table_grad, vertex_index)

DEFAULT = HashGridConfig()


def test_second_level_resolution_matches_high_precision():
    res = level_resolutions(DEFAULT)
    mpmath.mp.dps = 50
    oracle = [int(mpmath.floor(mpmath.mpf(lo) * (mpmath.mpf(hi) / lo) ** (mpmath.mpf(1) / 3) + mpmath.mpf("0.5")))
              for lo, hi in zip(DEFAULT.r_min, DEFAULT.r_max)]
    assert tuple(res[1]) == tuple(oracle) == (23, 27, 2)


def test_level_endpoints_and_single_level():
    res = level_resolutions(DEFAULT)
    assert tuple(res[0]) == DEFAULT.r_min and tuple(res[-1]) == DEFAULT.r_max
    assert np.all(np.diff(res, axis=0) >= 0)
    one = level_resolutions(HashGridConfig(levels=1))
    assert one.shape == (1, 3) and tuple(one[0]) == DEFAULT.r_max
    two = level_resolutions(HashGridConfig(levels=2))
    assert tuple(two[0]) == DEFAULT.r_min and tuple(two[1]) == DEFAULT.r_max


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        HashGridConfig(levels=0)
    with pytest.raises(ValueError):
        HashGridConfig(r_min=(8, 8, 4), r_max=(16, 16, 2))


def test_direct_index_row_major_time_fastest():
    res = np.array([2, 2, 2])
    assert is_direct(res, 2**10)
    assert vertex_index(np.array([1, 1, 1]), res, 2**10) == 13
    grid = np.array(list(itertools.product(range(3), repeat=3)))
    assert np.array_equal(vertex_index(grid, res, 2**10), np.arange(27))


def test_hashed_index_in_range_and_xor_form():
    res = np.array([100, 100, 100])
    assert not is_direct(res, 2**10)
    rng = np.random.default_rng(0)
    v = rng.integers(0, 101, (1000, 3))
    rows = vertex_index(v, res, 2**10)
    assert rows.min() >= 0 and rows.max() < 2**10
    y, x, t = (int(a) for a in v[0])
    expected = ((y * 1) ^ (x * 2654435761) ^ (t * 805459861)) % 2**10
    assert rows[0] == expected


def small_config(**kw):
    base = dict(levels=3, feature_dim=2, table_size=2**12, r_min=(4, 4, 1), r_max=(16, 16, 4),
                extent=(17, 17, 5), init_scale=1.0)
    base.update(kw)
    return HashGridConfig(**base)


def test_vertex_coordinate_returns_row():
    cfg = small_config(levels=1, r_min=(16, 16, 4), r_max=(16, 16, 4))
    tables = init_tables(cfg, torch.Generator().manual_seed(0), torch.float64)
    out, _ = encode(torch.tensor([[2.0, 3.0, 5.0]]), tables, cfg)
    row = vertex_index(np.array([3, 5, 2]), np.array([16, 16, 4]), cfg.table_size)
    assert torch.allclose(out[0], tables[0, row])


def test_cell_center_is_corner_average():
    cfg = small_config(levels=1, r_min=(8, 8, 2), r_max=(8, 8, 2))
    tables = init_tables(cfg, torch.Generator().manual_seed(1), torch.float64)
    # extent 17 over resolution 8 gives a vertex spacing of 2 extent units
    out, touched = encode(torch.tensor([[1.0, 3.0, 5.0]]), tables, cfg)
    verts = np.array([[1 + dy, 2 + dx, 0 + dt] for dy in (0, 1) for dx in (0, 1) for dt in (0, 1)])
    rows = vertex_index(verts, np.array([8, 8, 2]), cfg.table_size)
    assert torch.allclose(out[0], tables[0, rows].mean(0))
    assert torch.allclose(touched.weight, torch.full_like(touched.weight, 1 / 8))


def test_backward_distributes_upstream_over_corners():
    cfg = small_config(levels=1, r_min=(8, 8, 2), r_max=(8, 8, 2))
    tables = init_tables(cfg, dtype=torch.float64)
    _, touched = encode(torch.tensor([[1.0, 3.0, 5.0]]), tables, cfg)
    up = torch.tensor([[0.8, -1.6]], dtype=torch.float64)
    grads = encode_backward(touched, up, 2)
    assert len(grads) == 8
    for g in grads.values():
        assert torch.allclose(g, up[0] / 8)


def test_out_of_range_coordinates_are_clamped_and_counted():
    cfg = small_config()
    tables = init_tables(cfg, dtype=torch.float64)
    out, touched = encode(torch.tensor([[-1.0, 20.0, 3.0], [9.0, 16.0, 16.0]]), tables, cfg)
    ref, _ = encode(torch.tensor([[0.0, 16.0, 3.0], [4.0, 16.0, 16.0]]), tables, cfg)
    assert touched.n_clamped == 2 and torch.allclose(out, ref)


coord_strategy = st.tuples(st.floats(0, 4), st.floats(0, 16), st.floats(0, 16))


@given(st.lists(coord_strategy, min_size=1, max_size=20))
def test_weights_partition_unity_and_touch_budget(coords):
    cfg = small_config()
    tables = init_tables(cfg, dtype=torch.float64)
    _, touched = encode(torch.tensor(coords, dtype=torch.float64), tables, cfg)
    assert torch.allclose(touched.weight.sum(-1), torch.ones(len(coords), cfg.levels, dtype=torch.float64))
    assert torch.all(touched.weight >= -1e-12)
    levels, rows = touched.entries()
    assert len(rows) <= 8 * cfg.levels * len(coords)


@given(st.lists(coord_strategy, min_size=1, max_size=10))
def test_constant_table_encodes_to_constant(coords):
    cfg = small_config()
    tables = torch.ones((cfg.levels, cfg.table_size, cfg.feature_dim), dtype=torch.float64) * 0.7
    out, _ = encode(torch.tensor(coords, dtype=torch.float64), tables, cfg)
    assert torch.allclose(out, torch.full_like(out, 0.7))


def test_encoding_is_deterministic():
    cfg = small_config()
    tables = init_tables(cfg, torch.Generator().manual_seed(3), torch.float64)
    c = torch.rand(50, 3, dtype=torch.float64) * torch.tensor([4.0, 16.0, 16.0])
    a, _ = encode(c, tables, cfg)
    b, _ = encode(c.clone(), tables.clone(), cfg)
    assert torch.equal(a, b)


def test_sparse_and_dense_backward_agree_with_autograd():
    cfg = small_config(table_size=64)  # small table forces hash collisions
    tables = init_tables(cfg, torch.Generator().manual_seed(4), torch.float64).requires_grad_(True)
    c = torch.rand(40, 3, dtype=torch.float64) * torch.tensor([4.0, 16.0, 16.0])
    out, touched = encode_autograd(c, tables, cfg)
    up = torch.randn_like(out)
    (out * up).sum().backward()
    dense = scatter_table_grad(touched, up, tables.shape)
    assert torch.allclose(tables.grad, dense)
    for (lvl, row), g in encode_backward(touched, up, cfg.feature_dim).items():
        assert torch.allclose(dense[lvl, row], g)
    # reference: plain torch indexing under autograd
    t2 = tables.detach().clone().requires_grad_(True)
    out2, _ = encode(c, t2, cfg)
    (out2 * up).sum().backward()
    assert torch.allclose(t2.grad, tables.grad)


def test_finite_difference_table_gradient():
    cfg = small_config(levels=2)
    tables = init_tables(cfg, torch.Generator().manual_seed(5), torch.float64)
    c = torch.rand(10, 3, dtype=torch.float64) * torch.tensor([4.0, 16.0, 16.0])
    t = tables.clone().requires_grad_(True)
    out, touched = encode_autograd(c, t, cfg)
    out.pow(2).sum().backward()
    lvl, row = (int(a[0]) for a in touched.entries())
    for f in range(cfg.feature_dim):
        plus, minus = tables.clone(), tables.clone()
        plus[lvl, row, f] += 1e-6
        minus[lvl, row, f] -= 1e-6
        fd = (encode(c, plus, cfg)[0].pow(2).sum() - encode(c, minus, cfg)[0].pow(2).sum()) / 2e-6
        assert float(fd) == pytest.approx(float(t.grad[lvl, row, f]), rel=1e-6, abs=1e-9)

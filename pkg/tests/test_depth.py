import math
import statistics

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from f3.acceptance import planted_stereo_pair
from f3.depth import (DisparityHead, DisparityMap, block_match_stereo, depth_metrics, disparity_to_depth,
                      gradient_reg, normalize_disparity, silog_loss, stage1_loss)


def test_normalize_hand_values():
    out = normalize_disparity(torch.tensor([[1.0, 2, 3, 4, 5]], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([[-5 / 3, -5 / 6, 0, 5 / 6, 5 / 3]], dtype=torch.float64))


def test_normalize_degenerate_inputs():
    mask = np.zeros((3, 3), dtype=bool)
    mask[1, 1] = True
    with pytest.raises(ValueError):
        normalize_disparity(np.ones((3, 3)) * np.arange(3), mask)
    with pytest.raises(ValueError, match="constant"):
        normalize_disparity(np.full((3, 3), 2.0))


def test_normalize_invalid_pixels_are_zero():
    mask = np.array([[True, True, False]])
    out = normalize_disparity(np.array([[1.0, 3.0, 99.0]]), mask)
    assert out[0, 2] == 0 and torch.allclose(out[0, :2], torch.tensor([-1.0, 1.0], dtype=torch.float64))


def test_stage1_zero_for_identical_and_affine(rng):
    d = rng.uniform(0.5, 4.0, (8, 8))
    assert float(stage1_loss(d, d)) == pytest.approx(0.0, abs=1e-12)
    assert float(stage1_loss(2 * d + 5, d)) == pytest.approx(0.0, abs=1e-12)


def scalar_normalize(vals):
    med = statistics.median(vals)
    dev = sum(abs(v - med) for v in vals) / len(vals)
    return [(v - med) / dev for v in vals]


def scalar_grad_reg(a, b, scales=4):
    n = len(a) * len(a[0])
    total = 0.0
    for s in range(1, scales + 1):
        H, W = len(a), len(a[0])
        acc = 0.0
        for y in range(H):
            for x in range(W):
                if x + 1 < W:
                    acc += abs((a[y][x + 1] - a[y][x]) - (b[y][x + 1] - b[y][x]))
                if y + 1 < H:
                    acc += abs((a[y + 1][x] - a[y][x]) - (b[y + 1][x] - b[y][x]))
        total += 4**s * acc
        a = [row[::2] for row in a[::2]]
        b = [row[::2] for row in b[::2]]
    return total / n


def test_stage1_manual_four_by_four():
    d = [[1.0, 2.0, 4.0, 3.0], [0.5, 1.5, 2.5, 6.0], [2.0, 2.0, 3.0, 1.0], [4.0, 5.0, 0.2, 1.2]]
    p = [[2.0, 1.0, 1.0, 3.0], [0.7, 2.5, 3.5, 4.0], [1.0, 2.2, 2.0, 1.5], [3.0, 3.0, 1.2, 0.4]]
    nd = scalar_normalize(sum(d, []))
    npd = scalar_normalize(sum(p, []))
    data = sum(abs(a - b) for a, b in zip(nd, npd)) / 16
    grid = lambda v: [v[i * 4:(i + 1) * 4] for i in range(4)]  # noqa: E731
    expected = data + 0.3 * scalar_grad_reg(grid(nd), grid(npd))
    assert float(stage1_loss(np.array(d), np.array(p))) == pytest.approx(expected, rel=1e-12)


def test_gradient_reg_cases(rng):
    d = rng.normal(size=(6, 6))
    assert float(gradient_reg(d, d)) == 0.0
    assert float(gradient_reg(d + 3.0, d)) == pytest.approx(0.0, abs=1e-12)
    ramp = np.tile(np.arange(4.0) * 0.7, (4, 1))
    # scale 1: 12 steps of 0.7 weighted 4; scale 2: 2 steps of 1.4 weighted 16; over 16 pixels
    assert float(gradient_reg(ramp, np.zeros((4, 4)))) == pytest.approx(7 * 0.7, rel=1e-12)


@given(st.integers(0, 2**31))
def test_gradient_reg_symmetric_and_matches_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
    ab, ba = float(gradient_reg(a, b)), float(gradient_reg(b, a))
    assert ab == pytest.approx(ba, rel=1e-12)
    assert ab == pytest.approx(scalar_grad_reg(a.tolist(), b.tolist()), rel=1e-10)


def test_silog_cases(rng):
    d = rng.uniform(0.5, 5.0, (6, 6))
    assert float(silog_loss(d, d)) == pytest.approx(0.0, abs=1e-15)
    for c in (0.01, 3.0, 100.0):
        assert float(silog_loss(c * d, d)) == pytest.approx(0.0, abs=1e-12)
    two = float(silog_loss(np.array([2.0, 0.5]), np.array([1.0, 1.0])))
    assert two == pytest.approx(math.log(2) ** 2, rel=1e-12) and round(two, 4) == 0.4805


def test_silog_scale_invariant_on_generic_maps(rng):
    d, t = rng.uniform(0.5, 5.0, (6, 6)), rng.uniform(0.5, 5.0, (6, 6))
    assert float(silog_loss(7.5 * d, t)) == pytest.approx(float(silog_loss(d, t)), rel=1e-9)
    # the half-weighted variant keeps half the squared mean and is not invariant
    half = [float(silog_loss(c * d, t, variance_weight=0.5)) for c in (1.0, 7.5)]
    assert abs(half[0] - half[1]) > 1e-3


def test_silog_rejects_nonpositive():
    with pytest.raises(ValueError, match="positive"):
        silog_loss(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError, match="empty"):
        silog_loss(np.ones(2), np.ones(2), mask=np.zeros(2, dtype=bool))


# -- metrics -------------------------------------------------------------


def test_metrics_identity(rng):
    d = rng.uniform(1, 50, (5, 5))
    m = depth_metrics(d, d)
    assert (m.abs_rel, m.rmse, m.delta1, m.delta2, m.delta3) == (0.0, 0.0, 1.0, 1.0, 1.0)


def test_metrics_thresholds(rng):
    d = rng.uniform(1, 50, (5, 5))
    m = depth_metrics(1.3 * d, d)
    assert m.delta1 == 0.0 and m.delta2 == 1.0


def test_metrics_two_pixel_case():
    m = depth_metrics(np.array([10.0, 20.0]), np.array([12.0, 18.0]))
    assert m.abs_rel == pytest.approx((2 / 12 + 2 / 18) / 2) and round(m.abs_rel, 4) == 0.1389
    assert m.rmse == pytest.approx(2.0)


def test_metrics_cap_and_empty():
    m = depth_metrics(np.array([1.0, 100.0]), np.array([1.0, 90.0]))
    assert m.n_pixels == 1
    with pytest.raises(ValueError):
        depth_metrics(np.ones(2), np.ones(2), mask=np.zeros(2, dtype=bool))
    disp = depth_metrics(np.array([1.0, 5.0]), np.array([1.5, 2.0]), mode="disparity")
    assert disp.one_pe == 0.5 and disp.two_pe == 0.5 and disp.mae == pytest.approx(1.75)


def test_disparity_to_depth():
    depth = disparity_to_depth(np.array([2.0, 0.0]), focal=100.0, baseline=0.5)
    assert depth[0] == 25.0 and np.isnan(depth[1])
    with pytest.raises(ValueError):
        DisparityMap(np.array([1.0]), np.array([True])).to_depth()


# -- stereo --------------------------------------------------------------


def test_uniform_shift_recovered(rng):
    left, right, truth = planted_stereo_pair(rng, 32, 64, 3, shifts=(3, 3))
    dm = block_match_stereo(left, right, max_disp=6, block=7)
    interior = dm.valid[4:-4, 10:-4]
    assert interior.mean() > 0.9
    assert np.all(dm.d[4:-4, 10:-4][interior] == 3)


def test_two_plane_scene(rng):
    left, right, truth = planted_stereo_pair(rng)
    dm = block_match_stereo(left, right, max_disp=8, block=9)
    assert np.mean(dm.d[dm.valid] == truth[dm.valid]) >= 0.95


def test_textureless_field_is_invalid():
    field = np.ones((2, 20, 30))
    assert not block_match_stereo(field, field, max_disp=5).valid.any()


def test_stereo_argument_errors():
    with pytest.raises(ValueError, match="max_disp"):
        block_match_stereo(np.zeros((4, 8)), np.zeros((4, 8)), max_disp=8)
    with pytest.raises(ValueError):
        block_match_stereo(np.zeros((4, 8)), np.zeros((4, 8)), max_disp=2, block=4)
    with pytest.raises(ValueError):
        block_match_stereo(np.zeros((4, 8)), np.zeros((4, 9)), max_disp=2)


def test_disparity_head_trains_on_silog(rng):
    torch.manual_seed(0)
    field = torch.from_numpy(rng.normal(size=(2, 8, 12, 12)))
    target = torch.exp(field[:, 0] * 0.3) + 0.5
    head = DisparityHead(channels=8, hidden=8, kernel=3).double()
    opt = torch.optim.Adam(head.parameters(), lr=1e-2)
    losses = []
    for _ in range(30):
        loss = silog_loss(head(field), target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    assert head(field).min() > 0 and losses[-1] < 0.5 * losses[0]


def test_left_border_matches_beyond_image_are_invalid(rng):
    wide = rng.normal(size=(2, 16, 43))
    dm = block_match_stereo(wide[..., :40], wide[..., 3:], max_disp=6, block=5)
    # columns 0-2 have their true match off the image
    assert not dm.valid[:, :3].any()
    assert np.all(dm.d[dm.valid] == 3)

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from f3.field import FeatureFieldModel, SmootherConfig, count_parameters
from f3.flow import (BINOMIAL5, CharbonnierConfig, FlowNet, FlowTrainConfig, flow_metrics, gaussian_pyramid,
                     photometric_loss, predict_flow, smoothness_reg, tensor_digest, train_flow, warp)
from f3.hashgrid import HashGridConfig
from f3.synth import FlowField, generate_events, translating_texture

EPS = 1e-3


# -- pyramid -------------------------------------------------------------


def test_constant_field_stays_constant():
    x = torch.full((1, 3, 32, 32), 2.5, dtype=torch.float64)
    for level in gaussian_pyramid(x, 4):
        assert torch.allclose(level, torch.full_like(level, 2.5))


def test_pyramid_shapes():
    shapes = [tuple(l.shape[-2:]) for l in gaussian_pyramid(torch.zeros(1, 1, 64, 64), 5)]
    assert shapes == [(64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]


def test_pyramid_stops_below_two_pixels():
    with pytest.warns(UserWarning, match="stopped"):
        levels = gaussian_pyramid(torch.zeros(1, 1, 4, 4), 4)
    assert len(levels) == 2


def test_impulse_second_level_is_pooled_kernel_mass():
    x = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    x[0, 0, 8, 8] = 1.0
    lvl = gaussian_pyramid(x, 2)[1][0, 0]
    # pixels 8 and 9 of each axis fall in cell 4; their kernel weights are 6/16 and 4/16
    k = {0: BINOMIAL5[2], 1: BINOMIAL5[3]}
    expected = sum(k[a] * k[b] for a in (0, 1) for b in (0, 1)) / 4
    assert float(lvl[4, 4]) == pytest.approx(expected, rel=1e-12)
    assert float(lvl.sum()) == pytest.approx(0.25, rel=1e-12)


def test_flow_pyramid_halves_vectors():
    v = torch.ones(1, 2, 16, 16, dtype=torch.float64) * 3.0
    assert torch.allclose(gaussian_pyramid(v, 2, is_flow=True)[1], torch.full((1, 2, 8, 8), 1.5, dtype=torch.float64))


# -- warp ----------------------------------------------------------------


def test_zero_flow_is_identity(rng):
    f = torch.from_numpy(rng.normal(size=(1, 3, 10, 12)))
    out, valid = warp(f, torch.zeros(1, 2, 10, 12, dtype=torch.float64))
    assert torch.allclose(out, f) and valid.all()


def test_integer_shift_matches_translated_copy(rng):
    base = torch.from_numpy(rng.normal(size=(1, 2, 10, 12)))
    shifted = torch.roll(base, shifts=1, dims=-1)  # shifted(x) = base(x - 1)
    flow = torch.zeros(1, 2, 10, 12, dtype=torch.float64)
    flow[:, 0] = 1.0
    out, valid = warp(shifted, flow)  # out(x) = shifted(x + 1) = base(x)
    assert torch.allclose(out[..., :-1], base[..., :-1]) and not valid[..., -1].any()


@given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_fractional_warp_matches_scalar_bilinear(dx, dy):
    rng = np.random.default_rng(0)
    img = rng.normal(size=(6, 7))
    flow = torch.zeros(1, 2, 6, 7, dtype=torch.float64)
    flow[:, 0], flow[:, 1] = dx, dy
    out, valid = warp(torch.from_numpy(img)[None, None], flow)
    for y in range(6):
        for x in range(7):
            px, py = x + dx, y + dy
            if not (0 <= px <= 6 and 0 <= py <= 5):
                assert not valid[0, y, x] and out[0, 0, y, x] == 0
                continue
            x0, y0 = min(int(math.floor(px)), 5), min(int(math.floor(py)), 4)
            fx, fy = px - x0, py - y0
            want = ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x0 + 1]
                    + (1 - fx) * fy * img[y0 + 1, x0] + fx * fy * img[y0 + 1, x0 + 1])
            assert float(out[0, 0, y, x]) == pytest.approx(want, abs=1e-10)


# -- losses --------------------------------------------------------------


def test_zero_residual_gives_charbonnier_floor(rng):
    f = torch.from_numpy(rng.normal(size=(1, 4, 16, 16)))
    loss = photometric_loss(f, f, torch.zeros(1, 2, 16, 16, dtype=torch.float64), levels=2)
    # level 1: 4 * 1 * eps; level 2: 16 * (1/4) * eps
    assert float(loss) == pytest.approx(8 * EPS, rel=1e-9)


def test_photometric_is_scale_invariant(rng):
    a = torch.from_numpy(rng.normal(size=(1, 3, 16, 16)))
    b = torch.from_numpy(rng.normal(size=(1, 3, 16, 16)))
    v = torch.from_numpy(rng.normal(size=(1, 2, 16, 16)))
    assert float(photometric_loss(7 * a, 7 * b, v)) == pytest.approx(float(photometric_loss(a, b, v)), rel=1e-9)


def test_true_flow_beats_zero_flow(rng):
    from scipy.ndimage import gaussian_filter
    base = gaussian_filter(rng.normal(size=(3, 32, 40)), (0, 1.5, 1.5))
    a = torch.from_numpy(base)[None]
    b = torch.roll(a, shifts=2, dims=-1)  # content moves +2 px in x
    truth = torch.zeros(1, 2, 32, 40, dtype=torch.float64)
    truth[:, 0] = 2.0
    assert photometric_loss(a, b, truth) < photometric_loss(a, b, torch.zeros_like(truth))


def test_all_zero_channel_is_skipped(rng):
    a = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))
    a[:, 1] = 0
    loss, skipped = photometric_loss(a, a.clone(), torch.zeros(1, 2, 8, 8, dtype=torch.float64),
                                     levels=2, return_skipped=True)
    assert skipped == [1, 1] and float(loss) == pytest.approx(8 * EPS, rel=1e-9)


def test_constant_flow_smoothness_floor():
    H, W = 8, 10
    v = torch.ones(1, 2, H, W, dtype=torch.float64) * 1.7
    pairs = H * (W - 1) + (H - 1) * W
    assert float(smoothness_reg(v, levels=1)) == pytest.approx(4 * 2 * pairs * EPS / (H * W), rel=1e-9)


def test_linear_flow_smoothness_closed_form():
    H, W, a = 8, 10, 0.3
    v = torch.zeros(1, 2, H, W, dtype=torch.float64)
    v[:, 0] = a * torch.arange(W, dtype=torch.float64)
    horizontal = (math.sqrt(a * a + EPS**2) + EPS) / 2
    total = 2 * (H * (W - 1) * horizontal + (H - 1) * W * EPS)
    assert float(smoothness_reg(v, levels=1)) == pytest.approx(4 * total / (H * W), rel=1e-9)


def test_charbonnier_config_validation():
    with pytest.raises(ValueError):
        CharbonnierConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        CharbonnierConfig(beta=1.5)


# -- network -------------------------------------------------------------


def test_zero_head_predicts_zero_flow(rng):
    net = FlowNet(8).double()
    flow = predict_flow(rng.normal(size=(8, 12, 12)), net)
    assert np.all(flow.v == 0) and flow.v.shape == (2, 12, 12)


def test_default_parameter_count():
    n = count_parameters(FlowNet(32))
    assert abs(n - 28_000) <= 0.2 * 28_000


def test_impulse_support_within_receptive_field():
    net = FlowNet(4).double()
    assert net.receptive_field == 33
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias") or name.endswith("beta"):
                p.zero_()
        net.head.weight.normal_()
    x = torch.zeros(1, 4, 50, 50, dtype=torch.float64)
    x[0, :, 25, 25] = torch.randn(4, dtype=torch.float64)
    out = net(x).detach()[0].abs().sum(0)
    ys, xs = torch.nonzero(out > 0, as_tuple=True)
    assert ys.min() >= 25 - 16 and ys.max() <= 25 + 16 and xs.min() >= 25 - 16 and xs.max() <= 25 + 16


# -- metrics -------------------------------------------------------------


def test_metrics_perfect_prediction(rng):
    gt = FlowField(rng.normal(size=(2, 5, 5)), np.ones((5, 5), dtype=bool))
    m = flow_metrics(gt.v.copy(), gt)
    assert (m.aee, m.three_pe) == (0.0, 0.0) and m.aae == pytest.approx(0.0, abs=1e-5)


def test_metrics_constant_offset(rng):
    gt = rng.normal(size=(2, 5, 5))
    pred = gt.copy()
    pred[0] += 4
    m = flow_metrics(pred, gt)
    assert m.aee == pytest.approx(4.0) and m.three_pe == 1.0


def test_metrics_angular_closed_form():
    pred = np.zeros((2, 1, 1))
    gt = np.zeros((2, 1, 1))
    pred[0], gt[1] = 1.0, 1.0
    m = flow_metrics(pred, gt)
    assert m.aee == pytest.approx(math.sqrt(2)) and m.aae == pytest.approx(60.0)


def test_metrics_masks_and_errors():
    gt = FlowField(np.zeros((2, 2, 2)), np.array([[True, False], [True, True]]))
    pred = np.zeros((2, 2, 2))
    pred[0, 0, 1] = 100.0
    assert flow_metrics(pred, gt).aee == 0.0
    with pytest.raises(ValueError, match="no pixels"):
        flow_metrics(pred, gt, event_mask=np.zeros((2, 2), dtype=bool))
    with pytest.raises(ValueError):
        flow_metrics(np.zeros((2, 3, 3)), gt)


# -- training ------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_setup():
    scene = translating_texture(24, 24, 40_000, (0.25, 0.0), 0.5, seed=0)
    stream = generate_events(scene, 0)
    grid = HashGridConfig(levels=2, table_size=2**10, r_min=(4, 4, 1), r_max=(16, 16, 4), extent=(24, 24, 4))
    model = FeatureFieldModel(grid, SmootherConfig(blocks=1, channels=8, receptive_field=7))
    return stream, model


def test_flow_training_freezes_field(tiny_setup):
    stream, model = tiny_setup
    model.tables.requires_grad_(True)
    before = tensor_digest(model)
    res = train_flow(stream, model, FlowTrainConfig(steps=3, batch=2, lr_start=1e-3, lr_end=1e-4), 4000, 1000,
                     t_refs=np.arange(4000, 20_000, 2000))
    assert tensor_digest(model) == before
    assert all(p.requires_grad for p in model.parameters())
    assert len(res.losses) == 3 and all(np.isfinite(res.losses))
    assert any(p.abs().sum() > 0 for p in res.net.head.parameters())


def test_flow_training_requires_model(tiny_setup):
    with pytest.raises(ValueError, match="checkpoint"):
        train_flow(tiny_setup[0], None, FlowTrainConfig(steps=1), 4000, 1000)


def test_flow_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="alpha"):
        FlowTrainConfig.from_dict({"alpha": 1})

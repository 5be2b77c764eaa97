import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from f3.events import SensorGeometry
from f3.field import SmootherConfig
from f3.hashgrid import HashGridConfig
from f3.synth import generate_events, translating_texture
from f3.train import (GradientError, OptimizerConfig, ParameterStore, PredictorHead, TrainConfig, _focal_terms,
                      backward, event_fraction, focal_loss, focal_loss_probs, linear_lr, optimizer_step,
                      predict_future, train_f3, window_pairs)

# -- head ----------------------------------------------------------------


def test_zero_head_predicts_one_half():
    head = PredictorHead(5, 8).double()
    p = predict_future(torch.randn(8, 6, 7, dtype=torch.float64), head)
    assert p.shape == (5, 6, 7) and torch.all(p == 0.5)


def test_large_negative_bias_saturates_to_zero():
    head = PredictorHead(3, 4).double()
    with torch.no_grad():
        head.bias.fill_(-50.0)
    assert predict_future(torch.randn(4, 5, 5, dtype=torch.float64), head).max() < 1e-20


def test_head_matches_scalar_loop(rng):
    head = PredictorHead(3, 4).double()
    with torch.no_grad():
        head.weight.normal_()
        head.bias.normal_()
    field = rng.normal(size=(4, 3, 5))
    p = predict_future(torch.from_numpy(field), head).detach().numpy()
    w, b = head.weight.detach().numpy(), head.bias.detach().numpy()
    for s in range(3):
        for y in range(3):
            for x in range(5):
                z = sum(w[s, c] * field[c, y, x] for c in range(4)) + b[s]
                assert p[s, y, x] == pytest.approx(1 / (1 + math.exp(-z)), rel=1e-12)


def test_head_channel_mismatch():
    with pytest.raises(ValueError):
        predict_future(torch.zeros(3, 4, 4), PredictorHead(2, 5))


# -- focal loss ----------------------------------------------------------


def test_focal_gamma_zero_is_half_bce(rng):
    z = torch.from_numpy(rng.normal(size=200) * 3)
    e = torch.from_numpy((rng.random(200) < 0.3).astype(np.float64))
    bce = torch.nn.functional.binary_cross_entropy_with_logits(z, e, reduction="sum")
    assert float(focal_loss(z, e, 0.5, 0.0)) == pytest.approx(0.5 * float(bce), rel=1e-12)


def test_focal_closed_form_value():
    mpmath.mp.dps = 30
    oracle = float(-mpmath.mpf("0.9") * mpmath.mpf("0.5") ** 2 * mpmath.log(mpmath.mpf("0.5")))
    got = float(focal_loss(torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64), 0.9, 2.0))
    assert got == pytest.approx(oracle, rel=1e-12) and round(got, 5) == 0.15596


def test_focal_confident_correct_prediction_vanishes():
    vals = [float(focal_loss(torch.tensor([z], dtype=torch.float64), torch.ones(1, dtype=torch.float64), 0.5))
            for z in (2.0, 6.0, 12.0, 30.0)]
    assert all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-30


def test_focal_probability_form_agrees(rng):
    z = rng.normal(size=50) * 2
    e = (rng.random(50) < 0.5).astype(float)
    per = focal_loss(torch.from_numpy(z), torch.from_numpy(e), 0.3, 2.0, reduction="none").numpy()
    assert np.allclose(per, focal_loss_probs(1 / (1 + np.exp(-z)), e, 0.3, 2.0), rtol=1e-10)


def test_focal_rejects_non_binary_targets():
    with pytest.raises(ValueError):
        focal_loss(torch.zeros(3), torch.tensor([0.0, 0.5, 1.0]))


@given(st.floats(0.05, 0.95), st.floats(0.0, 4.0), st.integers(0, 2**31))
def test_focal_analytic_gradient_matches_autograd(alpha, gamma, seed):
    g = torch.Generator().manual_seed(seed)
    z = (torch.randn(30, generator=g, dtype=torch.float64) * 4).requires_grad_(True)
    e = (torch.rand(30, generator=g, dtype=torch.float64) < 0.4).double()
    (analytic,) = torch.autograd.grad(focal_loss(z, e, alpha, gamma), z)
    (auto,) = torch.autograd.grad(_focal_terms(z, e, alpha, gamma)[0].sum(), z)
    assert torch.allclose(analytic, auto, rtol=1e-9, atol=1e-12)


def test_alpha_defaults_to_event_fraction():
    e = torch.zeros(100, dtype=torch.float64)
    e[:7] = 1
    z = torch.randn(100, dtype=torch.float64)
    assert event_fraction(e) == pytest.approx(0.07)
    assert torch.allclose(focal_loss(z, e), focal_loss(z, e, 0.07), rtol=1e-7)
    assert 0 < event_fraction(torch.zeros(10)) < 1e-5


# -- backward ------------------------------------------------------------


def test_backward_linearity_and_unused_parameter():
    a = torch.randn(5, dtype=torch.float64, requires_grad=True)
    b = torch.randn(5, dtype=torch.float64, requires_grad=True)
    unused = torch.randn(2, dtype=torch.float64, requires_grad=True)
    params = {"a": a, "b": b, "unused": unused}
    l1 = lambda: (a * b).sum()  # noqa: E731
    l2 = lambda: a.pow(3).sum()  # noqa: E731
    g1, g2, g12 = backward(l1(), params), backward(l2(), params), backward(l1() + l2(), params)
    for k in params:
        assert torch.allclose(g12[k], g1[k] + g2[k])
    assert torch.all(g12["unused"] == 0)


def test_backward_diagnostics():
    a = torch.ones(3, requires_grad=True)
    with pytest.raises(GradientError, match="detached"):
        backward(a.detach().sum(), {"a": a})
    with pytest.raises(GradientError, match="non-finite loss"):
        backward((a * float("nan")).sum(), {"a": a})
    with pytest.raises(GradientError, match="'a'"):
        backward(torch.sqrt(a - 1).sum(), {"a": a})


# -- optimizer -----------------------------------------------------------


def test_single_step_closed_form():
    p = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    g = torch.tensor([0.3, -0.1, 0.0], dtype=torch.float64)
    store = ParameterStore({"w": p.clone()})
    cfg = OptimizerConfig(weight_decay=0.01)
    optimizer_step(store, {"w": g}, 1e-2, cfg)
    expected = p * (1 - 1e-2 * 0.01) - 1e-2 * g / (g.abs() + cfg.eps)
    assert torch.allclose(store.params["w"], expected, rtol=0, atol=1e-15)


def test_zero_gradient_zero_decay_is_noop():
    p = torch.randn(4, 3, dtype=torch.float64)
    store = ParameterStore({"w": p.clone()})
    for _ in range(3):
        optimizer_step(store, {"w": torch.zeros_like(p)}, 1e-3, OptimizerConfig(weight_decay=0.0))
    assert torch.equal(store.params["w"], p)


def test_lr_zero_decay_coupling():
    p = torch.ones(3, dtype=torch.float64)
    coupled = ParameterStore({"w": p.clone()})
    optimizer_step(coupled, {"w": torch.ones(3, dtype=torch.float64)}, 0.0, OptimizerConfig(weight_decay=0.1))
    assert torch.equal(coupled.params["w"], p)
    decoupled = ParameterStore({"w": p.clone()})
    cfg = OptimizerConfig(weight_decay=0.1, decay_scaled_by_lr=False)
    optimizer_step(decoupled, {"w": torch.ones(3, dtype=torch.float64)}, 0.0, cfg)
    assert torch.allclose(decoupled.params["w"], p * 0.9)


def test_untouched_hash_rows_bit_identical():
    tables = torch.randn(2, 16, 2, dtype=torch.float64)
    store = ParameterStore({"t": tables.clone()}, sparse=["t"])
    grad = torch.randn_like(tables)
    touched = torch.tensor([3, 16 + 5])
    optimizer_step(store, {"t": grad}, 1e-2, OptimizerConfig(), rows={"t": touched})
    flat_new, flat_old = store.params["t"].view(-1, 2), tables.view(-1, 2)
    mask = torch.ones(32, dtype=torch.bool)
    mask[touched] = False
    assert torch.equal(flat_new[mask], flat_old[mask])
    assert not torch.equal(flat_new[touched], flat_old[touched])
    assert torch.all(store.m["t"].view(-1, 2)[mask] == 0)


def test_gradient_shape_checked():
    store = ParameterStore({"w": torch.zeros(3)})
    with pytest.raises(ValueError, match="w"):
        optimizer_step(store, {"w": torch.zeros(4)}, 1e-3, OptimizerConfig())


def test_linear_schedule_endpoints():
    assert linear_lr(0, 2000, 5e-5, 5e-6) == 5e-5
    assert linear_lr(1999, 2000, 5e-5, 5e-6) == pytest.approx(5e-6)
    assert linear_lr(1000, 2001, 1.0, 0.0) == pytest.approx(0.5)


# -- training loop -------------------------------------------------------


def tiny_config(**kw):
    base = dict(dt_us=4000, bin_us=1000, grid=HashGridConfig(levels=2, table_size=2**10, r_min=(4, 4, 1),
                                                               r_max=(16, 16, 4)),
                smoother=SmootherConfig(blocks=1, kernel=7, channels=8, receptive_field=7),
                steps=40, batch=2, lr_start=1e-2, lr_end=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_stream():
    scene = translating_texture(24, 24, 60_000, (0.25, 0.0), 0.5, seed=0, noise_fraction=0.0)
    return generate_events(scene, 0)


def test_initial_loss_closed_form(tiny_stream):
    res = train_f3(tiny_stream, tiny_config(steps=1))
    f = res.alphas[0]
    # zero head: every voxel predicts 0.5, so the mean loss is 0.25*ln2 * (f*f + (1-f)*(1-f))
    assert res.losses[0] == pytest.approx(0.25 * math.log(2) * (f * f + (1 - f) ** 2), rel=1e-5)


def test_training_is_deterministic_and_learns(tiny_stream):
    a = train_f3(tiny_stream, tiny_config())
    b = train_f3(tiny_stream, tiny_config())
    assert a.losses == b.losses
    assert np.mean(a.losses[-5:]) < 0.8 * np.mean(a.losses[:5])
    assert all(0 < x < 1 for x in a.alphas)


def test_empty_dataset_rejected():
    scene = translating_texture(16, 16, 5000, (0.0, 0.0), 0.5, seed=0)
    with pytest.raises(ValueError, match="too short"):
        train_f3(generate_events(scene, 0), tiny_config())


def test_window_pairs_have_full_windows(tiny_stream):
    t = window_pairs(tiny_stream, 4000, 1000)
    assert t[0] == 4000 and t[-1] + 4000 <= tiny_stream.duration_us and np.all(t % 1000 == 0)


def test_config_round_trip_and_unknown_keys():
    cfg = tiny_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        TrainConfig(dt_us=4500, bin_us=1000)

"""Primary acceptance criteria, one test each, sharing one suite context.

Criterion 8 trains the feature field and flow net once (several minutes on
one core); criterion 9 and the loss-curve check reuse that model. Criterion
12 runs last so that its full-suite clause sees criteria 1-11.
"""
import numpy as np
import pytest

from f3.acceptance import CRITERIA, SuiteContext, run_criterion


@pytest.fixture(scope="module")
def ctx(tmp_path_factory):
    return SuiteContext(out_dir=tmp_path_factory.mktemp("acceptance"))


def check(ctx, number, capsys):
    res = run_criterion(number, ctx)
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, f"criterion {number} ({CRITERIA[number][0]}) failed: {res.details}"


def test_criterion_01_permutation_invariance(ctx, capsys):
    check(ctx, 1, capsys)


def test_criterion_02_hash_grid(ctx, capsys):
    check(ctx, 2, capsys)


def test_criterion_03_gradients(ctx, capsys):
    check(ctx, 3, capsys)


def test_criterion_04_focal_reductions(ctx, capsys):
    check(ctx, 4, capsys)


def test_criterion_05_weighted_threshold(ctx, capsys):
    check(ctx, 5, capsys)


def test_criterion_06_donoho(ctx, capsys):
    check(ctx, 6, capsys)


def test_criterion_07_joint_dominance(ctx, capsys):
    check(ctx, 7, capsys)


def test_criterion_08_end_to_end_flow(ctx, capsys):
    check(ctx, 8, capsys)


def test_f3_training_halves_focal_loss(ctx):
    losses = ctx.artifacts.f3_losses if ctx.artifacts else []
    assert len(losses) == ctx.e2e.f3_steps
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:5])


def test_criterion_09_subsampling(ctx, capsys):
    check(ctx, 9, capsys)


def test_criterion_10_depth(ctx, capsys):
    check(ctx, 10, capsys)


def test_criterion_11_motion_field(ctx, capsys):
    check(ctx, 11, capsys)


def test_criterion_12_formats_and_cli(ctx, capsys):
    check(ctx, 12, capsys)

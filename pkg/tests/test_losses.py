import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from panoptic_fcn.losses import (
    DICE_EPS, InstanceGroup, dice_loss, score_weights, total_objective, weighted_dice,
    weighted_dice_loss,
)


def dice_oracle(p, y, ignore=None):
    keep = np.ones_like(p, bool) if ignore is None else ~ignore
    p, y = p[keep], y[keep]
    return 1 - (2 * (p * y).sum() + DICE_EPS) / ((p * p).sum() + (y * y).sum() + DICE_EPS)


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_dice_perfect_and_empty_prediction():
    y = np.zeros((4, 4))
    y[1:3, 1:3] = 1
    loss, valid = dice_loss(t(y), t(y))
    assert loss.item() <= 1e-4 and valid.item()
    loss, _ = dice_loss(t(np.zeros((4, 4))), t(y))
    assert loss.item() >= 1 - DICE_EPS


def test_dice_half_coverage_is_one_third():
    y = np.zeros((4, 4))
    y[0, :] = 1
    y[1, :] = 1  # |Y| = 8
    p = np.zeros((4, 4))
    p[0, :] = 1  # half of Y, nothing else
    loss, _ = dice_loss(t(p), t(y))
    assert abs(loss.item() - 1 / 3) <= 1e-3


def test_dice_all_ignored_is_skipped():
    loss, valid = dice_loss(t(np.ones((3, 3))), t(np.ones((3, 3))), torch.ones(3, 3, dtype=torch.bool))
    assert loss.item() == 0.0 and not valid.item()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_dice_matches_oracle_and_range(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((6, 5))
    y = (rng.random((6, 5)) > 0.5).astype(float)
    ign = rng.random((6, 5)) > 0.7
    loss, _ = dice_loss(t(p), t(y), torch.from_numpy(ign))
    assert abs(loss.item() - dice_oracle(p, y, ign)) <= 1e-12
    assert -1e-4 <= loss.item() <= 1 + 1e-4


def test_weights_and_weighted_dice():
    w = score_weights(t([0.9, 0.1]))
    np.testing.assert_allclose(w.numpy(), [0.9, 0.1])
    assert torch.allclose(score_weights(t([0.0, 0.0, 0.0])), t([1 / 3] * 3))
    s = t([0.9, 0.1]).requires_grad_()
    assert not score_weights(s).requires_grad


def test_weighted_dice_reference_values():
    # constructed so the two dice values are exactly 0.2 and 0.8 (eps aside)
    y = np.zeros((1, 10))
    y[0, :5] = 1
    a = np.zeros((1, 10))
    a[0, :4] = 1  # dice = 8/9 -> loss 1/9; build direct instead
    preds = t(np.stack([a, a]))
    d = dice_loss(preds, t(np.stack([y, y])))[0].numpy()
    got = weighted_dice(preds, t([0.9, 0.1]), t(y)).item()
    assert abs(got - (0.9 * d[0] + 0.1 * d[1])) <= 1e-12


    vals = np.array([0.2, 0.8])
    assert abs(float(score_weights(t([0.9, 0.1])).numpy() @ vals) - 0.26) <= 1e-12


def test_k1_and_uniform_reduce_to_plain_dice():
    rng = np.random.default_rng(0)
    p = rng.random((3, 5, 5))
    y = (rng.random((5, 5)) > 0.4).astype(float)
    single = weighted_dice(t(p[:1]), t([0.7]), t(y)).item()
    assert abs(single - dice_oracle(p[0], y)) <= 1e-12
    uniform = weighted_dice(t(p), t([0.4, 0.4, 0.4]), t(y)).item()
    assert abs(uniform - np.mean([dice_oracle(q, y) for q in p])) <= 1e-12


def test_weighted_dice_loss_averages_over_instances():
    rng = np.random.default_rng(1)
    groups = [InstanceGroup(t(rng.random((k, 4, 4))), t(rng.random(k)), t(rng.random((4, 4)) > 0.5))
              for k in (3, 1, 2)]
    expected = sum(weighted_dice(g.preds, g.scores, g.target).item() for g in groups) / 3
    assert abs(weighted_dice_loss(groups).item() - expected) <= 1e-12
    assert weighted_dice_loss([]).item() == 0.0


def test_moving_toward_target_decreases_loss():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = rng.random((2, 6, 6))
        y = (rng.random((6, 6)) > 0.5).astype(float)
        g = InstanceGroup(t(p), t(rng.random(2)), t(y))
        closer = InstanceGroup(t(p + 0.1 * (y - p)), g.scores, g.target)
        assert weighted_dice_loss([closer]).item() < weighted_dice_loss([g]).item()


def test_total_objective():
    assert total_objective(0.5, 0.2) == pytest.approx(1.1)
    assert total_objective(0.5, 0.2, lambda_seg=0) == 0.5
    with pytest.raises(ValueError):
        total_objective(1, 1, -1, 3)

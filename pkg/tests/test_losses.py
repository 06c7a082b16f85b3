import math

import numpy as np
import pytest

from dsdkit import losses
from dsdkit.errors import ConfigError, NumericError

from conftest import FD_TOL
from gradcases import CASES


def sym3():
    """Three unit class weights at 0, 120 and 240 degrees in the plane."""
    ang = np.deg2rad([0.0, 120.0, 240.0])
    return np.stack([np.cos(ang), np.sin(ang)])


# --- angular margin -------------------------------------------------------------

@pytest.mark.parametrize("r", [0.5, 1.0, 3.0])
def test_asoftmax_aligned_hand_value(r):
    x = np.array([[r, 0.0]])
    loss, _, _ = losses.asoftmax_loss(x, sym3(), [0], m=2)
    assert loss == pytest.approx(math.log(1 + 2 * math.exp(-1.5 * r)), rel=1e-12)


def test_asoftmax_second_interval():
    r = 2.0
    th = np.deg2rad(100.0)
    x = np.array([[r * np.cos(th), r * np.sin(th)]])
    loss, _, _ = losses.asoftmax_loss(x, sym3(), [0], m=2)
    psi = -math.cos(math.radians(200.0)) - 2.0
    logits = [r * psi, r * math.cos(math.radians(20.0)), r * math.cos(math.radians(140.0))]
    expect = math.log(sum(math.exp(v) for v in logits)) - logits[0]
    assert loss == pytest.approx(expect, rel=1e-12)


def test_asoftmax_m1_is_normalised_softmax():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))
    y = rng.integers(0, 3, 5)
    logits = x @ (w / np.linalg.norm(w, axis=0))
    ref = np.mean(np.log(np.exp(logits).sum(1)) - logits[np.arange(5), y])
    assert losses.asoftmax_loss(x, w, y, m=1)[0] == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_psi_monotone_and_continuous(m):
    theta = np.linspace(0, np.pi, 2001)
    p, _ = losses.psi(np.cos(theta), m)
    assert np.all(np.diff(p) < 1e-12)
    assert p[0] == pytest.approx(1.0)
    assert p[-1] == pytest.approx(1.0 - 2.0 * m)


@pytest.mark.parametrize("m", [1, 2, 3, 5])
def test_chebyshev_matches_cosine(m):
    theta = np.linspace(0.01, np.pi - 0.01, 50)
    t, dt = losses.chebyshev_t(m, np.cos(theta))
    assert np.allclose(t, np.cos(m * theta), atol=1e-12)
    # d cos(m theta) / d cos(theta) = m sin(m theta) / sin(theta)
    assert np.allclose(dt, m * np.sin(m * theta) / np.sin(theta), atol=1e-9)


def test_asoftmax_margin_increases_loss():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20, 4))
    w = rng.normal(size=(4, 3))
    y = rng.integers(0, 3, 20)
    l1 = losses.asoftmax_loss(x, w, y, 1)[0]
    l2 = losses.asoftmax_loss(x, w, y, 2)[0]
    assert l2 >= l1


def test_asoftmax_zero_norm():
    with pytest.raises(NumericError):
        losses.asoftmax_loss(np.zeros((1, 2)), sym3(), [0])


# --- contrastive ------------------------------------------------------------------

def test_contrastive_hand_values():
    a = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    b = np.array([[0.3, 0.4], [0.3, 0.4], [3.0, 4.0]])
    loss, _, _ = losses.contrastive_loss(a, b, [True, False, False], margin=1.0)
    # 0.5*0.25 ; 0.5*(1-0.5)^2 ; beyond margin
    assert loss == pytest.approx((0.125 + 0.125 + 0.0) / 3, rel=1e-12)


def test_contrastive_symmetric():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 6, 3))
    same = rng.random(6) < 0.5
    l1, ga, gb = losses.contrastive_loss(a, b, same)
    l2, gb2, ga2 = losses.contrastive_loss(b, a, same)
    assert l1 == l2
    assert np.array_equal(ga, ga2) and np.array_equal(gb, gb2)


def test_contrastive_cross_pair_at_zero_distance():
    loss, ga, gb = losses.contrastive_loss(np.ones((1, 2)), np.ones((1, 2)), [False])
    assert loss == 0.5
    assert not ga.any() and not gb.any()


def test_make_pairs_structure():
    rng = np.random.default_rng(0)
    is_fake = np.array([0, 0, 0, 1, 1], bool)
    i, j, same = losses.make_pairs(is_fake, rng)
    cross = {(a, b) for a, b, s in zip(i, j, same) if not s}
    assert cross == {(a, b) for a in range(3) for b in (3, 4)}
    assert same.sum() == min(6, 3 + 1)
    for a, b, s in zip(i, j, same):
        assert (is_fake[a] == is_fake[b]) == s


def test_make_pairs_cap():
    rng = np.random.default_rng(0)
    is_fake = np.arange(64) % 2 == 1
    i, _, _ = losses.make_pairs(is_fake, rng, cap=4 * 64)
    assert len(i) <= 4 * 64


# --- centre -------------------------------------------------------------------------

def test_center_ignores_fakes():
    x = np.array([[1.0, 0.0], [100.0, 100.0]])
    loss, g, _ = losses.center_loss(x, [0, 1], np.zeros(2))
    assert loss == 0.5
    assert not g[1].any()


def test_center_update_rule():
    x = np.array([[2.0, 0.0], [4.0, 2.0]])
    c = np.zeros(2)
    _, _, new = losses.center_loss(x, [0, 0], c, rate=0.5)
    assert new.tolist() == [1.5, 0.5]
    assert c.tolist() == [0.0, 0.0]


def test_center_no_bonafide():
    loss, g, new = losses.center_loss(np.ones((2, 2)), [1, 2], np.zeros(2))
    assert loss == 0.0 and not g.any() and not new.any()


# --- BCE ------------------------------------------------------------------------------

def test_bce_values():
    loss, _ = losses.bce_loss([0.9, 0.2], [1, 0])
    assert loss == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, rel=1e-12)


def test_bce_clamped_finite():
    loss, g = losses.bce_loss([0.0, 1.0], [1, 0])
    hi = 1.0 - 1e-12
    assert loss == pytest.approx(-(math.log(1e-12) + math.log(1.0 - hi)) / 2, rel=1e-12)
    assert not g.any()


def test_bce_rejects_labels():
    with pytest.raises(ValueError):
        losses.bce_loss([0.5], [2])


def test_bce_logits_match_probabilities():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(10, 2))
    y = rng.integers(0, 2, 10)
    p = np.exp(z[:, 1]) / np.exp(z).sum(1)
    assert losses.bce_with_logits(z, y)[0] == pytest.approx(losses.bce_loss(p, y)[0], rel=1e-12)


# --- combined --------------------------------------------------------------------------

def test_stage1_is_weighted_sum():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(8, 4))
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    w = rng.normal(size=(4, 3))
    c = np.zeros(4)
    cfg = losses.LossConfig(weight_asoftmax=2.0, weight_contrastive=0.25, weight_center=3.0)
    pairs = losses.make_pairs(y != 0, rng)
    res = losses.stage1_combined(x, y, cfg, c, w, pairs=pairs)
    parts = res.parts
    assert res.loss == pytest.approx(2.0 * parts["asoftmax"] + 0.25 * parts["contrastive"] + 3.0 * parts["center"])
    assert parts["asoftmax"] == losses.asoftmax_loss(x, w, y, 2)[0]
    assert parts["center"] == losses.center_loss(x, y, c)[0]


@pytest.mark.parametrize("kw", [
    {"asoftmax_margin": 0}, {"contrastive_margin": 0.0}, {"center_rate": 0.0},
    {"weight_asoftmax": 0, "weight_contrastive": 0, "weight_center": 0}, {"weight_center": -1},
])
def test_loss_config_validation(kw):
    with pytest.raises(ConfigError):
        losses.LossConfig(**kw)


# --- finite differences ------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", range(20))
def test_gradients_finite_difference(name, seed):
    assert CASES[name](seed) < FD_TOL

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check
from vcaseg.errors import ConfigError, ShapeError
from vcaseg.losses import LossConfig, bce, combined_loss, dice_log_loss, focal_loss, soft_dice


def focal_oracle(p, y, alpha, gamma):
    total = 0.0
    for pi, yi in zip(np.ravel(p), np.ravel(y)):
        pt = pi if yi == 1 else 1 - pi
        at = alpha if yi == 1 else 1 - alpha
        total += -at * (1 - pt) ** gamma * math.log(pt)
    return total / np.size(p)


def bce_oracle(p, y):
    terms = [-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for pi, yi in zip(np.ravel(p), np.ravel(y))]
    return sum(terms) / len(terms)


class TestFocal:
    def test_single_pixel_value(self):
        v = focal_loss(np.array([0.5]), np.array([1.0]), LossConfig(alpha=0.25, gamma=2))
        assert v == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-12)
        assert v == pytest.approx(0.0433217, abs=5e-8)

    def test_perfect_prediction(self):
        y = np.array([1.0, 0.0, 1.0])
        assert focal_loss(y, y) == pytest.approx(0.0, abs=1e-12)

    def test_gamma_zero_is_half_bce(self, rng):
        p, y = rng.uniform(0.05, 0.95, 20), (rng.random(20) < 0.5) * 1.0
        cfg = LossConfig(alpha=0.5, gamma=0)
        assert focal_loss(p, y, cfg) == pytest.approx(0.5 * bce(p, y), rel=1e-12)

    def test_matches_oracle(self, rng):
        p, y = rng.uniform(0.01, 0.99, (3, 5)), (rng.random((3, 5)) < 0.4) * 1.0
        assert focal_loss(p, y, LossConfig(0.3, 1.5)) == pytest.approx(focal_oracle(p, y, 0.3, 1.5), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            focal_loss(np.zeros(3), np.zeros(4))


class TestSoftDice:
    def test_hand_value(self):
        assert soft_dice(np.array([0.8, 0.2]), np.array([1.0, 0.0]), eps_dice=0) == pytest.approx(0.8)

    def test_perfect(self):
        y = np.array([1.0, 0.0, 1.0, 1.0])
        assert soft_dice(y, y) == 1.0

    def test_empty_empty(self):
        assert soft_dice(np.zeros(5), np.zeros(5)) == 1.0


class TestDiceLog:
    def test_half(self):
        p, y = np.array([0.5, 0.5]), np.array([1.0, 0.0])
        cfg = LossConfig(eps_dice=1e-300)
        assert soft_dice(p, y, cfg.eps_dice) == pytest.approx(0.5)
        assert dice_log_loss(p, y, cfg) == pytest.approx(math.log(0.5))
        assert dice_log_loss(p, y, cfg) == pytest.approx(-0.6931, abs=5e-5)

    def test_clamp(self):
        y = np.array([1.0, 1.0, 0.0])
        assert dice_log_loss(y, y) == pytest.approx(math.log(1e-7))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_dice_log_decreasing_in_dsc(seed):
    r = np.random.default_rng(seed)
    y = (r.random(16) < 0.5) * 1.0
    p1, p2 = r.random(16), r.random(16)
    d1, d2 = soft_dice(p1, y), soft_dice(p2, y)
    if abs(d1 - d2) < 1e-9:
        return
    l1, l2 = dice_log_loss(p1, y), dice_log_loss(p2, y)
    assert (l1 < l2) == (d1 > d2)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_soft_dice_symmetric_for_binary(seed):
    r = np.random.default_rng(seed)
    a, b = (r.random(12) < 0.5) * 1.0, (r.random(12) < 0.5) * 1.0
    assert soft_dice(a, b) == soft_dice(b, a)


class TestBce:
    def test_half_everywhere(self, rng):
        y = (rng.random(30) < 0.5) * 1.0
        assert bce(np.full(30, 0.5), y) == pytest.approx(math.log(2))

    def test_single_pixel(self):
        assert bce(np.array([0.25]), np.array([1.0])) == pytest.approx(math.log(4))
        assert bce(np.array([0.25]), np.array([1.0])) == pytest.approx(1.3863, abs=5e-5)

    def test_perfect(self):
        y = np.array([0.0, 1.0])
        assert bce(y, y) == pytest.approx(0.0, abs=1e-6)

    def test_matches_oracle(self, rng):
        p, y = rng.uniform(0.01, 0.99, 25), (rng.random(25) < 0.5) * 1.0
        assert bce(p, y) == pytest.approx(bce_oracle(p, y), rel=1e-12)


class TestCombined:
    def test_perfect_prediction(self):
        y = (np.arange(16).reshape(4, 4) % 3 == 0) * 1.0
        br, g = combined_loss(y, y)
        assert br.focal == pytest.approx(0, abs=1e-10)
        assert br.bce == pytest.approx(0, abs=1e-6)
        assert br.dice_log == pytest.approx(math.log(1e-7))
        assert np.isfinite(br.total) and np.isfinite(g).all()

    def test_additive(self, rng):
        p, y = rng.random((2, 1, 4, 4)), (rng.random((2, 1, 4, 4)) < 0.3) * 1.0
        br, _ = combined_loss(p, y)
        assert br.total == br.focal + br.dice_log + br.bce
        assert br.focal == focal_loss(p, y)
        assert br.dice_log == dice_log_loss(p, y)
        assert br.bce == bce(p, y)
        assert br.n_pixels == 32

    def test_gradient_dtype_follows_input(self, rng):
        p = rng.random((1, 1, 4, 4)).astype(np.float32)
        _, g = combined_loss(p, (p > 0.5) * 1.0)
        assert g.dtype == np.float32

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_finite_difference(self, seed):
        r = np.random.default_rng(seed)
        p = r.uniform(0.05, 0.95, (4, 4))
        y = (r.random((4, 4)) < 0.4) * 1.0
        _, g = combined_loss(p, y)
        f = lambda: combined_loss(p, y)[0].total  # noqa: E731
        assert check(f, p, g, n_coords=10, rng=r) < 1e-4

    @pytest.mark.parametrize("kw", [dict(alpha=0), dict(alpha=1), dict(gamma=-1), dict(gamma=float("inf")),
                                    dict(eps_dice=0), dict(eps_log=-1)])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigError):
            LossConfig(**kw).validate()


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 100_000), extreme=st.booleans())
def test_all_terms_finite_and_signed(seed, extreme):
    r = np.random.default_rng(seed)
    p = r.random(20)
    if extreme:
        p = np.round(p)
    y = (r.random(20) < 0.5) * 1.0
    br, g = combined_loss(p, y)
    assert np.isfinite([br.focal, br.dice_log, br.bce, br.total]).all()
    assert np.isfinite(g).all()
    assert br.focal >= 0 and br.bce >= 0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), g1=st.floats(0, 5), g2=st.floats(0, 5))
def test_focal_non_increasing_in_gamma(seed, g1, g2):
    r = np.random.default_rng(seed)
    p, y = r.uniform(0.01, 0.99, 10), (r.random(10) < 0.5) * 1.0
    lo, hi = min(g1, g2), max(g1, g2)
    assert focal_loss(p, y, LossConfig(gamma=hi)) <= focal_loss(p, y, LossConfig(gamma=lo)) + 1e-15

"""Tests for the pseudo-Huber, perceptual and combined training losses."""

import numpy as np
import pytest

from src.metrics.losses import (
    LossConfig, combined_loss, loss_terms, perceptual_distance, pseudo_huber, pyramid_kernels,
)
from src.tensor.gradcheck import check_gradients
from src.tensor.tensor import Tensor
from src.utils.errors import ConfigurationError, ShapeError


@pytest.fixture
def pair(rng):
    y = rng.random((1, 1, 16, 16))
    return y, np.clip(y + 0.05 * rng.standard_normal(y.shape), 0.0, 1.0)


class TestPseudoHuber:

    def test_zero_for_identical_images(self, pair):
        y, _ = pair
        assert pseudo_huber(y, y).item() == 0.0

    def test_rms_residual(self):
        y = np.zeros((1, 1, 4, 4))
        value = pseudo_huber(y, y + 0.1, c=0.03).item()
        assert value == pytest.approx(np.sqrt(0.01 + 0.03 ** 2) - 0.03)

    def test_summed_residual(self):
        y = np.zeros((1, 1, 4, 4))
        value = pseudo_huber(y, y + 0.1, c=0.03, normalize=False).item()
        assert value == pytest.approx(np.sqrt(16 * 0.01 + 0.03 ** 2) - 0.03)

    def test_grows_with_the_residual(self):
        y = np.zeros((1, 1, 4, 4))
        values = [pseudo_huber(y, y + r).item() for r in (0.01, 0.1, 1.0)]
        assert values == sorted(values)

    def test_c_must_be_positive(self, pair):
        with pytest.raises(ConfigurationError):
            pseudo_huber(*pair, c=0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            pseudo_huber(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


class TestPerceptualDistance:

    def test_zero_for_identical_images(self, pair):
        y, _ = pair
        assert perceptual_distance(y, y).item() == pytest.approx(0.0, abs=1e-15)

    def test_symmetric(self, pair):
        y, x = pair
        assert perceptual_distance(y, x).item() == pytest.approx(perceptual_distance(x, y).item())

    def test_more_noise_is_further(self, pair, rng):
        y, _ = pair
        mild = y + 0.01 * rng.standard_normal(y.shape)
        strong = y + 0.2 * rng.standard_normal(y.shape)
        assert perceptual_distance(y, mild).item() < perceptual_distance(y, strong).item()

    def test_kernels_are_fixed_and_zero_mean(self):
        first = pyramid_kernels()
        assert first is pyramid_kernels()
        for w in first:
            np.testing.assert_allclose(w.mean(axis=(1, 2, 3)), 0.0, atol=1e-15)

    def test_single_channel_only(self):
        with pytest.raises(ShapeError):
            perceptual_distance(np.zeros((1, 2, 8, 8)), np.zeros((1, 2, 8, 8)))


class TestCombinedLoss:

    def test_weighted_sum(self, pair):
        cfg = LossConfig(alpha=0.8, beta=0.2, c=0.03)
        terms = loss_terms(*pair, cfg)
        total, phuber, perceptual = terms.values()
        assert total == pytest.approx(0.8 * phuber + 0.2 * perceptual)

    def test_phuber_mode_drops_the_perceptual_term(self, pair):
        total, phuber, perceptual = loss_terms(*pair, LossConfig(mode="phuber")).values()
        assert perceptual == 0.0
        assert total == pytest.approx(0.8 * phuber)

    def test_lpips_mode_drops_the_huber_term(self, pair):
        total, _, perceptual = loss_terms(*pair, LossConfig(mode="lpips")).values()
        assert total == pytest.approx(0.2 * perceptual)

    def test_gradient_with_respect_to_prediction(self, pair):
        y, x = pair
        report = check_gradients(lambda t: combined_loss(Tensor(y), t, LossConfig()), x)
        assert report.max_error < 1e-5

    @pytest.mark.parametrize("kwargs", [
        {"mode": "l1"}, {"alpha": -1.0}, {"alpha": 0.0, "beta": 0.0}, {"mode": "phuber", "alpha": 0.0},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            LossConfig(**kwargs)

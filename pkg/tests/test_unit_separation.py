"""
Unit tests for the KL separation head
"""

import numpy as np
import pytest

from data.synthetic import make_synthetic
from modules.autoencoder import AutoencoderConfig, train_autoencoder
from modules.embedding import extract_embeddings
from modules.errors import ShapeError
from modules.nncore import loss_kl
from modules.probe import ProbeConfig, train_probe
from modules.separation import SeparationConfig, build_head, class_marginal, separation_loss


class TestSeparationConfig:
    """Test the separation configuration."""

    def test_enabled_only_for_positive_beta(self):
        """Test that beta 0 disables the separation term."""
        assert SeparationConfig(beta=0.5).enabled
        assert not SeparationConfig(beta=0.0).enabled

    def test_rejects_negative_beta(self):
        """Test that negative weights are rejected."""
        with pytest.raises(ValueError):
            SeparationConfig(beta=-0.1)


class TestClassMarginal:
    """Test the label marginal target."""

    def test_marginal(self):
        """Test the [P(Y=0), P(Y=1)] estimate."""
        np.testing.assert_allclose(class_marginal(np.array([0, 0, 0, 1])), [0.75, 0.25])

    @pytest.mark.parametrize("labels", [np.array([]), np.array([0, 2]), np.zeros((2, 2))])
    def test_rejects_invalid_labels(self, labels):
        """Test that empty, non-binary or non-vector labels are rejected."""
        with pytest.raises(ValueError):
            class_marginal(labels)


class TestSeparationHead:
    """Test the head and its encoder-side gradient."""

    @pytest.fixture
    def head(self):
        y = np.array([0, 1, 1, 0, 0, 0])
        return build_head(3, SeparationConfig(beta=0.5, hidden=5, lr=1e-2), seed=4, y=y)

    def test_encoder_gradient_matches_finite_differences(self, head):
        """Test dKL/dh against central differences."""
        h = np.random.default_rng(0).normal(size=(6, 3))
        value, dh = head.encoder_gradient(h)

        assert value == pytest.approx(loss_kl(head.forward(h), head.target))
        eps = 1e-6
        for idx in [(0, 0), (2, 1), (5, 2)]:
            plus, minus = h.copy(), h.copy()
            plus[idx] += eps
            minus[idx] -= eps
            numeric = (loss_kl(head.forward(plus), head.target) - loss_kl(head.forward(minus), head.target)) / (2 * eps)
            assert dh[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-9)

    def test_encoder_gradient_leaves_head_untouched(self, head):
        """Test that computing the encoder gradient does not accumulate head gradients."""
        head.encoder_gradient(np.ones((6, 3)))

        assert all(not g.any() for g in head.named_gradients().values())

    def test_confusion_step_scales_by_beta(self):
        """Test that the returned gradient is beta times the raw KL gradient."""
        y = np.array([0, 1, 0, 1])
        h = np.random.default_rng(1).normal(size=(4, 3))
        raw = build_head(3, SeparationConfig(beta=0.5), seed=2, y=y)
        stepped = build_head(3, SeparationConfig(beta=0.5), seed=2, y=y)

        _, dh = raw.encoder_gradient(h)
        _, scaled = stepped.confusion_step(h, y)

        np.testing.assert_allclose(scaled, 0.5 * dh)

    def test_fit_step_learns_labels(self):
        """Test that repeated head updates fit separable labels."""
        rng = np.random.default_rng(5)
        h = rng.normal(size=(64, 2))
        y = (h[:, 0] > 0).astype(np.int64)
        head = build_head(2, SeparationConfig(hidden=8, lr=5e-2), seed=0, y=y)

        for _ in range(300):
            head.fit_step(h, y)

        accuracy = (head.forward(h).argmax(axis=1) == y).mean()
        assert accuracy > 0.9

    def test_build_head_is_seeded(self):
        """Test that the same seed builds the same head."""
        y = np.array([0, 1])
        a = build_head(3, SeparationConfig(), seed=7, y=y)
        b = build_head(3, SeparationConfig(), seed=7, y=y)

        np.testing.assert_array_equal(a.named_parameters()["net.0.W"], b.named_parameters()["net.0.W"])


class TestSeparationLoss:
    """Test the standalone separation loss."""

    def test_non_negative(self):
        """Test that the KL is non-negative."""
        y = np.array([0, 1, 1, 0])
        head = build_head(2, SeparationConfig(), seed=0, y=y)

        assert separation_loss(head, np.ones((4, 2)), y) >= 0.0

    def test_length_mismatch(self):
        """Test that label and row counts must agree."""
        y = np.array([0, 1, 1])
        head = build_head(2, SeparationConfig(), seed=0, y=y)

        with pytest.raises(ShapeError):
            separation_loss(head, np.ones((4, 2)), y)


def _label_readout_accuracy(beta, seed):
    """Accuracy of a fresh linear classifier predicting Y from autoencoder embeddings."""
    table = make_synthetic(800, 1.0, seed=seed)
    config = AutoencoderConfig(
        latent_dim=4, f2="identity", epochs=30, lr=1e-2, seed=seed,
        separation=SeparationConfig(beta=beta, hidden=16, lr=1e-2),
    )
    model = train_autoencoder(table.X, config, table.y)
    h = extract_embeddings(model, table.X, table.ids).h
    return train_probe(h, table.y, ProbeConfig(seed=seed)).train_accuracy


@pytest.mark.slow
class TestSeparationEffect:
    """Test that the separation term removes label information from the embeddings."""

    def test_label_readout_accuracy_drops(self):
        """Test that a positive beta lowers the mean label readout accuracy over five seeds."""
        seeds = range(5)

        without = np.mean([_label_readout_accuracy(0.0, seed) for seed in seeds])
        with_separation = np.mean([_label_readout_accuracy(2.0, seed) for seed in seeds])

        assert with_separation < without

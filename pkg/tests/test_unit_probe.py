"""
Unit tests for linear probes over embeddings
"""

import numpy as np
import pytest

from modules.errors import GroupError, ShapeError
from modules.probe import ProbeConfig, analyze, cosine, probe_split, train_probe

CONFIG = ProbeConfig(steps=200, lr=0.05, seed=0)


class TestProbeConfig:
    """Test configuration checks."""

    @pytest.mark.parametrize("kwargs", [{"steps": 0}, {"l2": -1.0}, {"test_frac": 1.0}])
    def test_rejects_invalid(self, kwargs):
        """Test that out-of-range settings raise ValueError."""
        with pytest.raises(ValueError):
            ProbeConfig(**kwargs)


class TestTrainProbe:
    """Test single probes."""

    def test_separable_labels(self, planted_points):
        """Test that a probe separates planted blobs."""
        points, labels = planted_points

        probe = train_probe(points, labels, CONFIG)

        assert probe.train_accuracy == 1.0
        assert probe.test_accuracy == 1.0
        assert probe.w.shape == (3,)

    def test_single_class(self):
        """Test that one-class labels raise GroupError."""
        with pytest.raises(GroupError):
            train_probe(np.ones((4, 2)), np.zeros(4), CONFIG)

    def test_non_binary(self):
        """Test that non-binary labels raise ValueError."""
        with pytest.raises(ValueError):
            train_probe(np.ones((3, 2)), np.array([0, 1, 2]), CONFIG)

    def test_length_mismatch(self):
        """Test that labels must match the embedding rows."""
        with pytest.raises(ShapeError):
            train_probe(np.ones((3, 2)), np.array([0, 1]), CONFIG)

    def test_split_sizes(self):
        """Test that the probe split partitions the rows."""
        train_rows, test_rows = probe_split(10, 0.2, seed=1)

        assert len(test_rows) == 2
        assert sorted(np.r_[train_rows, test_rows]) == list(range(10))


class TestCosine:
    """Test cosine similarity."""

    def test_values(self):
        """Test parallel, opposite and orthogonal vectors."""
        assert cosine([1.0, 0.0], [2.0, 0.0]) == pytest.approx(1.0)
        assert cosine([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(-1.0)
        assert cosine([1.0, 0.0], [0.0, 3.0]) == pytest.approx(0.0)

    def test_zero_vector(self):
        """Test that a zero vector raises ValueError."""
        with pytest.raises(ValueError):
            cosine([0.0, 0.0], [1.0, 0.0])

    def test_length_mismatch(self):
        """Test that vectors of different length raise ShapeError."""
        with pytest.raises(ShapeError):
            cosine([1.0], [1.0, 0.0])


class TestAnalyze:
    """Test the three-probe comparison."""

    def test_proxy_equal_to_true_labels(self, synthetic_table):
        """Test that a perfect proxy has cosine 1 with the true-label probe."""
        h = synthetic_table.X
        s, y = synthetic_table.s, synthetic_table.y

        report = analyze(h, s, s, y, CONFIG)

        assert report.cos_proxy_true == pytest.approx(1.0)
        assert report.gap == pytest.approx(1.0 - report.cos_proxy_downstream)
        assert set(report.accuracy) == {"proxy", "true", "downstream"}
        assert report.to_dict()["gap"] == pytest.approx(report.gap)

    def test_recoverable_group_beats_label_direction(self, synthetic_table):
        """Test that a proxy learned from the group is closer to S than to Y."""
        rng = np.random.default_rng(0)
        s, y = synthetic_table.s, synthetic_table.y
        proxy = np.where(rng.random(len(s)) < 0.9, s, 1 - s)

        report = analyze(synthetic_table.X, proxy, s, y, CONFIG)

        assert report.gap > 0.0

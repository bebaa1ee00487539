"""
End-to-end checks on the real Adult files
Set ADULT_DATA_DIR to a directory holding adult.data and adult.test.
"""

import os
from pathlib import Path

import pytest

from modules import pipeline
from modules.config import load_config

ADULT_DIR = os.environ.get("ADULT_DATA_DIR")

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(not ADULT_DIR, reason="ADULT_DATA_DIR is not set"),
]


@pytest.fixture
def adult_config(tmp_path, monkeypatch):
    monkeypatch.delenv("PROXYFAIR_SEED", raising=False)
    root = Path(ADULT_DIR or ".")
    return load_config(None, {
        "data.source": "adult",
        "data.paths": [str(root / "adult.data"), str(root / "adult.test")],
        "autoencoder.epochs": 5,
        "mitigation.epochs": 2,
        "mitigation.seeds": [0],
        "artifact_dir": str(tmp_path / "artifacts"),
    })


class TestAdultIngest:
    """Test the cleaning and encoding of the published files."""

    def test_row_counts(self, adult_config):
        """Test that rows with missing values are dropped and both files are combined."""
        table, index = pipeline.cmd_ingest(adult_config)

        assert table.n_rows == 45222
        assert table.dropped_rows == 48842 - 45222
        assert len(index.train_ids) + len(index.test_ids) == table.n_rows

    def test_label_and_group_rates(self, adult_config):
        """Test the positive class and male group shares of the cleaned table."""
        table, _ = pipeline.cmd_ingest(adult_config)

        assert table.y.mean() == pytest.approx(0.248, abs=0.01)
        assert table.s.mean() == pytest.approx(0.675, abs=0.01)


class TestAdultPipeline:
    """Test one proxy-driven run on Adult."""

    def test_autoencoder_kmeans_fairmixup(self, adult_config):
        """Test that a proxy run completes and scores a sensible classifier."""
        pipeline.cmd_ingest(adult_config)
        pipeline.cmd_embed(adult_config, "ae")
        pipeline.cmd_cluster(adult_config, "ae", "kmeans")
        pipeline.cmd_mitigate(adult_config, "fairmixup", 0, "dp", "proxy", "ae", "kmeans")

        report = pipeline.cmd_evaluate(adult_config, "fairmixup", 0, "dp", "proxy", "ae", "kmeans")

        assert report.ap > 0.5
        assert 0.0 <= report.spd <= 1.0

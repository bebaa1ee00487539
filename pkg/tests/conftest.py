"""
Pytest configuration and fixtures for proxyfair tests
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from data.adult import clean_and_encode, split  # noqa: E402
from data.synthetic import make_synthetic, make_synthetic_raw  # noqa: E402
from modules.config import load_config  # noqa: E402

ADULT_TRAIN_LINES = [
    "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K",
    "50, Self-emp-not-inc, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 13, United-States, <=50K",
    "38, Private, 215646, HS-grad, 9, Divorced, Handlers-cleaners, Not-in-family, White, Male, 0, 0, 40, United-States, <=50K",
    "53, Private, 234721, 11th, 7, Married-civ-spouse, Handlers-cleaners, Husband, Black, Male, 0, 0, 40, United-States, <=50K",
    "28, Private, 338409, Bachelors, 13, Married-civ-spouse, Prof-specialty, Wife, Black, Female, 0, 0, 40, Cuba, <=50K",
    "37, Private, 284582, Masters, 14, Married-civ-spouse, Exec-managerial, Wife, White, Female, 0, 0, 40, United-States, <=50K",
    "54, ?, 180211, Some-college, 10, Married-civ-spouse, ?, Husband, Asian-Pac-Islander, Male, 0, 0, 60, South, >50K",
    "49, Private, 160187, 9th, 5, Married-spouse-absent, Other-service, Not-in-family, Black, Female, 0, 0, 16, Jamaica, <=50K",
    "52, Self-emp-not-inc, 209642, HS-grad, 9, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 45, United-States, >50K",
    "31, Private, 45781, Masters, 14, Never-married, Prof-specialty, Not-in-family, White, Female, 14084, 0, 50, United-States, >50K",
    "42, Private, 159449, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 5178, 0, 40, United-States, >50K",
]

ADULT_TEST_LINES = [
    "|1x3 Cross validator",
    "25, Private, 226802, 11th, 7, Never-married, Machine-op-inspct, Own-child, Black, Male, 0, 0, 40, United-States, <=50K.",
    "",
    "38, Private, 89814, HS-grad, 9, Married-civ-spouse, Farming-fishing, Husband, White, Male, 0, 0, 50, United-States, <=50K.",
    "28, Local-gov, 336951, Assoc-acdm, 12, Married-civ-spouse, Protective-serv, Husband, White, Male, 0, 0, 40, United-States, >50K.",
]

@pytest.fixture(scope="session")
def project_root_path():
    """Provide the project root path."""
    return project_root


@pytest.fixture
def adult_files(tmp_path):
    """Write a small Adult train/test pair in the UCI format."""
    train = tmp_path / "adult.data"
    test = tmp_path / "adult.test"
    train.write_text("\n".join(ADULT_TRAIN_LINES) + "\n")
    test.write_text("\n".join(ADULT_TEST_LINES) + "\n")
    return train, test


@pytest.fixture(scope="session")
def synthetic_raw():
    """Raw synthetic table with a strongly recoverable hidden group."""
    return make_synthetic_raw(400, corr_strength=1.0, seed=3)


@pytest.fixture(scope="session")
def synthetic_table():
    """Encoded synthetic table, statistics over all rows."""
    return make_synthetic(400, corr_strength=1.0, seed=3)


@pytest.fixture(scope="session")
def synthetic_split(synthetic_raw):
    """Train-standardized encoding plus its split."""
    index = split(clean_and_encode(synthetic_raw), 0.2, 3)
    return clean_and_encode(synthetic_raw, split=index), index


@pytest.fixture
def planted_points():
    """Two well-separated Gaussian blobs of unequal size."""
    rng = np.random.default_rng(11)
    a = rng.normal(-3.0, 0.4, size=(60, 3))
    b = rng.normal(3.0, 0.4, size=(40, 3))
    labels = np.r_[np.zeros(60, dtype=np.int64), np.ones(40, dtype=np.int64)]
    return np.vstack([a, b]), labels


SMOKE_OVERRIDES = {
    "data.source": "synthetic",
    "data.synthetic_rows": 240,
    "data.corr_strength": 1.0,
    "autoencoder.latent_dim": 4,
    "autoencoder.epochs": 15,
    "transformer.d_model": 8,
    "transformer.n_heads": 2,
    "transformer.n_layers": 1,
    "transformer.d_ff": 8,
    "transformer.n_bins": 4,
    "transformer.epochs": 2,
    "transformer.batch_size": 64,
    "clustering.threshold": 1.0,
    "clustering.scale_threshold": False,
    "mitigation.hidden": 8,
    "mitigation.epochs": 3,
    "mitigation.batch_size": 64,
    "mitigation.seeds": [0, 1],
    "probe.steps": 50,
}


@pytest.fixture
def smoke_config(tmp_path, monkeypatch):
    """Small synthetic run configuration rooted in a temporary artifact directory."""
    monkeypatch.delenv("PROXYFAIR_SEED", raising=False)
    return load_config(None, {**SMOKE_OVERRIDES, "artifact_dir": str(tmp_path / "artifacts")})


# Pytest hooks
def pytest_configure(config):
    """Configure pytest with custom settings."""
    config.addinivalue_line("markers", "unit: mark test as a unit test")
    config.addinivalue_line("markers", "integration: mark test as an integration test")
    config.addinivalue_line("markers", "slow: mark test as slow")


def pytest_collection_modifyitems(config, items):
    """Modify test collection to add markers automatically."""
    for item in items:
        if "test_unit_" in item.nodeid:
            item.add_marker(pytest.mark.unit)
        elif "test_integration_" in item.nodeid:
            item.add_marker(pytest.mark.integration)

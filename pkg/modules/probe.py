"""
Linear probes over frozen embeddings
Three logistic probes (proxy label, true sensitive label, downstream label)
share one standardisation and split; their weight vectors are compared by
cosine similarity.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from modules.errors import GroupError, ShapeError
from modules.nncore import OptimizerState, adam_step, sigmoid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 300
    lr: float = 0.05
    l2: float = 1e-4
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps <= 0 or self.lr <= 0:
            raise ValueError("probe steps and lr must be positive")
        if self.l2 < 0:
            raise ValueError(f"probe l2 must be >= 0, got {self.l2}")
        if not 0.0 < self.test_frac < 1.0:
            raise ValueError(f"probe test_frac must be in (0, 1), got {self.test_frac}")


@dataclass
class LinearProbe:
    w: np.ndarray
    b: float
    train_accuracy: float
    test_accuracy: float


@dataclass
class SimilarityReport:
    cos_proxy_true: float
    cos_proxy_downstream: float
    accuracy: dict[str, float]

    @property
    def gap(self) -> float:
        return self.cos_proxy_true - self.cos_proxy_downstream

    def to_dict(self) -> dict[str, object]:
        return {**asdict(self), "gap": self.gap}


def probe_split(n: int, test_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_test = min(max(1, round(n * test_frac)), n - 1)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _standardize(h: np.ndarray, fit_rows: np.ndarray) -> np.ndarray:
    mean = h[fit_rows].mean(axis=0)
    std = h[fit_rows].std(axis=0)
    return (h - mean) / np.where(std < 1e-12, 1.0, std)


def _fit_logistic(Z: np.ndarray, y: np.ndarray, config: ProbeConfig) -> tuple[np.ndarray, float]:
    params = {"w": np.zeros(Z.shape[1]), "b": np.zeros(1)}
    state = OptimizerState(lr=config.lr)
    n = len(y)
    for _ in range(config.steps):
        residual = sigmoid(Z @ params["w"] + params["b"][0]) - y
        grads = {
            "w": Z.T @ residual / n + config.l2 * params["w"],
            "b": np.array([residual.mean()]),
        }
        adam_step(params, grads, state)
    return params["w"], float(params["b"][0])


def _accuracy(Z: np.ndarray, y: np.ndarray, w: np.ndarray, b: float) -> float:
    return float(((Z @ w + b >= 0).astype(np.int64) == y).mean())


def train_probe(
    h: np.ndarray,
    labels: np.ndarray,
    config: ProbeConfig,
    split: tuple[np.ndarray, np.ndarray] | None = None,
) -> LinearProbe:
    """L2-regularised logistic regression by full-batch Adam on standardised embeddings"""
    h = np.asarray(h, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if h.ndim != 2 or len(h) != len(labels):
        raise ShapeError(f"{len(labels)} labels for embedding matrix {h.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("probe labels must be binary")
    if len(np.unique(labels)) < 2:
        raise GroupError(f"probe labels contain a single class ({int(labels[0])})")
    train_rows, test_rows = split if split is not None else probe_split(len(h), config.test_frac, config.seed)
    Z = _standardize(h, train_rows)
    w, b = _fit_logistic(Z[train_rows], labels[train_rows], config)
    return LinearProbe(
        w=w,
        b=b,
        train_accuracy=_accuracy(Z[train_rows], labels[train_rows], w, b),
        test_accuracy=_accuracy(Z[test_rows], labels[test_rows], w, b),
    )


def cosine(w1: np.ndarray, w2: np.ndarray) -> float:
    w1, w2 = np.asarray(w1, dtype=np.float64).ravel(), np.asarray(w2, dtype=np.float64).ravel()
    if w1.shape != w2.shape:
        raise ShapeError(f"weight vectors differ in length: {len(w1)} vs {len(w2)}")
    n1, n2 = np.linalg.norm(w1), np.linalg.norm(w2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(w1 @ w2 / (n1 * n2), -1.0, 1.0))


def analyze(h: np.ndarray, proxy: np.ndarray, s: np.ndarray, y: np.ndarray,
            config: ProbeConfig) -> SimilarityReport:
    """Train the proxy / true / downstream probes on one split and compare their weights"""
    split = probe_split(len(h), config.test_frac, config.seed)
    probes = {
        name: train_probe(h, labels, config, split)
        for name, labels in (("proxy", proxy), ("true", s), ("downstream", y))
    }
    report = SimilarityReport(
        cos_proxy_true=cosine(probes["proxy"].w, probes["true"].w),
        cos_proxy_downstream=cosine(probes["proxy"].w, probes["downstream"].w),
        accuracy={name: p.test_accuracy for name, p in probes.items()},
    )
    logger.info("Probe cosines: proxy-true %.3f, proxy-downstream %.3f",
                report.cos_proxy_true, report.cos_proxy_downstream)
    return report

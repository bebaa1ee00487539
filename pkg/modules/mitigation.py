"""
Downstream income classifiers with in-processing bias mitigation
ERM, adversarial debiasing (adversary on the predictor's logit) and fair
mixup (path-smoothness penalty between group batches). The group signal is
passed explicitly; training sets never carry the sensitive column.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from modules.errors import DivergenceError, GroupError, ShapeError
from modules.nncore import (
    Adam,
    Dense,
    Module,
    activation_derivative,
    activation_second_derivative,
    activate,
    bce_logits_grad,
    load_checkpoint,
    loss_bce_logits,
    save_checkpoint,
    sigmoid,
)

logger = logging.getLogger(__name__)

ALGORITHMS = ("erm", "advdeb", "fairmixup")
VARIANTS = ("dp", "eo")
PROVENANCES = ("none", "true", "proxy")


@dataclass(frozen=True)
class MitigationConfig:
    algorithm: str = "erm"
    hidden: int = 64
    activation: str = "relu"
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    alpha: float = 1.0
    adversary_lr: float = 1e-3
    variant: str = "dp"
    lambda_dp: float = 0.5
    lambda_eo: float = 2.5
    threshold: float = 0.5
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.lambda_dp < 0 or self.lambda_eo < 0:
            raise ValueError("fair mixup lambda must be >= 0")
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.hidden <= 0:
            raise ValueError("epochs, batch_size, lr and hidden must be positive")
        if not self.seeds:
            raise ValueError("at least one mitigation seed is required")

    @property
    def lam(self) -> float:
        return self.lambda_dp if self.variant == "dp" else self.lambda_eo


@dataclass
class TrainSet:
    """Features and target of training rows; the sensitive column is not part of it"""

    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.X.ndim != 2 or not (len(self.X) == len(self.y) == len(self.ids)):
            raise ShapeError(f"train set X {self.X.shape}, y {self.y.shape}, ids {self.ids.shape} disagree")

    @property
    def width(self) -> int:
        return int(self.X.shape[1])

    def __len__(self) -> int:
        return len(self.ids)


class ClassifierModel(Module):
    """MLP d -> hidden -> 1 logit; scores are sigmoid(logit)"""

    def __init__(self, input_dim: int, config: MitigationConfig, rng: np.random.Generator,
                 provenance: str = "none"):
        super().__init__()
        if provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {provenance}")
        self.input_dim = input_dim
        self.config = config
        self.provenance = provenance
        self.hidden = self.add_child("hidden", Dense(input_dim, config.hidden, config.activation, rng))
        self.out = self.add_child("out", Dense(config.hidden, 1, "identity", rng))
        self.loss_curve: list[float] = []

    def forward(self, X: np.ndarray) -> np.ndarray:
        return self.out.forward(self.hidden.forward(X))[:, 0]

    def backward(self, dlogit: np.ndarray) -> np.ndarray:
        return self.hidden.backward(self.out.backward(dlogit[:, None]))

    def logits(self, X: np.ndarray) -> np.ndarray:
        """Forward pass without touching layer caches"""
        p = self.named_parameters()
        a1 = activate(self.config.activation, X @ p["hidden.W"].T + p["hidden.b"])
        return (a1 @ p["out.W"].T + p["out.b"])[:, 0]


class Adversary(Module):
    """Logistic head predicting the group signal from the predictor's logit"""

    def __init__(self, rng: np.random.Generator, lr: float):
        super().__init__()
        self.head = self.add_child("head", Dense(1, 1, "identity", rng))
        self.optimizer = Adam(self, lr=lr)

    def forward(self, logit: np.ndarray) -> np.ndarray:
        return self.head.forward(logit[:, None])[:, 0]

    def backward(self, da: np.ndarray) -> np.ndarray:
        return self.head.backward(da[:, None])[:, 0]

    def step(self, logit: np.ndarray, groups: np.ndarray) -> tuple[float, np.ndarray]:
        """Update the adversary on the detached logit, then return its loss and dLoss/dlogit"""
        self.zero_grad()
        a = self.forward(logit)
        self.backward(bce_logits_grad(a, groups))
        self.optimizer.step()

        self.zero_grad()
        a = self.forward(logit)
        loss = loss_bce_logits(a, groups)
        dlogit = self.backward(bce_logits_grad(a, groups))
        self.zero_grad()
        return loss, dlogit


def mix_batches(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """t * x0 + (1 - t) * x1; t = 0 gives the group-1 batch, t = 1 the group-0 batch"""
    if x0.shape != x1.shape:
        raise ShapeError(f"group batches differ in shape: {x0.shape} vs {x1.shape}")
    return t * x0 + (1.0 - t) * x1


def path_penalty(model: ClassifierModel, x0: np.ndarray, x1: np.ndarray, t: float,
                 scale: float = 1.0) -> float:
    """|mean_b d/ds f(x_mix_b + s (x1_b - x0_b))| at s = 0, with f the sigmoid score.

    Adds scale * dPenalty/dparam into the model's gradients.
    """
    p = model.named_parameters()
    g = model.named_gradients()
    act = model.config.activation
    W1, b1, W2, b2 = p["hidden.W"], p["hidden.b"], p["out.W"], p["out.b"]

    x = mix_batches(x0, x1, t)
    v = x1 - x0
    B = len(x)

    # forward and tangent pass
    z1 = x @ W1.T + b1
    a1 = activate(act, z1)
    d1 = activation_derivative(act, z1, a1)
    dz1 = v @ W1.T
    da1 = d1 * dz1
    z2 = (a1 @ W2.T + b2)[:, 0]
    dz2 = (da1 @ W2.T)[:, 0]
    s = sigmoid(z2)
    s1 = s * (1.0 - s)
    G = float(np.mean(s1 * dz2))

    # reverse pass through the tangent computation
    coef = scale * np.sign(G) / B
    e2 = coef * s1
    r2 = coef * activation_second_derivative("sigmoid", z2, s) * dz2
    g["out.W"] += (e2 @ da1 + r2 @ a1)[None, :]
    g["out.b"] += r2.sum()
    dda1 = e2[:, None] * W2
    d_a1 = r2[:, None] * W2
    ddz1 = dda1 * d1
    dzz1 = dda1 * activation_second_derivative(act, z1, a1) * dz1 + d_a1 * d1
    g["hidden.W"] += ddz1.T @ v + dzz1.T @ x
    g["hidden.b"] += dzz1.sum(axis=0)
    return abs(G)


class GroupSampler:
    """Same-size batches from each group (within each Y class for the eo variant)"""

    def __init__(self, X: np.ndarray, y: np.ndarray, groups: np.ndarray, variant: str,
                 batch_size: int, rng: np.random.Generator):
        self.X = X
        self.rng = rng
        self.batch_size = batch_size
        classes = (None,) if variant == "dp" else (0, 1)
        self.pools: list[tuple[np.ndarray, np.ndarray]] = []
        for c in classes:
            rows = np.ones(len(y), dtype=bool) if c is None else y == c
            g0 = np.flatnonzero(rows & (groups == 0))
            g1 = np.flatnonzero(rows & (groups == 1))
            where = "" if c is None else f" with y={c}"
            for g, members in ((0, g0), (1, g1)):
                if not len(members):
                    raise GroupError(f"group {g}{where} has no training rows; fair mixup needs both groups")
            self.pools.append((g0, g1))

    def draw(self) -> list[tuple[np.ndarray, np.ndarray]]:
        pairs = []
        for g0, g1 in self.pools:
            m = min(self.batch_size, len(g0), len(g1))
            i0 = self.rng.choice(g0, size=m, replace=False)
            i1 = self.rng.choice(g1, size=m, replace=False)
            pairs.append((self.X[i0], self.X[i1]))
        return pairs


def _check_groups(groups: np.ndarray, n: int) -> np.ndarray:
    groups = np.asarray(groups, dtype=np.int64)
    if groups.shape != (n,):
        raise ShapeError(f"{len(groups)} group labels for {n} training rows")
    if not np.isin(groups, (0, 1)).all():
        raise GroupError("group labels must be 0 or 1")
    for g in (0, 1):
        if not (groups == g).any():
            raise GroupError(f"group {g} is absent from the training rows")
    return groups


def _fit(
    train: TrainSet,
    config: MitigationConfig,
    algorithm: str,
    groups: np.ndarray | None,
    provenance: str,
) -> ClassifierModel:
    rng = np.random.default_rng(config.seed)
    model = ClassifierModel(train.width, config, rng, provenance)
    optimizer = Adam(model, lr=config.lr)
    adversary = Adversary(np.random.default_rng([config.seed, 2]), config.adversary_lr) \
        if algorithm == "advdeb" else None
    sampler = GroupSampler(train.X, train.y, groups, config.variant, config.batch_size,
                           np.random.default_rng([config.seed, 3])) \
        if algorithm == "fairmixup" else None
    mixup_rng = np.random.default_rng([config.seed, 4])

    n = len(train)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            optimizer.zero_grad()
            logit = model.forward(train.X[idx])
            loss = loss_bce_logits(logit, train.y[idx])
            dlogit = bce_logits_grad(logit, train.y[idx])
            if adversary is not None:
                adv_loss, dadv = adversary.step(logit, groups[idx])
                if not np.isfinite(adv_loss):
                    raise DivergenceError("adversary", epoch)
                loss -= config.alpha * adv_loss
                dlogit = dlogit - config.alpha * dadv
            model.backward(dlogit)
            if sampler is not None:
                t = float(mixup_rng.uniform())
                for x0, x1 in sampler.draw():
                    loss += config.lam * path_penalty(model, x0, x1, t, scale=config.lam)
            optimizer.step()
            total += loss * len(idx)

        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise DivergenceError(algorithm, epoch)
        model.loss_curve.append(epoch_loss)
        logger.debug("%s epoch %d loss %.5f", algorithm, epoch, epoch_loss)

    logger.info("Trained %s classifier (groups: %s, seed %d): loss %.4f -> %.4f",
                algorithm, provenance, config.seed, model.loss_curve[0], model.loss_curve[-1])
    return model


def train_erm(train: TrainSet, config: MitigationConfig) -> ClassifierModel:
    """Plain binary cross-entropy"""
    return _fit(train, config, "erm", None, "none")


def train_adversarial(train: TrainSet, groups: np.ndarray, config: MitigationConfig,
                      provenance: str = "true") -> ClassifierModel:
    """Predictor minimises BCE - alpha * adversary BCE; adversary updates first on every batch"""
    return _fit(train, config, "advdeb", _check_groups(groups, len(train)), provenance)


def train_fair_mixup(train: TrainSet, groups: np.ndarray, config: MitigationConfig,
                     provenance: str = "true") -> ClassifierModel:
    """BCE + lambda * path penalty between group batches (dp) or class-matched group batches (eo)"""
    return _fit(train, config, "fairmixup", _check_groups(groups, len(train)), provenance)


def train_mitigator(train: TrainSet, groups: np.ndarray | None, config: MitigationConfig,
                    provenance: str) -> ClassifierModel:
    if config.algorithm == "erm":
        return train_erm(train, config)
    if groups is None:
        raise GroupError(f"{config.algorithm} needs a group signal")
    if config.algorithm == "advdeb":
        return train_adversarial(train, groups, config, provenance)
    return train_fair_mixup(train, groups, config, provenance)


def predict(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    """Scores in (0, 1)"""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"feature width {X.shape[-1]} does not match classifier input {model.input_dim}")
    return sigmoid(model.logits(X))


def hard_labels(scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(scores) >= threshold).astype(np.int64)


def save_model(path: Path, model: ClassifierModel, extra: dict[str, Any] | None = None) -> Path:
    return save_checkpoint(
        path,
        model.named_parameters(),
        model.config.seed,
        model.config,
        {
            "input_dim": model.input_dim,
            "provenance": model.provenance,
            "loss_curve": model.loss_curve,
            **(extra or {}),
        },
    )


def load_model(path: Path) -> ClassifierModel:
    tensors, manifest = load_checkpoint(path)
    raw = dict(manifest["config"])
    raw["seeds"] = tuple(raw.get("seeds", (0,)))
    config = MitigationConfig(**raw)
    model = ClassifierModel(int(manifest["input_dim"]), config, np.random.default_rng(0),
                            manifest.get("provenance", "none"))
    model.load_parameters(tensors)
    model.loss_curve = list(manifest.get("loss_curve", []))
    return model

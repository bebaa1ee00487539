"""
KL separation head for embedding generators
An MLP over the row embedding learns to predict the downstream label while
the encoder is pushed, via KL towards the label marginal, to make that
prediction uninformative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from modules.errors import ShapeError
from modules.nncore import (
    Adam,
    Module,
    cross_entropy_logit_grad,
    kl_grad_p,
    loss_kl,
    mlp,
    softmax,
    softmax_backward,
)


@dataclass(frozen=True)
class SeparationConfig:
    beta: float = 0.1
    hidden: int = 16
    lr: float = 1e-3

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError(f"separation beta must be >= 0, got {self.beta}")
        if self.hidden <= 0:
            raise ValueError(f"separation hidden width must be positive, got {self.hidden}")

    @property
    def enabled(self) -> bool:
        return self.beta > 0


def _check_labels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.size == 0 or not np.isin(y, (0, 1)).all():
        raise ValueError("separation labels must be a non-empty binary vector")
    return y.astype(np.int64)


def class_marginal(y: np.ndarray) -> np.ndarray:
    """[P(Y=0), P(Y=1)] estimated from labels"""
    y = _check_labels(y)
    rate = float(y.mean())
    return np.array([1.0 - rate, rate])


class SeparationHead(Module):
    """MLP h -> softmax over the two downstream classes"""

    def __init__(self, in_dim: int, config: SeparationConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.net = self.add_child("net", mlp([in_dim, config.hidden, 2], "tanh", "identity", rng))
        self.optimizer = Adam(self, lr=config.lr)
        self.target: np.ndarray | None = None

    def forward(self, h: np.ndarray) -> np.ndarray:
        if h.ndim != 2:
            raise ShapeError(f"separation head expects a 2-d embedding batch, got shape {h.shape}")
        return softmax(self.net.forward(h))

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        return self.net.backward(dlogits)

    def encoder_gradient(self, h: np.ndarray) -> tuple[float, np.ndarray]:
        """KL(p || marginal) and its gradient w.r.t. h; head gradients are discarded"""
        assert self.target is not None, "set the label marginal before training"
        p = self.forward(h)
        value = loss_kl(p, self.target)
        dh = self.backward(softmax_backward(p, kl_grad_p(p, self.target)))
        self.zero_grad()
        return value, dh

    def fit_step(self, h: np.ndarray, y: np.ndarray) -> None:
        """One Adam step of the head on cross-entropy against the true labels"""
        self.zero_grad()
        p = self.forward(h)
        onehot = np.eye(2)[y]
        self.backward(cross_entropy_logit_grad(p, onehot))
        self.optimizer.step()
        self.zero_grad()

    def confusion_step(self, h: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Encoder-side beta-weighted KL gradient, then a head update on the same batch"""
        value, dh = self.encoder_gradient(h)
        self.fit_step(h, y)
        return value, self.config.beta * dh


def separation_loss(head: SeparationHead, h: np.ndarray, y: np.ndarray) -> float:
    """KL between the head's class distribution and the label marginal of y"""
    target = class_marginal(y)
    if len(y) != len(h):
        raise ShapeError(f"{len(y)} labels for {len(h)} embedding rows")
    return loss_kl(head.forward(h), target)


def build_head(in_dim: int, config: SeparationConfig, seed: int, y: np.ndarray) -> SeparationHead:
    """Head seeded from its own stream so the main training stream is untouched"""
    head = SeparationHead(in_dim, config, np.random.default_rng([seed, 1]))
    head.target = class_marginal(y)
    return head

"""
Autoencoder embedding generator
One hidden layer: h = f1(W_i X + b_i), X_hat = f2(W_j h + b_j), trained on
reconstruction loss with an optional KL separation term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from modules.errors import DivergenceError, ShapeError
from modules.nncore import (
    Adam,
    Dense,
    Module,
    TrainConfig,
    dense_forward,
    loss_reconstruction,
    reconstruction_grad,
)
from modules.separation import SeparationConfig, build_head

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AutoencoderConfig:
    latent_dim: int = 32
    f1: str = "tanh"
    f2: str = "relu"
    loss_mode: str = "mse"
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    separation: SeparationConfig = field(default_factory=SeparationConfig)

    def __post_init__(self) -> None:
        if self.latent_dim <= 0:
            raise ValueError(f"latent_dim must be positive, got {self.latent_dim}")
        if self.loss_mode not in ("mse", "mae"):
            raise ValueError(f"loss_mode must be 'mse' or 'mae', got {self.loss_mode}")

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.seed)


class AutoencoderModel(Module):
    """Encoder (activation f1) and decoder (activation f2)"""

    def __init__(self, input_dim: int, config: AutoencoderConfig, rng: np.random.Generator):
        super().__init__()
        if config.latent_dim >= input_dim:
            raise ShapeError(
                f"latent dim {config.latent_dim} must be smaller than input dim {input_dim}"
            )
        self.config = config
        self.input_dim = input_dim
        self.latent_dim = config.latent_dim
        self.encoder = self.add_child("encoder", Dense(input_dim, config.latent_dim, config.f1, rng))
        self.decoder = self.add_child("decoder", Dense(config.latent_dim, input_dim, config.f2, rng))
        self.loss_curve: list[float] = []
        self.initial_loss: float | None = None
        self.trained = False


def ae_forward(model: AutoencoderModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Latent representation and reconstruction; does not touch training caches"""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"input of shape {X.shape} does not match encoder input dim {model.input_dim}")
    h = dense_forward(model.encoder.dense_params, X, model.config.f1)
    X_hat = dense_forward(model.decoder.dense_params, h, model.config.f2)
    return h, X_hat


def train_autoencoder(
    X: np.ndarray, config: AutoencoderConfig, y: np.ndarray | None = None
) -> AutoencoderModel:
    """Minimise reconstruction loss (plus beta * separation KL when labels are given)"""
    X = np.asarray(X, dtype=np.float64)
    train = config.train
    rng = np.random.default_rng(train.seed)
    model = AutoencoderModel(X.shape[1], config, rng)
    optimizer = Adam(model, lr=train.lr)

    head = None
    if y is not None and config.separation.enabled:
        y = np.asarray(y, dtype=np.int64)
        head = build_head(config.latent_dim, config.separation, train.seed, y)

    model.initial_loss = loss_reconstruction(X, ae_forward(model, X)[1], config.loss_mode)
    n = len(X)
    for epoch in range(train.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, train.batch_size):
            idx = perm[start:start + train.batch_size]
            xb = X[idx]
            optimizer.zero_grad()
            h = model.encoder.forward(xb)
            x_hat = model.decoder.forward(h)
            loss = loss_reconstruction(xb, x_hat, config.loss_mode)
            dh = model.decoder.backward(reconstruction_grad(xb, x_hat, config.loss_mode))
            if head is not None:
                kl, dh_sep = head.confusion_step(h, y[idx])
                loss += config.separation.beta * kl
                dh = dh + dh_sep
            model.encoder.backward(dh)
            optimizer.step()
            total += loss * len(idx)

        epoch_loss = total / max(n, 1)
        if not np.isfinite(epoch_loss):
            raise DivergenceError("autoencoder", epoch)
        model.loss_curve.append(epoch_loss)
        logger.debug("autoencoder epoch %d loss %.6f", epoch, epoch_loss)

    model.trained = True
    if model.loss_curve:
        logger.info(
            "Trained autoencoder (%d -> %d) for %d epochs: loss %.5f -> %.5f",
            model.input_dim, model.latent_dim, train.epochs,
            model.initial_loss, model.loss_curve[-1],
        )
    return model

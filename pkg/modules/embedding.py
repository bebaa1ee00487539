"""
Row embeddings produced by a trained generator
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from modules.artifacts import load_matrix_csv, save_matrix_csv
from modules.autoencoder import AutoencoderModel, ae_forward
from modules.errors import ShapeError
from modules.transformer import TokenizedCorpus, TransformerModel

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingMatrix:
    """One embedding row per encoded row, aligned by id"""

    h: np.ndarray
    ids: np.ndarray
    generator: str
    config_hash: str = ""
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.h = np.asarray(self.h, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.h.ndim != 2 or len(self.h) != len(self.ids):
            raise ShapeError(f"embedding matrix {self.h.shape} does not match {len(self.ids)} ids")

    @property
    def dim(self) -> int:
        return int(self.h.shape[1])

    def subset(self, ids: np.ndarray) -> EmbeddingMatrix:
        lookup = {int(i): k for k, i in enumerate(self.ids)}
        try:
            rows = np.array([lookup[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"row id {exc.args[0]} has no embedding") from None
        return EmbeddingMatrix(self.h[rows], self.ids[rows], self.generator, self.config_hash, dict(self.metadata))


def extract_embeddings(
    model: AutoencoderModel | TransformerModel,
    data: np.ndarray | TokenizedCorpus,
    ids: np.ndarray | None = None,
) -> EmbeddingMatrix:
    """Autoencoder latent h, or pooled transformer vector, for every row"""
    if not model.trained:
        logger.warning("Extracting embeddings from an untrained %s", type(model).__name__)

    if isinstance(model, AutoencoderModel):
        if isinstance(data, TokenizedCorpus):
            raise TypeError("the autoencoder embeds encoded feature matrices, not token corpora")
        X = np.asarray(data, dtype=np.float64)
        h, _ = ae_forward(model, X)
        row_ids = np.arange(len(X)) if ids is None else ids
        return EmbeddingMatrix(h, row_ids, "ae")

    if not isinstance(data, TokenizedCorpus):
        raise TypeError("the transformer embeds token corpora")
    return EmbeddingMatrix(model.embed(data.tokens), data.ids if ids is None else ids, "transformer")


def save_embeddings(path: Path, matrix: EmbeddingMatrix) -> None:
    save_matrix_csv(path, matrix.ids, matrix.h, prefix="e")


def load_embeddings(path: Path, generator: str, config_hash: str = "") -> EmbeddingMatrix:
    ids, h = load_matrix_csv(path, "embed")
    return EmbeddingMatrix(h, ids, generator, config_hash)

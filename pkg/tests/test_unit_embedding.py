"""
Unit tests for embedding extraction and persistence
"""

import numpy as np
import pytest

from modules.autoencoder import AutoencoderConfig, AutoencoderModel
from modules.embedding import EmbeddingMatrix, extract_embeddings, load_embeddings, save_embeddings
from modules.errors import ShapeError
from modules.transformer import TransformerConfig, TransformerModel, build_corpus, fit_tokenizer


class TestEmbeddingMatrix:
    """Test the embedding container."""

    def test_shape_check(self):
        """Test that rows and ids must agree."""
        with pytest.raises(ShapeError):
            EmbeddingMatrix(np.zeros((3, 2)), np.arange(2), "ae")

    def test_subset_by_id(self):
        """Test selection in the requested id order."""
        matrix = EmbeddingMatrix(np.arange(6.0).reshape(3, 2), np.array([10, 20, 30]), "ae")

        sub = matrix.subset(np.array([30, 10]))

        np.testing.assert_array_equal(sub.h, [[4.0, 5.0], [0.0, 1.0]])
        with pytest.raises(KeyError):
            matrix.subset(np.array([99]))


class TestExtractEmbeddings:
    """Test extraction from both generators."""

    def test_autoencoder(self, synthetic_table, caplog):
        """Test latent extraction and the untrained-model warning."""
        model = AutoencoderModel(synthetic_table.width, AutoencoderConfig(latent_dim=3), np.random.default_rng(0))

        matrix = extract_embeddings(model, synthetic_table.X, synthetic_table.ids)

        assert matrix.h.shape == (synthetic_table.n_rows, 3)
        assert matrix.generator == "ae"
        assert "untrained" in caplog.text

    def test_transformer(self, synthetic_table):
        """Test pooled transformer vectors keyed by corpus ids."""
        tokenizer = fit_tokenizer(synthetic_table.frame, synthetic_table.schema, n_bins=4)
        corpus = build_corpus(synthetic_table.frame, tokenizer)
        config = TransformerConfig(d_model=8, n_heads=2, n_layers=1, d_ff=8)
        model = TransformerModel(tokenizer, config, np.random.default_rng(0))

        matrix = extract_embeddings(model, corpus)

        assert matrix.h.shape == (synthetic_table.n_rows, 8)
        np.testing.assert_array_equal(matrix.ids, synthetic_table.ids)

    def test_wrong_input_type(self, synthetic_table):
        """Test that each generator rejects the other's input type."""
        tokenizer = fit_tokenizer(synthetic_table.frame, synthetic_table.schema, n_bins=4)
        corpus = build_corpus(synthetic_table.frame, tokenizer)
        ae = AutoencoderModel(synthetic_table.width, AutoencoderConfig(latent_dim=3), np.random.default_rng(0))
        transformer = TransformerModel(tokenizer, TransformerConfig(d_model=8, n_heads=2, n_layers=1),
                                       np.random.default_rng(0))

        with pytest.raises(TypeError):
            extract_embeddings(ae, corpus)
        with pytest.raises(TypeError):
            extract_embeddings(transformer, synthetic_table.X)

    def test_save_and_load(self, tmp_path):
        """Test the CSV round trip."""
        matrix = EmbeddingMatrix(np.random.default_rng(0).normal(size=(4, 2)), np.array([3, 1, 4, 5]), "ae")

        save_embeddings(tmp_path / "embeddings.csv", matrix)
        loaded = load_embeddings(tmp_path / "embeddings.csv", "ae", "hash")

        np.testing.assert_array_equal(loaded.h, matrix.h)
        assert loaded.config_hash == "hash"

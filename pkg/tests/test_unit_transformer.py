"""
Unit tests for the tabular transformer embedding generator
"""

import numpy as np
import pandas as pd
import pytest

from modules.errors import ShapeError
from modules.nncore import grad_check
from modules.transformer import (
    CLS_ID,
    UNK_LOCAL,
    EncoderBlock,
    FieldVocabulary,
    HeadProjections,
    MultiHeadSelfAttention,
    TokenizedCorpus,
    TokenSchema,
    TransformerConfig,
    TransformerModel,
    attention,
    build_corpus,
    fit_tokenizer,
    mask_count,
    mask_fields,
    masked_field_accuracy,
    multi_head,
    tokenize_frame,
    tokenize_row,
    train_transformer_mlm,
)

TINY = TransformerConfig(d_model=8, n_heads=2, n_layers=1, d_ff=8, n_bins=4, epochs=8, batch_size=64, lr=1e-2)


def _squared_loss(model, x):
    out = model.forward(x)
    model.backward(out)
    return 0.5 * float((out**2).sum())


@pytest.fixture(scope="module")
def tokenizer_and_corpus(synthetic_table):
    tokenizer = fit_tokenizer(synthetic_table.frame, synthetic_table.schema, n_bins=4)
    return tokenizer, build_corpus(synthetic_table.frame, tokenizer)


class TestAttention:
    """Test scaled dot-product and multi-head attention."""

    def test_identity_inputs(self):
        """Test softmax(I / sqrt(2)) I on the 2x2 identity."""
        out = attention(np.eye(2), np.eye(2), np.eye(2))

        np.testing.assert_allclose(out[0], [0.6698, 0.3302], atol=1e-4)
        np.testing.assert_allclose(out.sum(axis=1), 1.0)

    def test_shape_checks(self):
        """Test mismatched key width and key/value counts."""
        with pytest.raises(ShapeError):
            attention(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 2)))
        with pytest.raises(ShapeError):
            attention(np.ones((2, 2)), np.ones((3, 2)), np.ones((2, 2)))

    def test_heads_must_divide_width(self):
        """Test that a head count not dividing d_model is rejected."""
        with pytest.raises(ShapeError):
            HeadProjections.create(8, 3, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            TransformerConfig(d_model=10, n_heads=3)

    def test_batched_layer_matches_reference(self):
        """Test that the batched self-attention equals the per-head reference."""
        rng = np.random.default_rng(0)
        layer = MultiHeadSelfAttention(6, 3, rng)
        x = rng.normal(size=(2, 4, 6))

        out = layer.forward(x)

        for b in range(2):
            expected = multi_head(x[b], x[b], x[b], layer.heads())
            np.testing.assert_allclose(out[b], expected, atol=1e-12)

    def test_encoder_block_gradients(self):
        """Test the post-LN block backward pass against finite differences."""
        rng = np.random.default_rng(1)
        block = EncoderBlock(4, 2, 6, rng)
        x = rng.normal(size=(2, 3, 4))

        assert grad_check(block, _squared_loss, x) < 1e-4


class TestTokenizer:
    """Test field vocabularies and tokenisation."""

    def test_vocabulary_sizes(self):
        """Test that MASK and UNK are reserved ahead of levels or bins."""
        assert FieldVocabulary("c", "categorical", levels=("a", "b", "c", "d")).size == 6
        assert FieldVocabulary("x", "continuous", edges=(0.0, 1.0, 2.0)).size == 6

    def test_local_ids(self):
        """Test level lookup, right-closed binning and unknown values."""
        cat = FieldVocabulary("c", "categorical", levels=("a", "b"))
        num = FieldVocabulary("x", "continuous", edges=(1.0, 2.0))

        np.testing.assert_array_equal(cat.local_ids(pd.Series(["b", "zz"])), [3, UNK_LOCAL])
        np.testing.assert_array_equal(
            num.local_ids(pd.Series([0.5, 1.0, 1.5, 9.0, np.nan])), [2, 2, 3, 4, UNK_LOCAL]
        )

    def test_token_layout(self):
        """Test offsets, vocabulary size and MASK ids."""
        schema = TokenSchema((
            FieldVocabulary("c", "categorical", levels=("a", "b", "c", "d")),
            FieldVocabulary("x", "continuous", edges=(0.0, 1.0, 2.0)),
        ))

        np.testing.assert_array_equal(schema.offsets, [1, 7])
        assert schema.vocab_size == 13
        np.testing.assert_array_equal(schema.mask_ids, [CLS_ID, 1, 7])
        assert TokenSchema.from_dict(schema.to_dict()) == schema

    def test_fit_uses_fit_rows(self, synthetic_table):
        """Test that bin edges come from the given fit rows only."""
        frame, schema = synthetic_table.frame, synthetic_table.schema
        everything = fit_tokenizer(frame, schema, n_bins=4)
        first_rows = fit_tokenizer(frame, schema, fit_ids=synthetic_table.ids[:50], n_bins=4)

        assert len(everything.fields[0].edges) == 3
        assert everything.fields[0].edges != first_rows.fields[0].edges
        assert [f.name for f in everything.fields] == [c.name for c in schema.feature_columns]

    def test_tokens(self, tokenizer_and_corpus, synthetic_table):
        """Test that every token lies in its field's id range and CLS leads."""
        tokenizer, corpus = tokenizer_and_corpus
        offsets = tokenizer.offsets
        sizes = np.array([f.size for f in tokenizer.fields])

        assert (corpus.tokens[:, 0] == CLS_ID).all()
        assert (corpus.tokens[:, 1:] >= offsets).all()
        assert (corpus.tokens[:, 1:] < offsets + sizes).all()
        np.testing.assert_array_equal(corpus.ids, synthetic_table.ids)

    def test_missing_column_is_unknown(self, tokenizer_and_corpus, synthetic_table):
        """Test that an absent field tokenises to UNK."""
        tokenizer, _ = tokenizer_and_corpus
        frame = synthetic_table.frame.drop(columns=["cat_0"])

        tokens = tokenize_frame(frame, tokenizer)

        j = [f.name for f in tokenizer.fields].index("cat_0")
        assert (tokens[:, j + 1] == tokenizer.offsets[j] + UNK_LOCAL).all()

    def test_tokenize_row_matches_frame(self, tokenizer_and_corpus, synthetic_table):
        """Test that single-row tokenisation agrees with the batch path."""
        tokenizer, corpus = tokenizer_and_corpus
        row = synthetic_table.frame.iloc[7].to_dict()

        np.testing.assert_array_equal(tokenize_row(row, tokenizer), corpus.tokens[7])

    def test_corpus_shape_check(self, tokenizer_and_corpus):
        """Test that a token matrix of the wrong width is rejected."""
        tokenizer, corpus = tokenizer_and_corpus

        with pytest.raises(ShapeError):
            TokenizedCorpus(corpus.tokens[:, :3], corpus.ids, tokenizer)


class TestMasking:
    """Test masked-field selection."""

    @pytest.mark.parametrize("n_fields, rate, expected", [(14, 0.15, 2), (3, 0.15, 1), (4, 1.0, 4)])
    def test_mask_count(self, n_fields, rate, expected):
        """Test max(1, round(rate * F)) capped at F."""
        assert mask_count(n_fields, rate) == expected

    def test_masks_per_row(self, tokenizer_and_corpus):
        """Test that each row gets exactly k masks, CLS excluded, replaced by MASK ids."""
        tokenizer, corpus = tokenizer_and_corpus

        masked, mask = mask_fields(corpus.tokens, tokenizer, 0.3, seed=1, row_ids=corpus.ids)

        assert not mask[:, 0].any()
        assert (mask.sum(axis=1) == mask_count(tokenizer.n_fields, 0.3)).all()
        mask_ids = np.broadcast_to(tokenizer.mask_ids, masked.shape)
        np.testing.assert_array_equal(masked[mask], mask_ids[mask])
        np.testing.assert_array_equal(masked[~mask], corpus.tokens[~mask])

    def test_independent_of_row_order(self, tokenizer_and_corpus):
        """Test that masks depend on (row id, seed) only."""
        tokenizer, corpus = tokenizer_and_corpus
        perm = np.random.default_rng(0).permutation(len(corpus.ids))

        _, mask = mask_fields(corpus.tokens, tokenizer, 0.3, seed=(2, 0), row_ids=corpus.ids)
        _, shuffled = mask_fields(corpus.tokens[perm], tokenizer, 0.3, seed=(2, 0), row_ids=corpus.ids[perm])
        _, other_seed = mask_fields(corpus.tokens, tokenizer, 0.3, seed=(2, 1), row_ids=corpus.ids)

        np.testing.assert_array_equal(shuffled, mask[perm])
        assert not np.array_equal(mask, other_seed)

    def test_rejects_zero_rate(self, tokenizer_and_corpus):
        """Test that a zero mask rate is rejected."""
        tokenizer, corpus = tokenizer_and_corpus

        with pytest.raises(ValueError):
            mask_fields(corpus.tokens, tokenizer, 0.0)


class TestTransformerModel:
    """Test the full model and its training loop."""

    @pytest.mark.parametrize("pooling", ["cls", "mean"])
    def test_masked_field_gradients(self, tokenizer_and_corpus, pooling):
        """Test the end-to-end masked-field backward pass."""
        tokenizer, corpus = tokenizer_and_corpus
        config = TransformerConfig(d_model=4, n_heads=2, n_layers=1, d_ff=4, pooling=pooling)
        model = TransformerModel(tokenizer, config, np.random.default_rng(0))
        masked, mask = mask_fields(corpus.tokens[:4], tokenizer, 0.3, seed=0, row_ids=corpus.ids[:4])
        targets = corpus.local_targets()[:4]

        def loss_fn(model, tokens):
            H = model.encode(tokens)
            loss, dH = model.mlm_step(H, targets, mask)
            h = model.pool(H)
            loss += 0.5 * float((h**2).sum())
            model.encode_backward(dH + model.pool_backward(h, H.shape))
            return loss

        assert grad_check(model, loss_fn, masked) < 1e-4

    def test_training(self, tokenizer_and_corpus):
        """Test that masked-field loss falls and embeddings have d_model columns."""
        _, corpus = tokenizer_and_corpus

        model = train_transformer_mlm(corpus, TINY)

        assert model.trained
        assert len(model.loss_curve) == TINY.epochs
        assert model.loss_curve[-1] < model.loss_curve[0]
        assert model.embed(corpus.tokens).shape == (len(corpus.ids), TINY.d_model)
        assert 0.0 <= masked_field_accuracy(model, corpus) <= 1.0

    def test_deterministic_in_seed(self, tokenizer_and_corpus):
        """Test that the same seed gives identical embeddings."""
        _, corpus = tokenizer_and_corpus
        config = TransformerConfig(d_model=8, n_heads=2, n_layers=1, d_ff=8, epochs=1, batch_size=64)

        a = train_transformer_mlm(corpus, config).embed(corpus.tokens)
        b = train_transformer_mlm(corpus, config).embed(corpus.tokens)

        np.testing.assert_array_equal(a, b)

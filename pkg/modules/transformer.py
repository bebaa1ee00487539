"""
Tabular transformer embedding generator
Each row becomes a [CLS] token followed by one token per feature field.
Categorical fields map levels to private vocabularies; continuous fields are
quantile-binned on training rows. A stack of post-LN encoder blocks is trained
with masked-field modelling and the pooled [CLS] vector is the row embedding.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from data.schema import FeatureSchema
from modules.errors import DivergenceError, ShapeError
from modules.nncore import (
    Adam,
    Dense,
    Embedding,
    LayerNorm,
    Module,
    cross_entropy_logit_grad,
    init_weight,
    loss_cross_entropy,
    softmax,
    softmax_backward,
)
from modules.separation import SeparationConfig, build_head

logger = logging.getLogger(__name__)

CLS_ID = 0
MASK_LOCAL = 0
UNK_LOCAL = 1
RESERVED_LOCAL = 2


# ---------------------------------------------------------------- attention

def attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes"""
    d_k = Q.shape[-1]
    if d_k == 0:
        raise ShapeError("attention requires d_k > 0")
    if K.shape[-1] != d_k:
        raise ShapeError(f"query width {d_k} does not match key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    scores = Q @ np.swapaxes(K, -1, -2) / np.sqrt(d_k)
    return softmax(scores) @ V


@dataclass
class HeadProjections:
    """Per-head W^Q, W^K, W^V (d_model x d_k) and the output projection W^O"""

    W_Q: list[np.ndarray]
    W_K: list[np.ndarray]
    W_V: list[np.ndarray]
    W_O: np.ndarray

    def __post_init__(self) -> None:
        if not (len(self.W_Q) == len(self.W_K) == len(self.W_V)) or not self.W_Q:
            raise ShapeError("every head needs a query, key and value projection")
        width = sum(w.shape[1] for w in self.W_V)
        if self.W_O.shape[0] != width:
            raise ShapeError(f"W_O has {self.W_O.shape[0]} rows, heads concatenate to {width}")

    @classmethod
    def create(cls, d_model: int, n_heads: int, rng: np.random.Generator) -> HeadProjections:
        if n_heads <= 0 or d_model % n_heads:
            raise ShapeError(f"{n_heads} heads do not divide model width {d_model}")
        d_k = d_model // n_heads
        draw = lambda: init_weight(rng, d_k, d_model, "identity").T  # noqa: E731
        return cls(
            W_Q=[draw() for _ in range(n_heads)],
            W_K=[draw() for _ in range(n_heads)],
            W_V=[draw() for _ in range(n_heads)],
            W_O=init_weight(rng, d_model, d_model, "identity").T,
        )


def multi_head(Q: np.ndarray, K: np.ndarray, V: np.ndarray, heads: HeadProjections) -> np.ndarray:
    """Concat(head_1..head_h) W^O with head_i = attention(Q W^Q_i, K W^K_i, V W^V_i)"""
    outputs = [
        attention(Q @ wq, K @ wk, V @ wv)
        for wq, wk, wv in zip(heads.W_Q, heads.W_K, heads.W_V)
    ]
    return np.concatenate(outputs, axis=-1) @ heads.W_O


class MultiHeadSelfAttention(Module):
    """Batched self-attention; head i owns columns [i*d_k, (i+1)*d_k) of each projection"""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if n_heads <= 0 or d_model % n_heads:
            raise ShapeError(f"{n_heads} heads do not divide model width {d_model}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_k = d_model // n_heads
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            self.add_param(name, init_weight(rng, d_model, d_model, "identity").T)
        self._cache: dict[str, np.ndarray] | None = None

    def heads(self) -> HeadProjections:
        cols = [slice(i * self.d_k, (i + 1) * self.d_k) for i in range(self.n_heads)]
        p = self.params
        return HeadProjections(
            W_Q=[p["W_Q"][:, c] for c in cols],
            W_K=[p["W_K"][:, c] for c in cols],
            W_V=[p["W_V"][:, c] for c in cols],
            W_O=p["W_O"],
        )

    def _split(self, x: np.ndarray) -> np.ndarray:
        B, T, _ = x.shape
        return x.reshape(B, T, self.n_heads, self.d_k).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        B, _, T, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, self.d_model)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise ShapeError(f"expected (batch, tokens, {self.d_model}), got {x.shape}")
        p = self.params
        q, k, v = (self._split(x @ p[n]) for n in ("W_Q", "W_K", "W_V"))
        a = softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.d_k))
        concat = self._merge(a @ v)
        self._cache = {"x": x, "q": q, "k": k, "v": v, "a": a, "concat": concat}
        return concat @ p["W_O"]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        assert self._cache is not None, "backward called before forward"
        c, p, d = self._cache, self.params, self.d_model
        self.grads["W_O"] += c["concat"].reshape(-1, d).T @ dout.reshape(-1, d)
        do = self._split(dout @ p["W_O"].T)
        da = do @ c["v"].transpose(0, 1, 3, 2)
        dv = c["a"].transpose(0, 1, 3, 2) @ do
        dscores = softmax_backward(c["a"], da) / np.sqrt(self.d_k)
        dq = dscores @ c["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"]

        x2 = c["x"].reshape(-1, d)
        dx = np.zeros_like(c["x"])
        for name, dpart in (("W_Q", dq), ("W_K", dk), ("W_V", dv)):
            merged = self._merge(dpart)
            self.grads[name] += x2.T @ merged.reshape(-1, d)
            dx += merged @ p[name].T
        return dx


class EncoderBlock(Module):
    """Post-LN block: x1 = LN(x + MHA(x)); out = LN(x1 + FFN(x1))"""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.attn = self.add_child("attn", MultiHeadSelfAttention(d_model, n_heads, rng))
        self.ln1 = self.add_child("ln1", LayerNorm(d_model))
        self.ff1 = self.add_child("ff1", Dense(d_model, d_ff, "gelu", rng))
        self.ff2 = self.add_child("ff2", Dense(d_ff, d_model, "identity", rng))
        self.ln2 = self.add_child("ln2", LayerNorm(d_model))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x1 = self.ln1.forward(x + self.attn.forward(x))
        return self.ln2.forward(x1 + self.ff2.forward(self.ff1.forward(x1)))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dsum2 = self.ln2.backward(dout)
        dx1 = dsum2 + self.ff1.backward(self.ff2.backward(dsum2))
        dsum1 = self.ln1.backward(dx1)
        return dsum1 + self.attn.backward(dsum1)


# ---------------------------------------------------------------- tokenizer

@dataclass(frozen=True)
class FieldVocabulary:
    """Private vocabulary of one field: MASK, UNK, then levels or quantile bins"""

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    edges: tuple[float, ...] = ()

    @property
    def size(self) -> int:
        body = len(self.levels) if self.kind == "categorical" else len(self.edges) + 1
        return RESERVED_LOCAL + body

    def local_ids(self, values: pd.Series) -> np.ndarray:
        if self.kind == "categorical":
            lookup = {level: RESERVED_LOCAL + i for i, level in enumerate(self.levels)}
            return values.astype(object).map(lookup).fillna(UNK_LOCAL).to_numpy(dtype=np.int64)
        numeric = pd.to_numeric(values, errors="coerce").to_numpy(dtype=np.float64)
        # right-closed bins: a value on an edge belongs to the lower bin
        bins = np.searchsorted(np.asarray(self.edges), numeric, side="left") + RESERVED_LOCAL
        return np.where(np.isfinite(numeric), bins, UNK_LOCAL).astype(np.int64)


@dataclass(frozen=True)
class TokenSchema:
    """Global token layout: id 0 is [CLS], then each field's vocabulary in order"""

    fields: tuple[FieldVocabulary, ...]

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def offsets(self) -> np.ndarray:
        sizes = [f.size for f in self.fields]
        return 1 + np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)

    @property
    def vocab_size(self) -> int:
        return 1 + sum(f.size for f in self.fields)

    @property
    def mask_ids(self) -> np.ndarray:
        """Per position: the MASK id of that field, CLS for position 0"""
        return np.concatenate([[CLS_ID], self.offsets + MASK_LOCAL])

    def to_dict(self) -> dict[str, Any]:
        return {
            "fields": [
                {"name": f.name, "kind": f.kind, "levels": list(f.levels), "edges": list(f.edges)}
                for f in self.fields
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TokenSchema:
        return cls(tuple(
            FieldVocabulary(f["name"], f["kind"], tuple(f["levels"]), tuple(float(e) for e in f["edges"]))
            for f in data["fields"]
        ))


def fit_tokenizer(
    frame: pd.DataFrame,
    schema: FeatureSchema,
    fit_ids: np.ndarray | None = None,
    n_bins: int = 10,
) -> TokenSchema:
    """Build field vocabularies; bin edges are quantiles of the fit rows"""
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    fit = frame if fit_ids is None else frame.loc[np.asarray(fit_ids)]
    quantiles = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    fields = []
    for spec in schema.feature_columns:
        if spec.kind == "categorical":
            fields.append(FieldVocabulary(spec.name, "categorical", levels=tuple(spec.vocabulary)))
        else:
            values = pd.to_numeric(fit[spec.name], errors="coerce").dropna().to_numpy(dtype=np.float64)
            edges = tuple(float(e) for e in np.quantile(values, quantiles)) if len(values) else ()
            fields.append(FieldVocabulary(spec.name, "continuous", edges=edges))
    return TokenSchema(tuple(fields))


def tokenize_frame(frame: pd.DataFrame, tokenizer: TokenSchema) -> np.ndarray:
    """Token matrix (rows x 1 + fields) with [CLS] in column 0"""
    tokens = np.empty((len(frame), tokenizer.n_fields + 1), dtype=np.int64)
    tokens[:, 0] = CLS_ID
    for j, (vocab, offset) in enumerate(zip(tokenizer.fields, tokenizer.offsets)):
        if vocab.name in frame.columns:
            local = vocab.local_ids(frame[vocab.name])
        else:
            local = np.full(len(frame), UNK_LOCAL, dtype=np.int64)
        tokens[:, j + 1] = offset + local
    return tokens


def tokenize_row(row: Mapping[str, Any], tokenizer: TokenSchema) -> np.ndarray:
    return tokenize_frame(pd.DataFrame([dict(row)]), tokenizer)[0]


@dataclass
class TokenizedCorpus:
    tokens: np.ndarray
    ids: np.ndarray
    tokenizer: TokenSchema

    def __post_init__(self) -> None:
        if self.tokens.shape != (len(self.ids), self.tokenizer.n_fields + 1):
            raise ShapeError(f"token matrix {self.tokens.shape} does not match {len(self.ids)} rows")

    def local_targets(self) -> np.ndarray:
        return self.tokens[:, 1:] - self.tokenizer.offsets[None, :]


def build_corpus(frame: pd.DataFrame, tokenizer: TokenSchema) -> TokenizedCorpus:
    return TokenizedCorpus(
        tokens=tokenize_frame(frame, tokenizer),
        ids=frame.index.to_numpy(dtype=np.int64),
        tokenizer=tokenizer,
    )


# ---------------------------------------------------------------- masking

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def _field_keys(seed: int | Sequence[int], row_ids: np.ndarray, n_fields: int) -> np.ndarray:
    state = np.zeros(1, dtype=np.uint64)
    for part in np.atleast_1d(np.asarray(seed, dtype=np.int64)):
        state = _mix64(state ^ np.uint64(int(part) & 0xFFFFFFFFFFFFFFFF))
    rows = _mix64(state ^ np.asarray(row_ids, dtype=np.int64).astype(np.uint64))
    return _mix64(rows[:, None] ^ np.arange(n_fields, dtype=np.uint64)[None, :])


def mask_count(n_fields: int, rate: float) -> int:
    return min(n_fields, max(1, round(rate * n_fields)))


def mask_fields(
    tokens: np.ndarray,
    tokenizer: TokenSchema,
    rate: float = 0.15,
    seed: int | Sequence[int] = 0,
    row_ids: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Replace max(1, round(rate * F)) fields per row with that field's MASK token.

    The chosen fields depend only on (row id, seed), never on row order.
    Returns the masked tokens and a boolean mask over all positions ([CLS] never masked).
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"mask rate must be in (0, 1], got {rate}")
    n, width = tokens.shape
    F = tokenizer.n_fields
    if width != F + 1:
        raise ShapeError(f"tokens have {width} positions, tokenizer expects {F + 1}")
    row_ids = np.arange(n) if row_ids is None else np.asarray(row_ids)
    k = mask_count(F, rate)
    chosen = np.argsort(_field_keys(seed, row_ids, F), axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, F + 1), dtype=bool)
    mask[np.arange(n)[:, None], chosen + 1] = True
    masked = np.where(mask, tokenizer.mask_ids[None, :], tokens)
    return masked, mask


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 48
    n_heads: int = 6
    n_layers: int = 3
    d_ff: int = 128
    n_bins: int = 10
    mask_rate: float = 0.15
    pooling: str = "cls"
    use_field_embeddings: bool = True
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    separation: SeparationConfig = field(default_factory=SeparationConfig)

    def __post_init__(self) -> None:
        if self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ShapeError(f"{self.n_heads} heads do not divide model width {self.d_model}")
        if self.pooling not in ("cls", "mean"):
            raise ValueError(f"pooling must be 'cls' or 'mean', got {self.pooling}")
        if not 0.0 < self.mask_rate <= 1.0:
            raise ValueError(f"mask_rate must be in (0, 1], got {self.mask_rate}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


class TransformerModel(Module):
    def __init__(self, tokenizer: TokenSchema, config: TransformerConfig, rng: np.random.Generator):
        super().__init__()
        d = config.d_model
        self.tokenizer = tokenizer
        self.config = config
        self.token_embedding = self.add_child("tok", Embedding(tokenizer.vocab_size, d, rng))
        self.field_embedding = (
            self.add_child("field", Embedding(tokenizer.n_fields + 1, d, rng))
            if config.use_field_embeddings else None
        )
        self.blocks = [
            self.add_child(f"block{i}", EncoderBlock(d, config.n_heads, config.d_ff, rng))
            for i in range(config.n_layers)
        ]
        self.mlm_hidden = self.add_child("mlm_hidden", Dense(d, d, "gelu", rng))
        self.mlm_out = [
            self.add_child(f"mlm_out{j}", Dense(d, vocab.size, "identity", rng))
            for j, vocab in enumerate(tokenizer.fields)
        ]
        self.loss_curve: list[float] = []
        self.trained = False

    # encoder
    def encode(self, tokens: np.ndarray) -> np.ndarray:
        x = self.token_embedding.forward(tokens)
        if self.field_embedding is not None:
            positions = np.broadcast_to(np.arange(tokens.shape[1]), tokens.shape)
            x = x + self.field_embedding.forward(positions)
        for block in self.blocks:
            x = block.forward(x)
        return x

    def encode_backward(self, dH: np.ndarray) -> None:
        for block in reversed(self.blocks):
            dH = block.backward(dH)
        self.token_embedding.backward(dH)
        if self.field_embedding is not None:
            self.field_embedding.backward(dH)

    def pool(self, H: np.ndarray) -> np.ndarray:
        return H[:, 0, :] if self.config.pooling == "cls" else H[:, 1:, :].mean(axis=1)

    def pool_backward(self, dh: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        dH = np.zeros(shape)
        if self.config.pooling == "cls":
            dH[:, 0, :] = dh
        else:
            dH[:, 1:, :] = dh[:, None, :] / (shape[1] - 1)
        return dH

    # masked-field head
    def field_probabilities(self, H: np.ndarray) -> list[np.ndarray]:
        u = self.mlm_hidden.forward(H[:, 1:, :])
        return [softmax(out.forward(u[:, j, :])) for j, out in enumerate(self.mlm_out)]

    def mlm_step(self, H: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
        """Cross-entropy over masked fields; accumulates head gradients, returns (loss, dH)"""
        probs = self.field_probabilities(H)
        field_mask = mask[:, 1:]
        normalizer = float(field_mask.sum())
        loss = 0.0
        du = np.zeros((H.shape[0], self.tokenizer.n_fields, H.shape[2]))
        for j, (p, out) in enumerate(zip(probs, self.mlm_out)):
            onehot = np.eye(p.shape[1])[targets[:, j]]
            loss += loss_cross_entropy(p, onehot, field_mask[:, j], normalizer)
            du[:, j, :] = out.backward(cross_entropy_logit_grad(p, onehot, field_mask[:, j], normalizer))
        dH = np.zeros_like(H)
        dH[:, 1:, :] = self.mlm_hidden.backward(du)
        return loss, dH

    def embed(self, tokens: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        out = [self.pool(self.encode(tokens[i:i + batch_size])) for i in range(0, len(tokens), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.d_model))


def masked_field_accuracy(model: TransformerModel, corpus: TokenizedCorpus, seed: int = 0) -> float:
    """Share of masked fields whose argmax prediction equals the true local id"""
    masked, mask = mask_fields(corpus.tokens, corpus.tokenizer, model.config.mask_rate, seed, corpus.ids)
    probs = model.field_probabilities(model.encode(masked))
    targets = corpus.local_targets()
    hits = total = 0
    for j, p in enumerate(probs):
        rows = mask[:, j + 1]
        hits += int((p[rows].argmax(axis=1) == targets[rows, j]).sum())
        total += int(rows.sum())
    return hits / total if total else 0.0


def train_transformer_mlm(
    corpus: TokenizedCorpus, config: TransformerConfig, y: np.ndarray | None = None
) -> TransformerModel:
    """Masked-field modelling with fresh masks each epoch, plus optional separation KL"""
    rng = np.random.default_rng(config.seed)
    model = TransformerModel(corpus.tokenizer, config, rng)
    optimizer = Adam(model, lr=config.lr)
    head = None
    if y is not None and config.separation.enabled:
        y = np.asarray(y, dtype=np.int64)
        head = build_head(config.d_model, config.separation, config.seed, y)

    targets = corpus.local_targets()
    n = len(corpus.ids)
    logger.info(
        "Training transformer: %d rows, %d fields, vocab %d, %d parameters",
        n, corpus.tokenizer.n_fields, corpus.tokenizer.vocab_size, model.n_parameters(),
    )
    for epoch in range(config.epochs):
        masked, mask = mask_fields(corpus.tokens, corpus.tokenizer, config.mask_rate,
                                   (config.seed, epoch), corpus.ids)
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            optimizer.zero_grad()
            H = model.encode(masked[idx])
            loss, dH = model.mlm_step(H, targets[idx], mask[idx])
            if head is not None:
                kl, dh = head.confusion_step(model.pool(H), y[idx])
                loss += config.separation.beta * kl
                dH += model.pool_backward(dh, H.shape)
            model.encode_backward(dH)
            optimizer.step()
            total += loss * len(idx)

        epoch_loss = total / max(n, 1)
        if not np.isfinite(epoch_loss):
            raise DivergenceError("transformer", epoch)
        model.loss_curve.append(epoch_loss)
        logger.debug("transformer epoch %d masked-field loss %.5f", epoch, epoch_loss)

    model.trained = True
    logger.info("Trained transformer for %d epochs, final loss %.5f", config.epochs, model.loss_curve[-1])
    return model

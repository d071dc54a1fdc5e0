"""Token encoder: embeddings plus a stack of Transformer blocks.

``encode`` keeps every intermediate layer because the span encoder consumes
the full stack, not just the top. Blocks take explicit query/key/value
inputs; self-attention is the special case of passing the same matrix three
times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .errors import BoundsError, ConfigError, ShapeError


@dataclass
class EmbeddingLayer:
    token_table: Tensor  # (V, d)
    position_table: Tensor  # (T_max, d)
    dropout_p: float = 0.0

    def named(self, prefix: str = "embed") -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.token_table", self.token_table),
            (f"{prefix}.position_table", self.position_table),
        ]


@dataclass
class TransformerBlockParams:
    """One block: multi-head attention, FFN, and two layer norms.

    Query/key/value/output projections are bias-free d x d matrices split
    into heads by column; the FFN carries biases.
    """

    n_heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        fields = (
            "wq", "wk", "wv", "wo",
            "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
            "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
        )
        return [(f"{prefix}.{name}", getattr(self, name)) for name in fields]


@dataclass
class EncoderTrace:
    """Layer stack H^0 .. H^L, each (T, d). layers[0] is the embedding output."""

    layers: list[Tensor]

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    @property
    def top(self) -> Tensor:
        return self.layers[-1]


def new_embedding(
    rng: RngState,
    vocab_size: int,
    hidden_size: int,
    max_position: int,
    dropout_p: float = 0.0,
) -> EmbeddingLayer:
    return EmbeddingLayer(
        token_table=Tensor(rng.normal((vocab_size, hidden_size), std=0.02), requires_grad=True),
        position_table=Tensor(rng.normal((max_position, hidden_size), std=0.02), requires_grad=True),
        dropout_p=dropout_p,
    )


def new_block_params(
    rng: RngState, hidden_size: int, ffn_size: int, n_heads: int
) -> TransformerBlockParams:
    d = hidden_size
    if d % n_heads != 0:
        raise ConfigError(f"hidden size {d} not divisible by {n_heads} heads")

    def proj() -> Tensor:
        return Tensor(rng.normal((d, d), std=0.02), requires_grad=True)

    return TransformerBlockParams(
        n_heads=n_heads,
        wq=proj(),
        wk=proj(),
        wv=proj(),
        wo=proj(),
        ffn_w1=Tensor(rng.normal((d, ffn_size), std=0.02), requires_grad=True),
        ffn_b1=Tensor(np.zeros(ffn_size), requires_grad=True),
        ffn_w2=Tensor(rng.normal((ffn_size, d), std=0.02), requires_grad=True),
        ffn_b2=Tensor(np.zeros(d), requires_grad=True),
        ln1_gain=Tensor(np.ones(d), requires_grad=True),
        ln1_bias=Tensor(np.zeros(d), requires_grad=True),
        ln2_gain=Tensor(np.ones(d), requires_grad=True),
        ln2_bias=Tensor(np.zeros(d), requires_grad=True),
    )


def embed(
    layer: EmbeddingLayer,
    token_ids: list[int],
    *,
    training: bool = False,
    rng: RngState | None = None,
) -> Tensor:
    """Token plus position rows, then dropout: the H^0 input to the stack."""
    n = len(token_ids)
    if n == 0:
        raise BoundsError("cannot embed an empty token sequence")
    if n > layer.position_table.shape[0]:
        raise BoundsError(
            f"sequence length {n} exceeds position table with "
            f"{layer.position_table.shape[0]} rows"
        )
    tokens = ad.embedding_lookup(layer.token_table, token_ids)
    positions = ad.slice_rows(layer.position_table, 0, n)
    return ad.dropout(ad.add(tokens, positions), layer.dropout_p, training, rng)


def _head_slices(p: TransformerBlockParams, x: Tensor, w: Tensor) -> list[Tensor]:
    projected = ad.matmul(x, w)
    d = projected.shape[1]
    dh = d // p.n_heads
    return [ad.slice_cols(projected, h * dh, (h + 1) * dh) for h in range(p.n_heads)]


def multi_head_attention(
    p: TransformerBlockParams, queries: Tensor, keys: Tensor, values: Tensor
) -> Tensor:
    """Scaled dot-product attention per head, concatenated and projected.

    Query and key/value row counts may differ; every query row attends to
    all key rows (no masking).
    """
    if queries.shape[0] < 1 or keys.shape[0] < 1:
        raise ShapeError("attention requires at least one query and one key row")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(
            f"keys and values must have equal row counts: {keys.shape} vs {values.shape}"
        )
    dh = queries.shape[1] // p.n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    q_heads = _head_slices(p, queries, p.wq)
    k_heads = _head_slices(p, keys, p.wk)
    v_heads = _head_slices(p, values, p.wv)
    outputs = []
    for qh, kh, vh in zip(q_heads, k_heads, v_heads):
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt)
        weights = ad.softmax(scores, axis=1)
        outputs.append(ad.matmul(weights, vh))
    return ad.matmul(ad.concat(outputs, axis=1), p.wo)


def windowed_multi_head_attention(
    p: TransformerBlockParams, queries: Tensor, tokens: Tensor, width: int
) -> Tensor:
    """Attention where query row i sees only token rows i .. i+width-1.

    ``queries`` has T-width+1 rows against a (T, d) token matrix. This is
    the batched equivalent of running full attention per row on the
    corresponding token slice; scores are assembled per window offset, so
    keys outside a row's window are structurally absent.
    """
    m = queries.shape[0]
    t = tokens.shape[0]
    if width < 1 or m != t - width + 1:
        raise ShapeError(
            f"windowed attention needs T-width+1 query rows: "
            f"{m} queries, {t} tokens, width {width}"
        )
    dh = queries.shape[1] // p.n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    q_heads = _head_slices(p, queries, p.wq)
    k_heads = _head_slices(p, tokens, p.wk)
    v_heads = _head_slices(p, tokens, p.wv)
    outputs = []
    for qh, kh, vh in zip(q_heads, k_heads, v_heads):
        cols = [
            ad.sum_(ad.mul(qh, ad.slice_rows(kh, j, j + m)), axis=1, keepdims=True)
            for j in range(width)
        ]
        scores = ad.scale(ad.concat(cols, axis=1), inv_sqrt)
        weights = ad.softmax(scores, axis=1)
        terms = [
            ad.mul(ad.slice_cols(weights, j, j + 1), ad.slice_rows(vh, j, j + m))
            for j in range(width)
        ]
        outputs.append(ad.add_n(terms))
    return ad.matmul(ad.concat(outputs, axis=1), p.wo)


def _finish_block(
    p: TransformerBlockParams,
    queries: Tensor,
    attended: Tensor,
    *,
    eps: float,
    dropout_p: float,
    training: bool,
    rng: RngState | None,
) -> Tensor:
    attended = ad.dropout(attended, dropout_p, training, rng)
    a = ad.layer_norm(ad.add(queries, attended), p.ln1_gain, p.ln1_bias, eps)
    hidden = ad.relu(ad.add(ad.matmul(a, p.ffn_w1), p.ffn_b1))
    f = ad.add(ad.matmul(hidden, p.ffn_w2), p.ffn_b2)
    f = ad.dropout(f, dropout_p, training, rng)
    return ad.layer_norm(ad.add(a, f), p.ln2_gain, p.ln2_bias, eps)


def transformer_block(
    p: TransformerBlockParams,
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    *,
    eps: float = 1e-5,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: RngState | None = None,
) -> Tensor:
    """Attention and FFN sublayers, each with residual then layer norm."""
    attended = multi_head_attention(p, queries, keys, values)
    return _finish_block(
        p, queries, attended, eps=eps, dropout_p=dropout_p, training=training, rng=rng
    )


def windowed_transformer_block(
    p: TransformerBlockParams,
    queries: Tensor,
    tokens: Tensor,
    width: int,
    *,
    eps: float = 1e-5,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: RngState | None = None,
) -> Tensor:
    """Block variant whose attention is windowed; structure is unchanged."""
    attended = windowed_multi_head_attention(p, queries, tokens, width)
    return _finish_block(
        p, queries, attended, eps=eps, dropout_p=dropout_p, training=training, rng=rng
    )


def encode(
    embed_out: Tensor,
    blocks: list[TransformerBlockParams],
    *,
    eps: float = 1e-5,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: RngState | None = None,
) -> EncoderTrace:
    """Self-attention stack retaining every layer H^0 .. H^L."""
    layers = [embed_out]
    h = embed_out
    for block in blocks:
        h = transformer_block(
            block, h, h, h, eps=eps, dropout_p=dropout_p, training=training, rng=rng
        )
        layers.append(h)
    return EncoderTrace(layers=layers)

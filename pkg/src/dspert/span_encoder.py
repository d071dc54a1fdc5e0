"""Per-width span encoders over the token layer stack.

For each width k in 2..K, span representations start from a shallow
aggregation of an early token layer and are then refined by Transformer
blocks whose queries are the span vectors and whose keys/values are the
layer-matched token rows of that very span. Width-1 spans reuse the top
token representations directly.

With depth 0 the whole thing degenerates to shallow aggregation of the top
token layer, which is exactly the shallow baseline family.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .encoder import (
    EncoderTrace,
    TransformerBlockParams,
    windowed_transformer_block,
)
from .errors import ConfigError, ContractError, UnsupportedSpanError

AGGREGATION_KINDS = ("max", "mean", "mul_attention", "add_attention")


@dataclass
class SpanEncoderConfig:
    max_span_size: int  # K
    depth: int  # number of span Transformer layers
    init_aggregation: str = "max"
    share_weights: bool = False
    per_width_params: bool = False

    def validate(self, encoder_depth: int) -> None:
        if self.max_span_size < 2:
            raise ConfigError(
                f"maximum span size must be >= 2, got {self.max_span_size}"
            )
        if not 0 <= self.depth <= encoder_depth:
            raise ConfigError(
                f"span depth {self.depth} outside [0, {encoder_depth}]"
            )
        if self.init_aggregation not in AGGREGATION_KINDS:
            raise ConfigError(
                f"unknown aggregation {self.init_aggregation!r}; "
                f"expected one of {AGGREGATION_KINDS}"
            )
        if self.share_weights and self.per_width_params:
            raise ConfigError("share_weights and per_width_params are exclusive")


@dataclass
class AggregatorParams:
    """Learnable state for the attention-style initial aggregators.

    Pooling kinds carry no parameters; one parameter set is shared across
    all widths.
    """

    kind: str
    w: Tensor | None = None
    u: Tensor | None = None
    v: Tensor | None = None

    def named(self, prefix: str = "agg") -> list[tuple[str, Tensor]]:
        out = []
        for name in ("w", "u", "v"):
            t = getattr(self, name)
            if t is not None:
                out.append((f"{prefix}.{name}", t))
        return out


def new_aggregator_params(rng: RngState, kind: str, hidden_size: int) -> AggregatorParams:
    d = hidden_size
    if kind in ("max", "mean"):
        return AggregatorParams(kind=kind)
    if kind == "mul_attention":
        return AggregatorParams(
            kind=kind,
            w=Tensor(rng.normal((d, d), std=0.02), requires_grad=True),
            u=Tensor(rng.normal((1, d), std=0.02), requires_grad=True),
        )
    if kind == "add_attention":
        return AggregatorParams(
            kind=kind,
            w=Tensor(rng.normal((d, 2 * d), std=0.02), requires_grad=True),
            u=Tensor(rng.normal((1, d), std=0.02), requires_grad=True),
            v=Tensor(rng.normal((1, d), std=0.02), requires_grad=True),
        )
    raise ConfigError(f"unknown aggregation kind {kind!r}")


@dataclass
class SpanEncoderParams:
    """Block parameters keyed by token layer index (1-based), plus the
    aggregator. When widths do not share blocks the key is (width, layer).
    With weight sharing the dict simply aliases the token blocks."""

    blocks: dict = field(default_factory=dict)
    agg: AggregatorParams | None = None

    def block_for(self, width: int, layer: int, per_width: bool) -> TransformerBlockParams:
        key = (width, layer) if per_width else layer
        return self.blocks[key]


@dataclass
class SpanTrace:
    """Per-width stacks S^{start,k} .. S^{L,k}; row i of a width-k tensor is
    the span (i, i+k). Widths wider than the sentence have zero-row stacks."""

    start_layer: int
    stacks: dict[int, list[Tensor]]

    def top(self, width: int) -> Tensor:
        return self.stacks[width][-1]


def _window_slices(h: Tensor, width: int) -> list[Tensor]:
    m = h.shape[0] - width + 1
    return [ad.slice_rows(h, j, j + m) for j in range(width)]


def init_aggregate(
    h: Tensor,
    width: int,
    kind: str,
    params: AggregatorParams | None = None,
) -> Tensor:
    """Shallow aggregation of every width-k token window of ``h``.

    Row i of the result aggregates rows i .. i+width-1. Attention kinds
    compute data-dependent weights over each window using the shared
    aggregator parameters.
    """
    t = h.shape[0]
    if not 2 <= width <= t:
        raise ContractError(f"aggregation width {width} invalid for {t} rows")
    slices = _window_slices(h, width)
    if kind == "max":
        out = slices[0]
        for s in slices[1:]:
            out = ad.maximum(out, s)
        return out
    if kind == "mean":
        return ad.scale(ad.add_n(slices), 1.0 / width)
    if kind in ("mul_attention", "add_attention"):
        if params is None or params.w is None or params.u is None:
            raise ContractError(f"{kind} aggregation requires aggregator parameters")
        m = t - width + 1
        cols = []
        for s in slices:
            x = s
            if kind == "add_attention":
                tile = ad.add(Tensor(np.zeros((m, params.v.shape[1]))), params.v)
                x = ad.concat([s, tile], axis=1)
            scores = ad.matmul(params.u, ad.tanh(ad.matmul(params.w, ad.transpose(x))))
            cols.append(ad.transpose(scores))
        weights = ad.softmax(ad.concat(cols, axis=1), axis=1)
        terms = [
            ad.mul(ad.slice_cols(weights, j, j + 1), slices[j])
            for j in range(width)
        ]
        return ad.add_n(terms)
    raise ConfigError(f"unknown aggregation kind {kind!r}")


def span_block(
    p: TransformerBlockParams,
    s_prev: Tensor,
    token_slice: Tensor,
    *,
    eps: float = 1e-5,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: RngState | None = None,
) -> Tensor:
    """One span Transformer step for a single span.

    The query is the 1 x d span vector; keys and values are the k token
    rows of that span at the previous layer. Structurally identical to a
    token block; ``encode_spans`` runs the batched windowed equivalent.
    """
    width = token_slice.shape[0]
    return windowed_transformer_block(
        p, s_prev, token_slice, width,
        eps=eps, dropout_p=dropout_p, training=training, rng=rng,
    )


def encode_spans(
    trace: EncoderTrace,
    cfg: SpanEncoderConfig,
    params: SpanEncoderParams,
    *,
    eps: float = 1e-5,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: RngState | None = None,
) -> SpanTrace:
    """Build every width's span stack from the token trace.

    Width k starts from aggregation of token layer L - depth and applies
    one windowed block per remaining layer, with keys/values taken from
    the matching token layer below.
    """
    encoder_depth = trace.depth
    cfg.validate(encoder_depth)
    t = trace.layers[0].shape[0]
    d = trace.layers[0].shape[1]
    start = encoder_depth - cfg.depth
    stacks: dict[int, list[Tensor]] = {}
    for width in range(2, cfg.max_span_size + 1):
        if width > t:
            stacks[width] = [Tensor(np.zeros((0, d))) for _ in range(cfg.depth + 1)]
            continue
        s = init_aggregate(trace.layers[start], width, cfg.init_aggregation, params.agg)
        stack = [s]
        for layer in range(start + 1, encoder_depth + 1):
            block = params.block_for(width, layer, cfg.per_width_params)
            s = windowed_transformer_block(
                block, s, trace.layers[layer - 1], width,
                eps=eps, dropout_p=dropout_p, training=training, rng=rng,
            )
            stack.append(s)
        stacks[width] = stack
    return SpanTrace(start_layer=start, stacks=stacks)


def span_representation(
    trace: EncoderTrace, spans: SpanTrace, i: int, j: int
) -> Tensor:
    """Top representation of span (i, j), end-exclusive, as a 1 x d row.

    Width 1 borrows the top token representation directly; wider spans
    read the top of their width's stack.
    """
    t = trace.layers[0].shape[0]
    if not 0 <= i < j <= t:
        raise ContractError(f"span ({i}, {j}) invalid for {t} tokens")
    width = j - i
    if width == 1:
        return ad.slice_rows(trace.top, i, i + 1)
    if width not in spans.stacks:
        raise UnsupportedSpanError(
            f"span ({i}, {j}) has width {width}, beyond the maximum span size"
        )
    return ad.slice_rows(spans.top(width), i, i + 1)


def candidate_widths(n_tokens: int, max_span_size: int) -> range:
    """Widths that have at least one candidate span in a sentence."""
    return range(1, min(max_span_size, n_tokens) + 1)


def count_candidates(n_tokens: int, max_span_size: int) -> int:
    return sum(n_tokens - k + 1 for k in candidate_widths(n_tokens, max_span_size))

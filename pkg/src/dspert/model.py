"""Full model assembly: configuration, parameter registry, forward pass,
and span prediction.

Head kinds select between the deep span encoder, its shallow-aggregation
degenerations (depth 0 over the top token layer), and the biaffine decoder
that reads only start/end token projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .encoder import (
    EmbeddingLayer,
    EncoderTrace,
    TransformerBlockParams,
    embed,
    encode,
    new_block_params,
    new_embedding,
)
from .errors import ConfigError, ShapeError
from .heads import (
    BiaffineHead,
    BiLstmParams,
    ClassifierHead,
    SpanPrediction,
    biaffine_logits_batch,
    biaffine_projections,
    bilstm_refine,
    classify_spans,
    new_biaffine_head,
    new_bilstm_params,
    new_classifier_head,
)
from .span_encoder import (
    AGGREGATION_KINDS,
    SpanEncoderConfig,
    SpanEncoderParams,
    SpanTrace,
    candidate_widths,
    encode_spans,
    new_aggregator_params,
)

HEAD_KINDS = (
    "dspert",
    "shallow-max",
    "shallow-mean",
    "shallow-mulattn",
    "shallow-addattn",
    "biaffine",
    "biaffine-no-prod",
)

_SHALLOW_AGG = {
    "shallow-max": "max",
    "shallow-mean": "mean",
    "shallow-mulattn": "mul_attention",
    "shallow-addattn": "add_attention",
}


@dataclass
class ModelConfig:
    vocab_size: int
    num_entity_types: int
    num_layers: int = 2
    hidden_size: int = 32
    num_heads: int = 2
    ffn_size: int = 0  # 0 means 4 * hidden_size
    max_position: int = 64
    maximum_span_size: int = 6
    span_depth: int = -1  # -1 means full depth
    initial_aggregation: str = "max"
    weight_sharing: bool = False
    per_width_params: bool = False
    head: str = "dspert"
    use_bilstm: bool = False
    lstm_hidden_size: int = 16
    ffn_hidden_size: int = 24  # pre-logit size
    width_embedding_size: int = 8
    biaffine_size: int = 150
    embed_dropout: float = 0.1
    block_dropout: float = 0.1
    head_dropout: float = 0.4
    lstm_dropout: float = 0.5
    layer_norm_eps: float = 1e-5

    @property
    def n_classes(self) -> int:
        return self.num_entity_types + 1

    @property
    def effective_ffn_size(self) -> int:
        return self.ffn_size if self.ffn_size > 0 else 4 * self.hidden_size

    @property
    def is_biaffine(self) -> bool:
        return self.head.startswith("biaffine")

    @property
    def effective_span_depth(self) -> int:
        if self.is_biaffine:
            return 0
        if self.head in _SHALLOW_AGG:
            return 0
        return self.num_layers if self.span_depth < 0 else self.span_depth

    @property
    def effective_aggregation(self) -> str:
        return _SHALLOW_AGG.get(self.head, self.initial_aggregation)

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab size must cover at least PAD and UNK")
        if self.num_entity_types < 1:
            raise ConfigError("at least one entity type is required")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden size {self.hidden_size} not divisible by "
                f"{self.num_heads} heads"
            )
        if self.maximum_span_size < 2:
            raise ConfigError(
                f"maximum span size must be >= 2, got {self.maximum_span_size}"
            )
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head!r}")
        if self.initial_aggregation not in AGGREGATION_KINDS:
            raise ConfigError(
                f"unknown aggregation {self.initial_aggregation!r}"
            )
        if self.span_depth >= 0 and self.span_depth > self.num_layers:
            raise ConfigError(
                f"span depth {self.span_depth} exceeds {self.num_layers} layers"
            )
        if self.is_biaffine:
            span_flags = (
                self.weight_sharing
                or self.per_width_params
                or self.use_bilstm
                or self.span_depth >= 0
            )
            if span_flags:
                raise ConfigError(
                    "biaffine heads take no span-encoder or BiLSTM options"
                )
        if self.head in _SHALLOW_AGG:
            if self.span_depth > 0:
                raise ConfigError("shallow heads imply span depth 0")
            if self.weight_sharing or self.per_width_params:
                raise ConfigError("shallow heads have no span blocks to share")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class ForwardOutput:
    """Everything the loss, the decoder, and the analysis tooling consume."""

    trace: EncoderTrace
    span_trace: SpanTrace | None
    reps: dict[int, Tensor]
    probs: dict[int, Tensor]
    prelogits: dict[int, Tensor] | None


@dataclass
class Model:
    config: ModelConfig
    embedding: EmbeddingLayer
    blocks: list[TransformerBlockParams]
    span_params: SpanEncoderParams | None
    bilstm: BiLstmParams | None
    head: ClassifierHead | None
    biaffine: BiaffineHead | None
    params: dict[str, Tensor] = field(default_factory=dict)

    # -- construction --------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, rng: RngState) -> "Model":
        config.validate()
        d = config.hidden_size
        embedding = new_embedding(
            rng, config.vocab_size, d, config.max_position, config.embed_dropout
        )
        blocks = [
            new_block_params(rng, d, config.effective_ffn_size, config.num_heads)
            for _ in range(config.num_layers)
        ]

        span_params: SpanEncoderParams | None = None
        bilstm: BiLstmParams | None = None
        head: ClassifierHead | None = None
        biaffine: BiaffineHead | None = None

        if config.is_biaffine:
            biaffine = new_biaffine_head(
                rng,
                d,
                config.biaffine_size,
                config.n_classes,
                use_production=config.head != "biaffine-no-prod",
            )
        else:
            depth = config.effective_span_depth
            start = config.num_layers - depth
            span_blocks: dict = {}
            if config.weight_sharing:
                for layer in range(start + 1, config.num_layers + 1):
                    span_blocks[layer] = blocks[layer - 1]
            elif config.per_width_params:
                for width in range(2, config.maximum_span_size + 1):
                    for layer in range(start + 1, config.num_layers + 1):
                        span_blocks[(width, layer)] = new_block_params(
                            rng, d, config.effective_ffn_size, config.num_heads
                        )
            else:
                for layer in range(start + 1, config.num_layers + 1):
                    span_blocks[layer] = new_block_params(
                        rng, d, config.effective_ffn_size, config.num_heads
                    )
            agg = None
            if config.effective_aggregation in ("mul_attention", "add_attention"):
                agg = new_aggregator_params(rng, config.effective_aggregation, d)
            span_params = SpanEncoderParams(blocks=span_blocks, agg=agg)
            if config.use_bilstm:
                bilstm = new_bilstm_params(
                    rng, d, config.lstm_hidden_size, config.lstm_dropout
                )
            head = new_classifier_head(
                rng,
                d,
                config.maximum_span_size,
                config.width_embedding_size,
                config.ffn_hidden_size,
                config.n_classes,
                config.head_dropout,
            )

        model = cls(
            config=config,
            embedding=embedding,
            blocks=blocks,
            span_params=span_params,
            bilstm=bilstm,
            head=head,
            biaffine=biaffine,
        )
        model._register_params()
        return model

    def _register_params(self) -> None:
        named: list[tuple[str, Tensor]] = []
        named.extend(self.embedding.named("embed"))
        for i, block in enumerate(self.blocks):
            named.extend(block.named(f"enc.{i}"))
        if self.span_params is not None and not self.config.weight_sharing:
            for key in sorted(self.span_params.blocks, key=str):
                block = self.span_params.blocks[key]
                if isinstance(key, tuple):
                    prefix = f"span.w{key[0]}.{key[1]}"
                else:
                    prefix = f"span.{key}"
                named.extend(block.named(prefix))
        if self.span_params is not None and self.span_params.agg is not None:
            named.extend(self.span_params.agg.named("agg"))
        if self.bilstm is not None:
            named.extend(self.bilstm.named("bilstm"))
        if self.head is not None:
            named.extend(self.head.named("head"))
        if self.biaffine is not None:
            named.extend(self.biaffine.named("biaffine"))
        self.params = dict(named)

    # -- parameter access ----------------------------------------------

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Encoder-side parameters vs freshly initialized head-side ones."""
        pretrained_prefixes = ("embed.", "enc.", "span.")
        groups: dict[str, list[tuple[str, Tensor]]] = {"pretrained": [], "fresh": []}
        for name, tensor in self.params.items():
            key = "pretrained" if name.startswith(pretrained_prefixes) else "fresh"
            groups[key].append((name, tensor))
        return groups

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(arrays))
        extra = sorted(set(arrays) - set(self.params))
        if missing or extra:
            raise ShapeError(
                f"parameter name mismatch; missing={missing[:3]} extra={extra[:3]}"
            )
        for name, tensor in self.params.items():
            incoming = np.asarray(arrays[name], dtype=np.float64)
            if incoming.shape != tensor.data.shape:
                raise ShapeError(
                    f"parameter {name!r} has shape {incoming.shape}, "
                    f"expected {tensor.data.shape}"
                )
        for name, tensor in self.params.items():
            tensor.data = np.asarray(arrays[name], dtype=np.float64).copy()

    def zero_grads(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    # -- forward -------------------------------------------------------

    def span_encoder_config(self) -> SpanEncoderConfig:
        return SpanEncoderConfig(
            max_span_size=self.config.maximum_span_size,
            depth=self.config.effective_span_depth,
            init_aggregation=self.config.effective_aggregation,
            share_weights=self.config.weight_sharing,
            per_width_params=self.config.per_width_params,
        )

    def forward(
        self,
        token_ids: list[int],
        *,
        training: bool = False,
        rng: RngState | None = None,
    ) -> ForwardOutput:
        cfg = self.config
        h0 = embed(self.embedding, token_ids, training=training, rng=rng)
        trace = encode(
            h0,
            self.blocks,
            eps=cfg.layer_norm_eps,
            dropout_p=cfg.block_dropout,
            training=training,
            rng=rng,
        )
        n = len(token_ids)
        widths = candidate_widths(n, cfg.maximum_span_size)

        if cfg.is_biaffine:
            assert self.biaffine is not None
            h_s, h_e = biaffine_projections(self.biaffine, trace.top)
            probs: dict[int, Tensor] = {}
            for width in widths:
                m = n - width + 1
                starts = ad.slice_rows(h_s, 0, m)
                ends = ad.slice_rows(h_e, width - 1, width - 1 + m)
                logits = biaffine_logits_batch(self.biaffine, starts, ends)
                probs[width] = ad.softmax(logits, axis=1)
            return ForwardOutput(
                trace=trace, span_trace=None, reps={}, probs=probs, prelogits=None
            )

        assert self.span_params is not None and self.head is not None
        span_trace = encode_spans(
            trace,
            self.span_encoder_config(),
            self.span_params,
            eps=cfg.layer_norm_eps,
            dropout_p=cfg.block_dropout,
            training=training,
            rng=rng,
        )
        tops: dict[int, Tensor] = {}
        for width in widths:
            tops[width] = trace.top if width == 1 else span_trace.top(width)
        reps = bilstm_refine(tops, self.bilstm, training=training, rng=rng)
        probs = {}
        prelogits: dict[int, Tensor] = {}
        for width in widths:
            p, z = classify_spans(
                self.head, reps[width], width, training=training, rng=rng
            )
            probs[width] = p
            prelogits[width] = z
        return ForwardOutput(
            trace=trace,
            span_trace=span_trace,
            reps=reps,
            probs=probs,
            prelogits=prelogits,
        )


def score_all_spans(model: Model, token_ids: list[int]) -> list[SpanPrediction]:
    """Classify every candidate span in evaluation mode."""
    out = model.forward(token_ids)
    predictions: list[SpanPrediction] = []
    for width in sorted(out.probs):
        probs = out.probs[width].data
        pre = None if out.prelogits is None else out.prelogits[width].data
        for i in range(probs.shape[0]):
            row = probs[i]
            predictions.append(
                SpanPrediction(
                    start=i,
                    end=i + width,
                    type_index=int(np.argmax(row)),
                    probs=row.copy(),
                    prelogit=None if pre is None else pre[i].copy(),
                )
            )
    predictions.sort(key=lambda s: (s.start, s.end))
    return predictions


def predict_entities(model: Model, token_ids: list[int]) -> list[SpanPrediction]:
    """All candidate spans whose argmax class is an entity type.

    Every span of width up to the maximum span size is scored; nothing
    resolves overlaps, so nested predictions coexist. Argmax ties break
    toward the lowest class index, which favors non-entity.
    """
    return [p for p in score_all_spans(model, token_ids) if p.type_index != 0]

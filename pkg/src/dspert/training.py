"""Span-grid targets with boundary smoothing, cross-entropy loss over all
candidate spans, AdamW with two learning-rate groups, warmup/decay
scheduling, gradient clipping, and the epoch loop with best-dev selection.

Training is a deterministic function of (seed, config, data): all
randomness flows through counter-based RngState streams in a fixed order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .data import Sentence, Vocab
from .errors import ConfigError, ContractError, DataError, TrainingAborted
from .evaluation import PRF, micro_prf_split
from .model import Model, predict_entities
from .span_encoder import candidate_widths

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    number_of_epochs: int = 50
    batch_size: int = 8
    learning_rate_pretrained: float = 1e-3
    learning_rate_others: float = 2e-3
    warmup_fraction: float = 0.2
    clip_norm: float = 5.0
    boundary_smoothing_epsilon: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.number_of_epochs < 0:
            raise ConfigError("number_of_epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError(
                f"warmup fraction must lie in (0, 1), got {self.warmup_fraction}"
            )
        if self.clip_norm <= 0:
            raise ConfigError(f"clip norm must be positive, got {self.clip_norm}")
        if not 0.0 <= self.boundary_smoothing_epsilon < 1.0:
            raise ConfigError(
                "boundary smoothing epsilon must lie in [0, 1), "
                f"got {self.boundary_smoothing_epsilon}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

TargetGrid = dict[int, np.ndarray]  # width -> (T - width + 1, c) rows


def _boundary_neighbors(
    start: int, end: int, n_tokens: int, max_span_size: int
) -> list[tuple[int, int]]:
    """Candidate spans at boundary distance exactly 1 from (start, end)."""
    raw = (
        (start - 1, end),
        (start + 1, end),
        (start, end - 1),
        (start, end + 1),
    )
    return [
        (s, e)
        for s, e in raw
        if 0 <= s < e <= n_tokens and e - s <= max_span_size
    ]


def build_target_grid(
    gold: list[tuple[int, int, int]],
    n_tokens: int,
    max_span_size: int,
    n_classes: int,
    epsilon: float,
) -> TargetGrid:
    """Per-span target distributions over the candidate grid.

    Non-gold spans are one-hot non-entity. A gold span keeps 1 - epsilon
    on its type and spreads epsilon uniformly over its valid distance-1
    neighbors (same type coordinate). Contributions from several gold
    spans add; a row's deficit goes to non-entity, and any excess above 1
    renormalizes the row. Gold spans wider than the maximum span size are
    dropped with a warning; a gold span with no valid neighbor keeps its
    full mass.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ContractError(f"epsilon must lie in [0, 1), got {epsilon}")
    seen: dict[tuple[int, int], int] = {}
    contributions: dict[tuple[int, int], np.ndarray] = {}
    for start, end, type_index in sorted(gold):
        if not 0 <= start < end <= n_tokens:
            raise DataError(f"gold span ({start}, {end}) out of range")
        if not 1 <= type_index < n_classes:
            raise DataError(f"gold type index {type_index} out of range")
        prev = seen.get((start, end))
        if prev is not None and prev != type_index:
            raise DataError(
                f"span ({start}, {end}) carries conflicting types {prev} and {type_index}"
            )
        seen[(start, end)] = type_index
        if end - start > max_span_size:
            logger.warning(
                "dropping gold span (%d, %d): wider than maximum span size %d",
                start, end, max_span_size,
            )
            continue

        def bump(span: tuple[int, int], mass: float) -> None:
            row = contributions.setdefault(span, np.zeros(n_classes))
            row[type_index] += mass

        neighbors = _boundary_neighbors(start, end, n_tokens, max_span_size)
        if epsilon > 0.0 and neighbors:
            bump((start, end), 1.0 - epsilon)
            share = epsilon / len(neighbors)
            for neighbor in neighbors:
                bump(neighbor, share)
        else:
            bump((start, end), 1.0)

    grid: TargetGrid = {}
    for width in candidate_widths(n_tokens, max_span_size):
        rows = np.zeros((n_tokens - width + 1, n_classes))
        rows[:, 0] = 1.0
        grid[width] = rows
    for (start, end), row in contributions.items():
        total = row.sum()
        target = row.copy()
        if total < 1.0:
            target[0] += 1.0 - total
        elif total > 1.0:
            target /= total
        grid[end - start][start] = target
    return grid


def loss_all_spans(probs: dict[int, Tensor], targets: TargetGrid) -> Tensor:
    """Cross entropy summed over every candidate span of one sentence."""
    if sorted(probs) != sorted(targets):
        raise ContractError(
            f"probability grid widths {sorted(probs)} do not match "
            f"target widths {sorted(targets)}"
        )
    terms = [
        ad.scale(ad.sum_(ad.xlogy(targets[width], probs[width])), -1.0)
        for width in sorted(probs)
    ]
    return ad.add_n(terms)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    named_params: list[tuple[str, Tensor]],
    state: AdamState,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Decoupled weight decay, then a bias-corrected Adam update."""
    state.step += 1
    t = state.step
    for name, p in named_params:
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        g = p.grad
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at(step: int, total_steps: int, peak: float, warmup_fraction: float) -> float:
    """Linear warmup to the peak over the first fraction, then linear decay
    to zero at the last step."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warmup_steps = warmup_fraction * total_steps
    if step <= warmup_steps:
        return peak * step / warmup_steps
    return peak * (total_steps - step) / (total_steps - warmup_steps)


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the applied scale (1.0 when no clipping happened)."""
    norm = ad.global_grad_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= factor
    return factor


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int  # -1 when no epoch ran
    best_dev: PRF | None
    best_params: dict[str, np.ndarray]


def evaluate_split(model: Model, vocab: Vocab, sentences: list[Sentence]) -> PRF:
    """Micro P/R/F1 of evaluation-mode predictions against gold."""
    pred_sets = []
    gold_sets = []
    for sentence in sentences:
        ids = vocab.encode_tokens(sentence.tokens)
        preds = predict_entities(model, ids)
        pred_sets.append(
            {(p.start, p.end, vocab.types[p.type_index]) for p in preds}
        )
        gold_sets.append(set(sentence.gold))
    return micro_prf_split(pred_sets, gold_sets)


def _length_bucketed_batches(
    sentences: list[Sentence], batch_size: int, rng: RngState
) -> list[list[int]]:
    """Shuffled batches of same-length sentences (no padding anywhere)."""
    buckets: dict[int, list[int]] = {}
    for index, sentence in enumerate(sentences):
        buckets.setdefault(len(sentence.tokens), []).append(index)
    batches: list[list[int]] = []
    for length in sorted(buckets):
        indices = buckets[length]
        rng.shuffle(indices)
        batches.extend(
            indices[i : i + batch_size] for i in range(0, len(indices), batch_size)
        )
    rng.shuffle(batches)
    return batches


def sentence_loss(
    model: Model,
    token_ids: list[int],
    targets: TargetGrid,
    *,
    training: bool,
    rng: RngState | None,
) -> Tensor:
    out = model.forward(token_ids, training=training, rng=rng)
    return loss_all_spans(out.probs, targets)


def train(
    model: Model,
    vocab: Vocab,
    train_set: list[Sentence],
    dev_set: list[Sentence],
    cfg: TrainConfig,
) -> TrainResult:
    """Epoch loop with two AdamW groups, shared schedule, clipping, and
    best-dev checkpoint selection.

    History records one entry per epoch with the mean batch loss and dev
    micro P/R/F1. The model is left at (and ``best_params`` holds) the
    parameters of the best dev-F1 epoch. Non-finite loss aborts with a
    diagnostic naming the batch.
    """
    cfg.validate()
    if not train_set or not dev_set:
        raise ContractError("training requires non-empty train and dev sets")

    master = RngState(cfg.seed)
    shuffle_rng = master.spawn()
    dropout_rng = master.spawn()

    encoded = [vocab.encode_tokens(s.tokens) for s in train_set]
    targets = [
        build_target_grid(
            vocab.encode_gold(s),
            len(s.tokens),
            model.config.maximum_span_size,
            model.config.n_classes,
            cfg.boundary_smoothing_epsilon,
        )
        for s in train_set
    ]

    groups = model.param_groups()
    all_params = list(model.params.values())
    state_pretrained = AdamState()
    state_fresh = AdamState()

    n_batches = max(
        1, sum(1 for _ in _length_bucketed_batches(train_set, cfg.batch_size, RngState(0)))
    )
    total_steps = cfg.number_of_epochs * n_batches

    history: list[dict] = []
    best_epoch = -1
    best_dev: PRF | None = None
    best_params = model.parameter_arrays()
    step = 0

    for epoch in range(cfg.number_of_epochs):
        batches = _length_bucketed_batches(train_set, cfg.batch_size, shuffle_rng)
        epoch_loss = 0.0
        for batch_index, batch in enumerate(batches):
            model.zero_grads()
            losses = [
                sentence_loss(
                    model, encoded[i], targets[i], training=True, rng=dropout_rng
                )
                for i in batch
            ]
            total = ad.scale(ad.add_n(losses), 1.0 / len(losses))
            loss_value = float(total.data)
            if not math.isfinite(loss_value):
                raise TrainingAborted(
                    f"non-finite loss {loss_value} in epoch {epoch}, "
                    f"batch {batch_index} (sentences {batch})"
                )
            ad.backward(total)
            step += 1
            clip_gradients(all_params, cfg.clip_norm)
            lr_p = lr_at(step, total_steps, cfg.learning_rate_pretrained, cfg.warmup_fraction)
            lr_f = lr_at(step, total_steps, cfg.learning_rate_others, cfg.warmup_fraction)
            adamw_step(
                groups["pretrained"], state_pretrained, lr_p,
                weight_decay=cfg.weight_decay,
            )
            adamw_step(
                groups["fresh"], state_fresh, lr_f,
                weight_decay=cfg.weight_decay,
            )
            epoch_loss += loss_value
        dev = evaluate_split(model, vocab, dev_set)
        history.append(
            {
                "epoch": epoch,
                "loss": epoch_loss / max(1, len(batches)),
                "dev_precision": dev.precision,
                "dev_recall": dev.recall,
                "dev_f1": dev.f1,
            }
        )
        if best_dev is None or dev.f1 > best_dev.f1:
            best_dev = dev
            best_epoch = epoch
            best_params = model.parameter_arrays()

    model.load_parameter_arrays(best_params)
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_dev=best_dev,
        best_params=best_params,
    )

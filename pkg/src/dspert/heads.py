"""Entity classification head, shallow aggregation baselines, the optional
BiLSTM refinement stage, and the biaffine baseline decoder.

The classifier concatenates a learned width embedding to the span vector,
reduces it with a one-layer ReLU FFN (the pre-logit representation), and
applies a linear softmax layer. The biaffine path reads only the top token
layer and exposes no pre-logit vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .errors import ConfigError, ContractError
from .span_encoder import AggregatorParams

NON_ENTITY = 0  # index of the non-entity category, fixed by convention


@dataclass
class SpanPrediction:
    """One classified candidate span. ``end`` is exclusive.

    ``prelogit`` is the dimension-reduced vector fed to the final linear
    layer; the biaffine decoder conceals it and stores None.
    """

    start: int
    end: int
    type_index: int
    probs: np.ndarray
    prelogit: np.ndarray | None

    @property
    def width(self) -> int:
        return self.end - self.start


def shallow_aggregate(
    h_top: Tensor,
    i: int,
    j: int,
    kind: str,
    params: AggregatorParams | None = None,
) -> Tensor:
    """Single-step span representation from token rows i..j of ``h_top``.

    This is the per-span form used by the shallow baselines; width-1 spans
    come back unchanged under every kind.
    """
    t = h_top.shape[0]
    if not 0 <= i < j <= t:
        raise ContractError(f"span ({i}, {j}) invalid for {t} tokens")
    window = ad.slice_rows(h_top, i, j)
    width = j - i
    if kind == "max":
        out = ad.slice_rows(window, 0, 1)
        for r in range(1, width):
            out = ad.maximum(out, ad.slice_rows(window, r, r + 1))
        return out
    if kind == "mean":
        return ad.mean_(window, axis=0, keepdims=True)
    if kind in ("mul_attention", "add_attention"):
        if params is None or params.w is None or params.u is None:
            raise ContractError(f"{kind} aggregation requires aggregator parameters")
        x = window
        if kind == "add_attention":
            tile = ad.add(Tensor(np.zeros((width, params.v.shape[1]))), params.v)
            x = ad.concat([window, tile], axis=1)
        scores = ad.matmul(params.u, ad.tanh(ad.matmul(params.w, ad.transpose(x))))
        weights = ad.softmax(scores, axis=1)
        return ad.matmul(weights, window)
    raise ConfigError(f"unknown aggregation kind {kind!r}")


# ---------------------------------------------------------------------------
# BiLSTM refinement
# ---------------------------------------------------------------------------


@dataclass
class BiLstmParams:
    """One-layer bidirectional LSTM shared across widths.

    Gate layout along the 4H axis is input, forget, cell, output. The
    concatenated directions are projected back to the model width.
    """

    hidden_size: int
    w_ih_f: Tensor
    w_hh_f: Tensor
    b_f: Tensor
    w_ih_b: Tensor
    w_hh_b: Tensor
    b_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    dropout_p: float = 0.0

    def named(self, prefix: str = "bilstm") -> list[tuple[str, Tensor]]:
        fields = ("w_ih_f", "w_hh_f", "b_f", "w_ih_b", "w_hh_b", "b_b", "proj_w", "proj_b")
        return [(f"{prefix}.{name}", getattr(self, name)) for name in fields]


def new_bilstm_params(
    rng: RngState, input_size: int, hidden_size: int, dropout_p: float = 0.0
) -> BiLstmParams:
    h = hidden_size

    def weight(rows: int, cols: int) -> Tensor:
        return Tensor(rng.normal((rows, cols), std=0.02), requires_grad=True)

    return BiLstmParams(
        hidden_size=h,
        w_ih_f=weight(input_size, 4 * h),
        w_hh_f=weight(h, 4 * h),
        b_f=Tensor(np.zeros(4 * h), requires_grad=True),
        w_ih_b=weight(input_size, 4 * h),
        w_hh_b=weight(h, 4 * h),
        b_b=Tensor(np.zeros(4 * h), requires_grad=True),
        proj_w=weight(2 * h, input_size),
        proj_b=Tensor(np.zeros(input_size), requires_grad=True),
        dropout_p=dropout_p,
    )


def _lstm_pass(
    x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor, hidden: int, reverse: bool
) -> Tensor:
    steps = x.shape[0]
    h = Tensor(np.zeros((1, hidden)))
    c = Tensor(np.zeros((1, hidden)))
    outputs: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        row = ad.slice_rows(x, t, t + 1)
        gates = ad.add(ad.add(ad.matmul(row, w_ih), ad.matmul(h, w_hh)), b)
        i = ad.sigmoid(ad.slice_cols(gates, 0, hidden))
        f = ad.sigmoid(ad.slice_cols(gates, hidden, 2 * hidden))
        g = ad.tanh(ad.slice_cols(gates, 2 * hidden, 3 * hidden))
        o = ad.sigmoid(ad.slice_cols(gates, 3 * hidden, 4 * hidden))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outputs[t] = h
    return ad.concat(outputs, axis=0)  # type: ignore[arg-type]


def bilstm_refine(
    tops: dict[int, Tensor],
    params: BiLstmParams | None,
    *,
    training: bool = False,
    rng: RngState | None = None,
) -> dict[int, Tensor]:
    """Run the shared BiLSTM along each width's span sequence.

    Keys are widths; each value is the (T-k+1, d) top span matrix, which is
    replaced by the projected bidirectional outputs. With ``params`` None
    the operation is the identity.
    """
    if params is None:
        return tops
    refined: dict[int, Tensor] = {}
    for width, x in tops.items():
        if x.shape[0] == 0:
            refined[width] = x
            continue
        fwd = _lstm_pass(x, params.w_ih_f, params.w_hh_f, params.b_f, params.hidden_size, False)
        bwd = _lstm_pass(x, params.w_ih_b, params.w_hh_b, params.b_b, params.hidden_size, True)
        both = ad.concat([fwd, bwd], axis=1)
        out = ad.add(ad.matmul(both, params.proj_w), params.proj_b)
        refined[width] = ad.dropout(out, params.dropout_p, training, rng)
    return refined


# ---------------------------------------------------------------------------
# Classification head
# ---------------------------------------------------------------------------


@dataclass
class ClassifierHead:
    """Width embedding + dimension-reducing FFN + linear softmax layer."""

    width_table: Tensor  # (K, d_w); row w-1 is the width-w embedding
    ffn_w: Tensor  # (d + d_w, d_z)
    ffn_b: Tensor  # (d_z,)
    out_w: Tensor  # (c, d_z); rows act as per-class templates
    out_b: Tensor  # (c,)
    dropout_p: float = 0.0

    @property
    def n_classes(self) -> int:
        return self.out_w.shape[0]

    @property
    def max_width(self) -> int:
        return self.width_table.shape[0]

    def named(self, prefix: str = "head") -> list[tuple[str, Tensor]]:
        fields = ("width_table", "ffn_w", "ffn_b", "out_w", "out_b")
        return [(f"{prefix}.{name}", getattr(self, name)) for name in fields]


def new_classifier_head(
    rng: RngState,
    hidden_size: int,
    max_span_size: int,
    width_size: int,
    reduced_size: int,
    n_classes: int,
    dropout_p: float = 0.0,
) -> ClassifierHead:
    return ClassifierHead(
        width_table=Tensor(rng.normal((max_span_size, width_size), std=0.02), requires_grad=True),
        ffn_w=Tensor(rng.normal((hidden_size + width_size, reduced_size), std=0.02), requires_grad=True),
        ffn_b=Tensor(np.zeros(reduced_size), requires_grad=True),
        out_w=Tensor(rng.normal((n_classes, reduced_size), std=0.02), requires_grad=True),
        out_b=Tensor(np.zeros(n_classes), requires_grad=True),
        dropout_p=dropout_p,
    )


def classify_spans(
    head: ClassifierHead,
    reps: Tensor,
    width: int,
    *,
    training: bool = False,
    rng: RngState | None = None,
) -> tuple[Tensor, Tensor]:
    """Probabilities and pre-logits for every span of one width at once.

    ``reps`` holds one span representation per row; all rows share the
    same width embedding.
    """
    if not 1 <= width <= head.max_width:
        raise ContractError(
            f"width {width} outside 1..{head.max_width}"
        )
    m = reps.shape[0]
    w_row = ad.slice_rows(head.width_table, width - 1, width)
    w_tiled = ad.add(Tensor(np.zeros((m, w_row.shape[1]))), w_row)
    x = ad.concat([reps, w_tiled], axis=1)
    z = ad.relu(ad.add(ad.matmul(x, head.ffn_w), head.ffn_b))
    z = ad.dropout(z, head.dropout_p, training, rng)
    logits = ad.add(ad.matmul(z, ad.transpose(head.out_w)), head.out_b)
    return ad.softmax(logits, axis=1), z


def classify_span(
    head: ClassifierHead,
    rep: Tensor,
    width: int,
    *,
    training: bool = False,
    rng: RngState | None = None,
) -> tuple[Tensor, Tensor]:
    """Single-span form of ``classify_spans`` (1 x c probs, 1 x d_z pre-logit)."""
    return classify_spans(head, rep, width, training=training, rng=rng)


# ---------------------------------------------------------------------------
# Biaffine baseline
# ---------------------------------------------------------------------------


@dataclass
class BiaffineHead:
    """Biaffine decoder over start/end token projections.

    Logits are a per-class bilinear production term plus an additive linear
    term over the concatenated projections. Disabling ``use_production``
    zeroes the bilinear term exactly.
    """

    start_w: Tensor  # (d, d_b)
    start_b: Tensor
    end_w: Tensor
    end_b: Tensor
    u: list[Tensor]  # c matrices (d_b, d_b)
    add_w: Tensor  # (2 d_b, c)
    bias: Tensor  # (c,)
    use_production: bool = True

    @property
    def n_classes(self) -> int:
        return len(self.u)

    def named(self, prefix: str = "biaffine") -> list[tuple[str, Tensor]]:
        out = [
            (f"{prefix}.start_w", self.start_w),
            (f"{prefix}.start_b", self.start_b),
            (f"{prefix}.end_w", self.end_w),
            (f"{prefix}.end_b", self.end_b),
        ]
        out.extend((f"{prefix}.u.{c}", t) for c, t in enumerate(self.u))
        out.append((f"{prefix}.add_w", self.add_w))
        out.append((f"{prefix}.bias", self.bias))
        return out


def new_biaffine_head(
    rng: RngState,
    hidden_size: int,
    biaffine_size: int,
    n_classes: int,
    use_production: bool = True,
) -> BiaffineHead:
    d, db = hidden_size, biaffine_size
    return BiaffineHead(
        start_w=Tensor(rng.normal((d, db), std=0.02), requires_grad=True),
        start_b=Tensor(np.zeros(db), requires_grad=True),
        end_w=Tensor(rng.normal((d, db), std=0.02), requires_grad=True),
        end_b=Tensor(np.zeros(db), requires_grad=True),
        u=[
            Tensor(rng.normal((db, db), std=0.02), requires_grad=True)
            for _ in range(n_classes)
        ],
        add_w=Tensor(rng.normal((2 * db, n_classes), std=0.02), requires_grad=True),
        bias=Tensor(np.zeros(n_classes), requires_grad=True),
        use_production=use_production,
    )


def biaffine_projections(head: BiaffineHead, h_top: Tensor) -> tuple[Tensor, Tensor]:
    """Start/end projections of every token row (one-layer ReLU maps)."""
    h_s = ad.relu(ad.add(ad.matmul(h_top, head.start_w), head.start_b))
    h_e = ad.relu(ad.add(ad.matmul(h_top, head.end_w), head.end_b))
    return h_s, h_e


def biaffine_logits(head: BiaffineHead, h_s: Tensor, h_e: Tensor) -> Tensor:
    """Logits for one span from its start and end projections (1 x d_b each)."""
    return biaffine_logits_batch(head, h_s, h_e)


def biaffine_logits_batch(head: BiaffineHead, starts: Tensor, ends: Tensor) -> Tensor:
    """Row-aligned biaffine logits: row r scores the span with start
    projection ``starts[r]`` and end projection ``ends[r]``."""
    additive = ad.add(
        ad.matmul(ad.concat([starts, ends], axis=1), head.add_w), head.bias
    )
    if not head.use_production:
        return additive
    cols = [
        ad.sum_(ad.mul(ad.matmul(starts, u_c), ends), axis=1, keepdims=True)
        for u_c in head.u
    ]
    return ad.add(ad.concat(cols, axis=1), additive)

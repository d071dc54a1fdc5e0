"""Exact-match micro metrics, grouped F1 breakdowns, pre-logit statistics,
and a small PCA for representation analysis.

All operations are pure; anything involving sampling takes an explicit
seed so reports are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import RngState
from .data import NestednessTag, nestedness_tag
from .errors import ContractError


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "PRF":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        return cls(precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


def micro_prf(pred, gold) -> PRF:
    """Exact (start, end, type) matching over two span sets."""
    pred, gold = set(pred), set(gold)
    tp = len(pred & gold)
    return PRF.from_counts(tp=tp, fp=len(pred) - tp, fn=len(gold) - tp)


def micro_prf_split(pred_sets, gold_sets) -> PRF:
    """Micro metrics pooled over parallel per-sentence span sets."""
    if len(pred_sets) != len(gold_sets):
        raise ContractError("prediction and gold lists differ in length")
    pooled_pred = {(i, *s) for i, spans in enumerate(pred_sets) for s in spans}
    pooled_gold = {(i, *s) for i, spans in enumerate(gold_sets) for s in spans}
    return micro_prf(pooled_pred, pooled_gold)


def _grouped_prf(pred_sets, gold_sets, key_fn) -> dict:
    """PRF per bucket; every span lands in exactly one bucket, and matched
    pairs share a bucket because the key depends only on the span."""
    counts: dict = {}

    def bump(key, slot):
        tp, fp, fn = counts.get(key, (0, 0, 0))
        counts[key] = (
            tp + (slot == "tp"),
            fp + (slot == "fp"),
            fn + (slot == "fn"),
        )

    for pred, gold in zip(pred_sets, gold_sets):
        pred, gold = set(pred), set(gold)
        for span in pred & gold:
            bump(key_fn(span, gold), "tp")
        for span in pred - gold:
            bump(key_fn(span, gold), "fp")
        for span in gold - pred:
            bump(key_fn(span, gold), "fn")
    return {
        key: PRF.from_counts(*counts[key])
        for key in sorted(counts, key=lambda k: (isinstance(k, str), str(k), k if isinstance(k, int) else 0))
    }


def f1_by_length(
    pred_sets, gold_sets, merge_above: int | None = None
) -> dict:
    """PRF per span width; widths above ``merge_above`` pool into one
    bucket keyed ``">N"``. Buckets with no spans are omitted."""
    if len(pred_sets) != len(gold_sets):
        raise ContractError("prediction and gold lists differ in length")

    def key_fn(span, _gold):
        width = span[1] - span[0]
        if merge_above is not None and width > merge_above:
            return f">{merge_above}"
        return width

    return _grouped_prf(pred_sets, gold_sets, key_fn)


def f1_by_nestedness(pred_sets, gold_sets) -> dict[NestednessTag, PRF]:
    """PRF per nested-structure relation of each span to the gold set."""
    if len(pred_sets) != len(gold_sets):
        raise ContractError("prediction and gold lists differ in length")

    def key_fn(span, gold):
        return nestedness_tag((span[0], span[1]), gold)

    return _grouped_prf(pred_sets, gold_sets, key_fn)


# ---------------------------------------------------------------------------
# Pre-logit analysis
# ---------------------------------------------------------------------------


@dataclass
class PrelogitReport:
    """Norm and cosine statistics of pre-logit vectors and classifier
    templates. Entries that lack a population (e.g. no same-type pair)
    are None."""

    n_entities: int
    n_negatives: int
    mean_l2: float | None
    cos_within_class: float | None
    cos_between_classes: float | None
    cos_pos_neg: float | None
    template_norms: list[float]
    template_abs_cos: float | None
    template_abs_cos_pos_pos: float | None
    template_abs_cos_pos_neg: float | None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_entities": self.n_entities,
            "n_negatives": self.n_negatives,
            "mean_l2": self.mean_l2,
            "cos_within_class": self.cos_within_class,
            "cos_between_classes": self.cos_between_classes,
            "cos_pos_neg": self.cos_pos_neg,
            "template_norms": self.template_norms,
            "template_abs_cos": self.template_abs_cos,
            "template_abs_cos_pos_pos": self.template_abs_cos_pos_pos,
            "template_abs_cos_pos_neg": self.template_abs_cos_pos_neg,
            "metadata": self.metadata,
        }


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    norms[norms == 0.0] = 1.0
    return x / norms


def _pair_mean(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    *,
    absolute: bool,
    cap: int,
    rng: RngState,
) -> tuple[float | None, bool]:
    """Mean (absolute) cosine over explicit vector pairs, sampling down to
    ``cap`` pairs when there are more."""
    if not pairs:
        return None, False
    sampled = False
    if len(pairs) > cap:
        order = list(range(len(pairs)))
        rng.shuffle(order)
        pairs = [pairs[i] for i in order[:cap]]
        sampled = True
    a = _unit_rows(np.stack([p[0] for p in pairs]))
    b = _unit_rows(np.stack([p[1] for p in pairs]))
    cos = (a * b).sum(axis=1)
    if absolute:
        cos = np.abs(cos)
    return float(cos.mean()), sampled


def prelogit_report(
    entries: list[tuple[np.ndarray, int]],
    templates: np.ndarray,
    *,
    seed: int = 0,
    negative_factor: int = 10,
    pair_cap: int = 10**6,
) -> PrelogitReport:
    """Statistics over candidate-span pre-logits and classifier templates.

    ``entries`` hold one (pre-logit vector, label) pair per candidate span,
    with label 0 for non-entity spans and the gold type index otherwise.
    Non-entity spans are subsampled to ``negative_factor`` times the entity
    count with the given seed. Template rows of the final linear layer are
    compared pairwise by absolute cosine.
    """
    rng = RngState(seed)
    by_class: dict[int, list[np.ndarray]] = {}
    negatives: list[np.ndarray] = []
    for vector, label in entries:
        vector = np.asarray(vector, dtype=np.float64)
        if label == 0:
            negatives.append(vector)
        else:
            by_class.setdefault(label, []).append(vector)
    entity_vectors = [v for label in sorted(by_class) for v in by_class[label]]
    n_entities = len(entity_vectors)

    n_sample = min(len(negatives), negative_factor * n_entities)
    neg_sample: list[np.ndarray] = []
    if n_sample:
        order = list(range(len(negatives)))
        rng.shuffle(order)
        neg_sample = [negatives[i] for i in sorted(order[:n_sample])]

    mean_l2 = (
        float(np.mean([math.sqrt(float(v @ v)) for v in entity_vectors]))
        if entity_vectors
        else None
    )

    within_pairs = [
        (vs[i], vs[j])
        for label in sorted(by_class)
        for vs in (by_class[label],)
        for i in range(len(vs))
        for j in range(i + 1, len(vs))
    ]
    labels = sorted(by_class)
    between_pairs = [
        (a, b)
        for i in range(len(labels))
        for j in range(i + 1, len(labels))
        for a in by_class[labels[i]]
        for b in by_class[labels[j]]
    ]
    pos_neg_pairs = [(a, b) for a in entity_vectors for b in neg_sample]

    sampled_any = False
    cos_within, s = _pair_mean(within_pairs, absolute=False, cap=pair_cap, rng=rng)
    sampled_any |= s
    cos_between, s = _pair_mean(between_pairs, absolute=False, cap=pair_cap, rng=rng)
    sampled_any |= s
    cos_pos_neg, s = _pair_mean(pos_neg_pairs, absolute=False, cap=pair_cap, rng=rng)
    sampled_any |= s

    w = np.asarray(templates, dtype=np.float64)
    template_norms = [float(np.linalg.norm(w[i])) for i in range(w.shape[0])]
    all_pairs = [
        (w[i], w[j]) for i in range(w.shape[0]) for j in range(i + 1, w.shape[0])
    ]
    pos_pairs = [
        (w[i], w[j]) for i in range(1, w.shape[0]) for j in range(i + 1, w.shape[0])
    ]
    pn_pairs = [(w[0], w[j]) for j in range(1, w.shape[0])]
    t_all, _ = _pair_mean(all_pairs, absolute=True, cap=pair_cap, rng=rng)
    t_pos, _ = _pair_mean(pos_pairs, absolute=True, cap=pair_cap, rng=rng)
    t_pn, _ = _pair_mean(pn_pairs, absolute=True, cap=pair_cap, rng=rng)

    return PrelogitReport(
        n_entities=n_entities,
        n_negatives=len(neg_sample),
        mean_l2=mean_l2,
        cos_within_class=cos_within,
        cos_between_classes=cos_between,
        cos_pos_neg=cos_pos_neg,
        template_norms=template_norms,
        template_abs_cos=t_all,
        template_abs_cos_pos_pos=t_pos,
        template_abs_cos_pos_neg=t_pn,
        metadata={
            "seed": seed,
            "negative_factor": negative_factor,
            "pair_cap": pair_cap,
            "pairs_sampled": sampled_any,
        },
    )


# ---------------------------------------------------------------------------
# PCA by power iteration with deflation
# ---------------------------------------------------------------------------


@dataclass
class PCAResult:
    points: np.ndarray  # (n, n_components)
    components: np.ndarray  # (n_components, d)
    explained_variance_ratio: list[float]
    deficient: bool  # true when rank < requested components


def pca_project(
    vectors, k: int = 2, *, max_iter: int = 1000, tol: float = 1e-13
) -> PCAResult:
    """Top-k principal directions via iterated power method with deflation.

    Component signs are fixed so the largest-magnitude coordinate is
    positive. When the data rank is below ``k`` the result carries fewer
    components and the ``deficient`` flag.
    """
    x = np.asarray(list(vectors), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k + 1:
        raise ContractError(
            f"PCA needs at least {k + 1} vectors, got array of shape {x.shape}"
        )
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / x.shape[0]
    total_var = float(np.trace(cov))
    d = cov.shape[0]

    components: list[np.ndarray] = []
    variances: list[float] = []
    rng = RngState(0x9CA)
    deficient = False
    for _ in range(k):
        if total_var <= 0.0:
            deficient = True
            break
        v = rng.normal((d,))
        for prev in components:
            v -= (v @ prev) * prev
        norm = np.linalg.norm(v)
        if norm == 0.0:
            deficient = True
            break
        v /= norm
        for _ in range(max_iter):
            w = cov @ v
            for prev in components:  # numerical re-orthogonalization
                w -= (w @ prev) * prev
            norm = np.linalg.norm(w)
            if norm <= total_var * 1e-14:
                break
            w /= norm
            if abs(abs(w @ v) - 1.0) < tol:
                v = w
                break
            v = w
        eigenvalue = float(v @ cov @ v)
        if eigenvalue <= total_var * 1e-12:
            deficient = True
            break
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        components.append(v)
        variances.append(eigenvalue)
        cov = cov - eigenvalue * np.outer(v, v)
    comp = np.stack(components) if components else np.zeros((0, d))
    ratios = [var / total_var for var in variances] if total_var > 0 else []
    return PCAResult(
        points=centered @ comp.T,
        components=comp,
        explained_variance_ratio=ratios,
        deficient=deficient or len(components) < k,
    )

"""Corpus ingestion, vocabulary, nested-structure tagging, and synthetic
corpus generation.

Two on-disk formats are supported: BIO TSV (``token<TAB>tag`` lines, blank
line between sentences) for flat corpora, and JSONL with explicit span
records for nested ones. Spans are end-exclusive token ranges.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum

from .autodiff import RngState
from .errors import DataError

logger = logging.getLogger(__name__)

Span = tuple[int, int, str]  # (start, end-exclusive, type)


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    gold: frozenset[Span] = field(default_factory=frozenset)

    def __post_init__(self):
        n = len(self.tokens)
        ranges: dict[tuple[int, int], str] = {}
        for start, end, kind in self.gold:
            if not 0 <= start < end <= n:
                raise DataError(
                    f"span ({start}, {end}) out of range for {n} tokens"
                )
            prev = ranges.get((start, end))
            if prev is not None and prev != kind:
                raise DataError(
                    f"span ({start}, {end}) labeled both {prev!r} and {kind!r}"
                )
            ranges[(start, end)] = kind

    def sorted_gold(self) -> list[Span]:
        return sorted(self.gold)


def make_sentence(tokens, spans) -> Sentence:
    return Sentence(tokens=tuple(tokens), gold=frozenset(tuple(s) for s in spans))


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

PAD, UNK = "<pad>", "<unk>"
NON_ENTITY_TYPE = "<none>"


@dataclass(frozen=True)
class Vocab:
    """Token and type maps frozen from the training split.

    PAD and UNK sit at ids 0 and 1; the non-entity category is type
    index 0. Unseen tokens map to UNK.
    """

    token_to_id: dict[str, int]
    types: tuple[str, ...]  # index 0 is the non-entity category

    @classmethod
    def build(cls, sentences: list[Sentence]) -> "Vocab":
        tokens = sorted({tok for s in sentences for tok in s.tokens})
        kinds = sorted({kind for s in sentences for _, _, kind in s.gold})
        token_to_id = {PAD: 0, UNK: 1}
        for tok in tokens:
            token_to_id.setdefault(tok, len(token_to_id))
        return cls(token_to_id=token_to_id, types=(NON_ENTITY_TYPE, *kinds))

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def num_entity_types(self) -> int:
        return len(self.types) - 1

    def encode_tokens(self, tokens) -> list[int]:
        unk = self.token_to_id[UNK]
        return [self.token_to_id.get(tok, unk) for tok in tokens]

    def type_index(self, kind: str) -> int:
        try:
            return self.types.index(kind)
        except ValueError:
            raise DataError(f"unknown entity type {kind!r}") from None

    def encode_gold(self, sentence: Sentence) -> list[tuple[int, int, int]]:
        return [
            (start, end, self.type_index(kind))
            for start, end, kind in sentence.sorted_gold()
        ]


# ---------------------------------------------------------------------------
# Parsers and serializers
# ---------------------------------------------------------------------------


def parse_bio(text: str, strict: bool = False) -> list[Sentence]:
    """BIO TSV to sentences; contiguous B/I runs become end-exclusive spans.

    An I-tag without a matching open run is repaired to a B-tag with a
    warning unless ``strict``, in which case it is an error.
    """
    sentences: list[Sentence] = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush():
        if tokens:
            sentences.append(make_sentence(tokens, _bio_to_spans(tags, strict)))
            tokens.clear()
            tags.clear()

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip():
            flush()
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"line {lineno}: expected 'token<TAB>tag', got {raw!r}")
        token, tag = parts
        if tag != "O" and not (tag.startswith(("B-", "I-")) and len(tag) > 2):
            raise DataError(f"line {lineno}: malformed tag {tag!r}")
        tokens.append(token)
        tags.append(tag)
    flush()
    return sentences


def _bio_to_spans(tags: list[str], strict: bool) -> list[Span]:
    spans: list[Span] = []
    start: int | None = None
    kind: str | None = None

    def close(pos: int):
        nonlocal start, kind
        if start is not None:
            spans.append((start, pos, kind))  # type: ignore[arg-type]
        start, kind = None, None

    for i, tag in enumerate(tags):
        if tag == "O":
            close(i)
            continue
        prefix, label = tag.split("-", 1)
        if prefix == "B":
            close(i)
            start, kind = i, label
        else:  # I-
            if start is not None and kind == label:
                continue
            if strict:
                raise DataError(f"dangling I-{label} at token {i}")
            logger.warning("repairing dangling I-%s at token %d as B-%s", label, i, label)
            close(i)
            start, kind = i, label
    close(len(tags))
    return spans


def serialize_bio(sentences: list[Sentence]) -> str:
    """Render flat sentences back to BIO TSV; overlapping gold is an error."""
    lines: list[str] = []
    for sentence in sentences:
        tags = ["O"] * len(sentence.tokens)
        for start, end, kind in sentence.sorted_gold():
            if any(tags[i] != "O" for i in range(start, end)):
                raise DataError(
                    f"overlapping spans cannot be expressed in BIO: ({start}, {end})"
                )
            tags[start] = f"B-{kind}"
            for i in range(start + 1, end):
                tags[i] = f"I-{kind}"
        lines.extend(f"{tok}\t{tag}" for tok, tag in zip(sentence.tokens, tags))
        lines.append("")
    return "\n".join(lines)


def parse_json_spans(text: str) -> list[Sentence]:
    """JSONL records with a tokens array and an entities array of
    start/end/type objects; nested and overlapping spans are permitted."""
    sentences: list[Sentence] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON ({exc})") from None
        try:
            tokens = record["tokens"]
            entities = record.get("entities", [])
            spans = [(e["start"], e["end"], e["type"]) for e in entities]
        except (KeyError, TypeError) as exc:
            raise DataError(f"line {lineno}: malformed record ({exc})") from None
        try:
            sentences.append(make_sentence(tokens, spans))
        except DataError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    return sentences


def serialize_json_spans(sentences: list[Sentence]) -> str:
    lines = []
    for sentence in sentences:
        record = {
            "tokens": list(sentence.tokens),
            "entities": [
                {"start": s, "end": e, "type": k}
                for s, e, k in sentence.sorted_gold()
            ],
        }
        lines.append(json.dumps(record, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def load_corpus(path, fmt: str, strict: bool = False) -> list[Sentence]:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    if fmt == "bio":
        return parse_bio(text, strict=strict)
    if fmt == "jsonl":
        return parse_json_spans(text)
    raise DataError(f"unknown corpus format {fmt!r}; expected 'bio' or 'jsonl'")


# ---------------------------------------------------------------------------
# Nested-structure tagging
# ---------------------------------------------------------------------------


class NestednessTag(str, Enum):
    NESTED = "nested"
    COVERING = "covering"
    BOTH = "both"
    FLAT = "flat"


def _strictly_inside(inner: tuple[int, int], outer: tuple[int, int]) -> bool:
    return outer[0] < inner[0] and inner[1] < outer[1]


def nestedness_tag(span: tuple[int, int], gold) -> NestednessTag:
    """Relation of a candidate span to the gold nesting structure.

    Nested: strictly inside a gold entity that itself strictly contains
    another gold entity. Covering: strictly contains a gold entity that is
    itself strictly inside another gold entity. Both/Flat accordingly.
    Containment is strict at both boundaries; types are ignored.
    """
    ranges = sorted({(s, e) for s, e, *_ in (tuple(g) for g in gold)})
    nested = any(
        _strictly_inside(span, outer)
        and any(other != outer and _strictly_inside(other, outer) for other in ranges)
        for outer in ranges
    )
    covering = any(
        _strictly_inside(inner, span)
        and any(other != inner and _strictly_inside(inner, other) for other in ranges)
        for inner in ranges
    )
    if nested and covering:
        return NestednessTag.BOTH
    if nested:
        return NestednessTag.NESTED
    if covering:
        return NestednessTag.COVERING
    return NestednessTag.FLAT


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

SYNTH_TYPES = ("per", "org", "loc")
_TRIGGERS = {f"t-{t}": t for t in SYNTH_TYPES}
_OPENS = {f"o-{t}": t for t in SYNTH_TYPES}
_CLOSES = {t: f"c-{t}" for t in SYNTH_TYPES}
_N_CONTENT = 8


def _content_tokens() -> set[str]:
    return {f"n{i}" for i in range(_N_CONTENT)}


def derive_gold(tokens) -> set[Span]:
    """Entity spans implied by the synthetic grammar, as a pure function
    of the token sequence.

    A trigger token opens an entity that extends over the following run of
    content tokens; an open marker spans to the next close marker of the
    same type.
    """
    content = _content_tokens()
    spans: set[Span] = set()
    n = len(tokens)
    for pos, tok in enumerate(tokens):
        if tok in _TRIGGERS:
            end = pos + 1
            while end < n and tokens[end] in content:
                end += 1
            spans.add((pos, end, _TRIGGERS[tok]))
        elif tok in _OPENS:
            kind = _OPENS[tok]
            for q in range(pos + 1, n):
                if tokens[q] == _CLOSES[kind]:
                    spans.add((pos, q + 1, kind))
                    break
    return spans


def gen_synthetic(
    seed: int,
    n_sentences: int,
    vocab_size: int = 40,
    nest_rate: float = 0.3,
    max_len: int = 12,
) -> list[Sentence]:
    """Deterministic synthetic corpus with optional genuinely nested pairs.

    Labels come from ``derive_gold``, so they are a pure function of the
    tokens and the task is learnable to 100%. With ``nest_rate`` an entity
    is wrapped in marker tokens of another type, giving a strictly wider
    gold span around a strictly interior one.
    """
    if not 0.0 <= nest_rate <= 1.0:
        raise DataError(f"nest rate must be in [0, 1], got {nest_rate}")
    if max_len < 8:
        raise DataError(f"max_len must be at least 8, got {max_len}")
    n_fillers = max(4, vocab_size - _N_CONTENT - 3 * len(SYNTH_TYPES))
    fillers = [f"w{i}" for i in range(n_fillers)]
    content = [f"n{i}" for i in range(_N_CONTENT)]
    rng = RngState(seed)

    def build_entity(wrapped: bool) -> list[str]:
        kind = SYNTH_TYPES[rng.randint(len(SYNTH_TYPES))]
        toks = [f"t-{kind}"] + [
            content[rng.randint(_N_CONTENT)] for _ in range(rng.randint(3))
        ]
        if wrapped:
            outer_kind = SYNTH_TYPES[
                (SYNTH_TYPES.index(kind) + 1 + rng.randint(len(SYNTH_TYPES) - 1))
                % len(SYNTH_TYPES)
            ]
            toks = [f"o-{outer_kind}", *toks, _CLOSES[outer_kind]]
        return toks

    # Largest entity form: open + trigger + 2 content + close.
    max_entity = 5
    sentences: list[Sentence] = []
    for _ in range(n_sentences):
        tokens: list[str] = []
        for _ in range(1 + rng.randint(2)):  # leading fillers, 1..2
            tokens.append(fillers[rng.randint(n_fillers)])
        tokens.extend(build_entity(wrapped=rng.uniform() < nest_rate))
        if len(tokens) < max_len:
            tokens.append(fillers[rng.randint(n_fillers)])
        if rng.uniform() < 0.5 and len(tokens) + max_entity <= max_len:
            second = build_entity(wrapped=rng.uniform() < nest_rate)
            if len(tokens) + len(second) <= max_len:
                tokens.extend(second)
                if len(tokens) < max_len:
                    tokens.append(fillers[rng.randint(n_fillers)])
        sentences.append(make_sentence(tokens, derive_gold(tokens)))
    return sentences


def make_synthetic_splits(
    seed: int,
    n_train: int,
    n_dev: int,
    n_test: int = 0,
    vocab_size: int = 40,
    nest_rate: float = 0.3,
    max_len: int = 12,
) -> tuple[list[Sentence], list[Sentence], list[Sentence]]:
    """Train/dev/test splits from consecutive generator seeds."""
    kwargs = {"vocab_size": vocab_size, "nest_rate": nest_rate, "max_len": max_len}
    return (
        gen_synthetic(seed, n_train, **kwargs),
        gen_synthetic(seed + 1, n_dev, **kwargs),
        gen_synthetic(seed + 2, n_test, **kwargs),
    )

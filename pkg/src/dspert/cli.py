"""Command-line entry point: training, evaluation, prediction, ablation
grids, representation analysis, and synthetic corpus generation.

Every subcommand with a fixed seed is end-to-end deterministic; metrics
files are written with sorted keys so identical runs produce identical
bytes. The DSPERT_THREADS environment variable caps how many ablation
cells run in parallel processes (default 1).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import RngState
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    Sentence,
    Vocab,
    load_corpus,
    make_synthetic_splits,
    serialize_json_spans,
)
from .errors import ConfigError, DspertError
from .evaluation import (
    f1_by_length,
    f1_by_nestedness,
    micro_prf_split,
    pca_project,
    prelogit_report,
)
from .model import Model, ModelConfig, predict_entities, score_all_spans
from .training import TrainConfig, TrainResult, evaluate_split, train

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _pred_gold_sets(model: Model, vocab: Vocab, sentences: list[Sentence]):
    pred_sets, gold_sets = [], []
    for sentence in sentences:
        ids = vocab.encode_tokens(sentence.tokens)
        preds = predict_entities(model, ids)
        pred_sets.append({(p.start, p.end, vocab.types[p.type_index]) for p in preds})
        gold_sets.append(set(sentence.gold))
    return pred_sets, gold_sets


def _split_metrics(model: Model, vocab: Vocab, sentences: list[Sentence]) -> dict:
    pred_sets, gold_sets = _pred_gold_sets(model, vocab, sentences)
    overall = micro_prf_split(pred_sets, gold_sets)
    by_length = f1_by_length(pred_sets, gold_sets, merge_above=10)
    by_nested = f1_by_nestedness(pred_sets, gold_sets)
    return {
        "micro": overall.to_dict(),
        "by_length": {str(k): v.to_dict() for k, v in by_length.items()},
        "by_nestedness": {k.value: v.to_dict() for k, v in by_nested.items()},
    }


def _save_model(
    path: Path,
    model: Model,
    vocab: Vocab,
    run_cfg: RunConfig,
    seed: int,
    rng_position: int = 0,
) -> None:
    tokens_in_order = [None] * vocab.size
    for token, index in vocab.token_to_id.items():
        tokens_in_order[index] = token
    blob = {
        "model": model.config.to_dict(),
        "run": run_cfg.to_dict(),
        "vocab": {"tokens": tokens_in_order, "types": list(vocab.types)},
        "seed": seed,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        path, blob, model.parameter_arrays(), rng_seed=seed, rng_position=rng_position
    )


def _load_model(path) -> tuple[Model, Vocab, dict]:
    ckpt = load_checkpoint(path)
    blob = ckpt.config
    model_cfg = ModelConfig.from_dict(blob["model"])
    vocab = Vocab(
        token_to_id={tok: i for i, tok in enumerate(blob["vocab"]["tokens"])},
        types=tuple(blob["vocab"]["types"]),
    )
    model = Model.init(model_cfg, RngState(ckpt.rng_seed))
    model.load_parameter_arrays(ckpt.params)
    return model, vocab, blob


def _load_splits(run_cfg: RunConfig):
    fmt = run_cfg.data.format
    if not run_cfg.data.train or not run_cfg.data.dev:
        raise ConfigError("data.train and data.dev paths are required")
    train_set = load_corpus(run_cfg.data.train, fmt)
    dev_set = load_corpus(run_cfg.data.dev, fmt)
    test_set = load_corpus(run_cfg.data.test, fmt) if run_cfg.data.test else []
    return train_set, dev_set, test_set


def _train_once(
    run_cfg: RunConfig,
    seed: int,
    train_set: list[Sentence],
    dev_set: list[Sentence],
) -> tuple[Model, Vocab, TrainResult]:
    vocab = Vocab.build(train_set)
    model_cfg = run_cfg.model_config(vocab.size, vocab.num_entity_types)
    model = Model.init(model_cfg, RngState(seed))
    train_cfg = TrainConfig.from_dict({**run_cfg.train.to_dict(), "seed": seed})
    result = train(model, vocab, train_set, dev_set, train_cfg)
    return model, vocab, result


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_train(args) -> int:
    run_cfg = RunConfig.from_file(args.config)
    seed = args.seed if args.seed is not None else run_cfg.train.seed
    train_set, dev_set, test_set = _load_splits(run_cfg)
    model, vocab, result = _train_once(run_cfg, seed, train_set, dev_set)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "history.jsonl", "w", encoding="utf-8") as f:
        for record in result.history:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    _save_model(out / "best.ckpt", model, vocab, run_cfg, seed)
    metrics = {
        "seed": seed,
        "best_epoch": result.best_epoch,
        "dev": _split_metrics(model, vocab, dev_set),
    }
    if test_set:
        metrics["test"] = _split_metrics(model, vocab, test_set)
    _write_json(out / "metrics.json", metrics)
    dev_f1 = result.best_dev.f1 if result.best_dev else 0.0
    logger.info("trained seed %d: best epoch %d, dev F1 %.4f", seed, result.best_epoch, dev_f1)
    return 0


def _cmd_eval(args) -> int:
    model, vocab, _ = _load_model(args.checkpoint)
    sentences = load_corpus(args.data, args.format)
    metrics = _split_metrics(model, vocab, sentences)
    if args.out:
        out = Path(args.out)
        _write_json(out / "metrics.json", metrics)
        _write_csv(
            out / "f1_by_length.csv",
            ["length", "precision", "recall", "f1", "tp", "fp", "fn"],
            [
                [k, v["precision"], v["recall"], v["f1"], v["tp"], v["fp"], v["fn"]]
                for k, v in metrics["by_length"].items()
            ],
        )
        _write_csv(
            out / "f1_by_nestedness.csv",
            ["tag", "precision", "recall", "f1", "tp", "fp", "fn"],
            [
                [k, v["precision"], v["recall"], v["f1"], v["tp"], v["fp"], v["fn"]]
                for k, v in metrics["by_nestedness"].items()
            ],
        )
    else:
        print(json.dumps(metrics, sort_keys=True, indent=2))
    return 0


def _cmd_predict(args) -> int:
    model, vocab, _ = _load_model(args.checkpoint)
    sentences = load_corpus(args.data, args.format)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for sentence in sentences:
            ids = vocab.encode_tokens(sentence.tokens)
            preds = predict_entities(model, ids)
            record = {
                "tokens": list(sentence.tokens),
                "entities": [
                    {
                        "start": p.start,
                        "end": p.end,
                        "type": vocab.types[p.type_index],
                        "probability": float(p.probs[p.type_index]),
                    }
                    for p in preds
                ],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return 0


def _cmd_analyze(args) -> int:
    model, vocab, _ = _load_model(args.checkpoint)
    if model.config.is_biaffine:
        logger.error("biaffine checkpoints expose no pre-logit representations")
        return 1
    sentences = load_corpus(args.data, args.format)

    entries: list[tuple[np.ndarray, int]] = []
    entity_rows: list[tuple[int, int, str, np.ndarray]] = []
    for sentence in sentences:
        ids = vocab.encode_tokens(sentence.tokens)
        gold = {
            (s, e): vocab.type_index(k) for s, e, k in sentence.sorted_gold()
            if e - s <= model.config.maximum_span_size
        }
        for pred in score_all_spans(model, ids):
            label = gold.get((pred.start, pred.end), 0)
            entries.append((pred.prelogit, label))
            if label:
                entity_rows.append(
                    (pred.start, pred.end, vocab.types[label], pred.prelogit)
                )

    report = prelogit_report(
        entries, model.head.out_w.data, seed=args.seed if args.seed is not None else 0
    )
    out = Path(args.out)
    _write_json(out / "prelogit_report.json", report.to_dict())

    vectors = [row[3] for row in entity_rows]
    if len(vectors) >= 3:
        pca = pca_project(vectors, k=2)
        rows = []
        for (start, end, kind, _), point in zip(entity_rows, pca.points):
            coords = list(point) + [0.0] * (2 - len(point))
            rows.append([start, end, kind, coords[0], coords[1]])
        _write_csv(out / "pca_points.csv", ["start", "end", "type", "pc1", "pc2"], rows)
        _write_json(
            out / "pca_meta.json",
            {
                "explained_variance_ratio": pca.explained_variance_ratio,
                "deficient": pca.deficient,
            },
        )
    dim = len(entity_rows[0][3]) if entity_rows else 0
    _write_csv(
        out / "prelogits.csv",
        ["start", "end", "type", *[f"z{i}" for i in range(dim)]],
        [[s, e, k, *map(float, vec)] for s, e, k, vec in entity_rows],
    )
    return 0


def _cmd_gen_synth(args) -> int:
    train_set, dev_set, test_set = make_synthetic_splits(
        args.seed,
        args.n_train,
        args.n_dev,
        args.n_test,
        vocab_size=args.vocab_size,
        nest_rate=args.nest_rate,
        max_len=args.max_len,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train_set), ("dev", dev_set), ("test", test_set)):
        if not split:
            continue
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as f:
            f.write(serialize_json_spans(split))
        logger.info("wrote %d sentences to %s.jsonl", len(split), name)
    return 0


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

_ABLATION_AXES = {
    "depth": "span_depth",
    "aggregation": "initial_aggregation",
    "weight-sharing": "weight_sharing",
    "head": "head",
}


def _run_ablation_cell(payload: dict) -> dict:
    """One (value, seed) grid cell; runs in its own process when parallel."""
    run_cfg = RunConfig.from_dict(payload["run_config"])
    field = _ABLATION_AXES[payload["axis"]]
    run_cfg.model[field] = payload["value"]
    seed = payload["seed"]
    train_set, dev_set, test_set = _load_splits(run_cfg)
    model, vocab, result = _train_once(run_cfg, seed, train_set, dev_set)
    dev_metrics = _split_metrics(model, vocab, dev_set)
    cell = {
        "value": payload["value"],
        "seed": seed,
        "best_epoch": result.best_epoch,
        "dev_f1": dev_metrics["micro"]["f1"],
        "dev_by_nestedness": {
            tag: prf["f1"] for tag, prf in dev_metrics["by_nestedness"].items()
        },
    }
    if test_set:
        cell["test_f1"] = evaluate_split(model, vocab, test_set).f1
    return cell


def _cmd_ablate(args) -> int:
    run_cfg = RunConfig.from_file(args.config)
    axis = args.axis
    if axis == "depth":
        if not args.depths:
            raise ConfigError("ablate depth requires --depths")
        values = [int(v) for v in args.depths.split(",")]
    elif axis == "aggregation":
        values = (args.aggregations or "max,mean,mul_attention,add_attention").split(",")
    elif axis == "weight-sharing":
        values = [False, True]
    else:
        values = (args.heads or "dspert,shallow-max,biaffine").split(",")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else run_cfg.seeds

    payloads = [
        {"run_config": run_cfg.to_dict(), "axis": axis, "value": value, "seed": seed}
        for value in values
        for seed in seeds
    ]
    max_workers = max(1, int(os.environ.get("DSPERT_THREADS", "1")))
    if max_workers > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            cells = list(pool.map(_run_ablation_cell, payloads))
    else:
        cells = [_run_ablation_cell(p) for p in payloads]

    grid = []
    for value in values:
        scores = [c["dev_f1"] for c in cells if c["value"] == value]
        grid.append(
            {
                "value": value,
                "mean_dev_f1": float(np.mean(scores)),
                "std_dev_f1": float(np.std(scores)),
                "n_seeds": len(scores),
            }
        )
    out = Path(args.out)
    _write_json(out / "ablate.json", {"axis": axis, "grid": grid, "cells": cells})
    _write_csv(
        out / "ablate.csv",
        ["value", "mean_dev_f1", "std_dev_f1", "n_seeds"],
        [[g["value"], g["mean_dev_f1"], g["std_dev_f1"], g["n_seeds"]] for g in grid],
    )
    for g in grid:
        logger.info(
            "%s=%s: dev F1 %.4f +- %.4f", axis, g["value"], g["mean_dev_f1"], g["std_dev_f1"]
        )
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dspert",
        description="Span-based NER with deep span representations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=("bio", "jsonl"), default="jsonl")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="write entity predictions as JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=("bio", "jsonl"), default="jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("analyze", help="pre-logit statistics and PCA export")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=("bio", "jsonl"), default="jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("ablate", help="run an ablation grid over seeds")
    p.add_argument("axis", choices=sorted(_ABLATION_AXES))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--depths", default=None, help="comma-separated span depths")
    p.add_argument("--aggregations", default=None)
    p.add_argument("--heads", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gen-synth", help="generate a synthetic nested corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-dev", type=int, default=20)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--vocab-size", type=int, default=40)
    p.add_argument("--nest-rate", type=float, default=0.5)
    p.add_argument("--max-len", type=int, default=12)
    p.set_defaults(func=_cmd_gen_synth)

    return parser


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s [%(levelname)s] %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DspertError, OSError) as exc:
        logger.error("%s", exc)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Run configuration: flat key/value files with dotted sections.

A config file holds ``section.key = value`` lines (or ``[section]``
headers followed by plain ``key = value`` lines), ``#`` comments, and
scalar values: booleans, integers, floats, quoted or bare strings, and
comma-separated lists. Section names are ``model``, ``train``, ``data``,
and ``run``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _parse_scalar(raw: str):
    text = raw.strip()
    if not text:
        raise ConfigError("empty value")
    if "," in text:
        return [_parse_scalar(part) for part in text.split(",")]
    if text.startswith(("[", "(")) and text.endswith(("]", ")")):
        inner = text[1:-1].strip()
        return [_parse_scalar(p) for p in inner.split(",")] if inner else []
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if (text[0] == text[-1]) and text[0] in "'\"" and len(text) >= 2:
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict:
    """Parse the flat dotted-key format into nested section dicts."""
    sections: dict[str, dict] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        dotted = key.split(".")
        if len(dotted) == 2:
            section, name = dotted
        elif len(dotted) == 1 and current is not None:
            section, name = current, key
        else:
            raise ConfigError(
                f"config line {lineno}: key {key!r} needs a 'section.name' form "
                "or an enclosing [section]"
            )
        try:
            parsed = _parse_scalar(value)
        except ConfigError as exc:
            raise ConfigError(f"config line {lineno}: {exc}") from None
        sections.setdefault(section, {})[name] = parsed
    return sections


@dataclass
class DataConfig:
    train: str = ""
    dev: str = ""
    test: str = ""
    format: str = "jsonl"

    def validate(self) -> None:
        if self.format not in ("bio", "jsonl"):
            raise ConfigError(f"data format must be 'bio' or 'jsonl', got {self.format!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "DataConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown data config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


# Model-section keys the model itself infers from the corpus.
_DERIVED_MODEL_KEYS = ("vocab_size", "num_entity_types")

# Accepted but fixed-at-one layer counts, for config-surface completeness.
_FIXED_ONE_KEYS = ("lstm_layers", "ffn_layers")


@dataclass
class RunConfig:
    """Everything one run needs: model and train settings, data paths,
    and the seed list for repeated runs."""

    model: dict = field(default_factory=dict)  # ModelConfig kwargs sans derived
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: list[int] = field(default_factory=lambda: [0])

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        sections = parse_config_text(text)
        known_sections = {"model", "train", "data", "run"}
        unknown = sorted(set(sections) - known_sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")

        model_kwargs = dict(sections.get("model", {}))
        for key in _FIXED_ONE_KEYS:
            value = model_kwargs.pop(key, 1)
            if value != 1:
                raise ConfigError(f"{key} is fixed at 1, got {value}")
        for key in _DERIVED_MODEL_KEYS:
            if key in model_kwargs:
                raise ConfigError(f"model.{key} is derived from the corpus")
        # Validate remaining keys against ModelConfig using placeholders.
        ModelConfig.from_dict({"vocab_size": 2, "num_entity_types": 1, **model_kwargs})

        train = TrainConfig.from_dict(sections.get("train", {}))
        data = DataConfig.from_dict(sections.get("data", {}))

        run_section = dict(sections.get("run", {}))
        seeds = run_section.pop("seeds", [train.seed])
        if isinstance(seeds, int):
            seeds = [seeds]
        if run_section:
            raise ConfigError(
                f"unknown run config keys: {', '.join(sorted(run_section))}"
            )
        if not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("run.seeds must be a non-empty list of integers")
        return cls(model=model_kwargs, train=train, data=data, seeds=seeds)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(
            model=dict(data.get("model", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            data=DataConfig.from_dict(data.get("data", {})),
            seeds=list(data.get("seeds", [0])),
        )

    def model_config(self, vocab_size: int, num_entity_types: int) -> ModelConfig:
        return ModelConfig.from_dict(
            {
                "vocab_size": vocab_size,
                "num_entity_types": num_entity_types,
                **self.model,
            }
        )

    def to_dict(self) -> dict:
        return {
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "data": {
                "train": self.data.train,
                "dev": self.data.dev,
                "test": self.data.test,
                "format": self.data.format,
            },
            "seeds": list(self.seeds),
        }

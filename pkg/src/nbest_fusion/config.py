"""Run configuration: one JSON document with a section per pipeline stage."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .pretrain import PretrainConfig
from .trainer import TrainConfig, config_hash
from .translator import ToyTask, TranslatorConfig


class ConfigKeyError(KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0])


@dataclass
class TaskSection:
    name: str = "toyA-toyB"
    seed: int = 0
    n_words: int = 40
    min_words: int = 3
    max_words: int = 5
    min_chars: int = 2
    max_chars: int = 4
    successors: int = 5
    noise: float = 0.1
    source_noise: float = 0.0
    translator_pairs: int = 3000
    fusion_pairs: int = 3000

    def toy_task(self) -> ToyTask:
        d = dataclasses.asdict(self)
        del d["translator_pairs"], d["fusion_pairs"]
        return ToyTask(**d)


@dataclass
class ModelSection:
    prompt_len: int = 10
    n_tunable: int | None = None
    lora_rank: int = 4
    lora_alpha: float = 8.0
    mode: str = "adapter"
    seed: int = 0


@dataclass
class DecodeSection:
    beam_size: int = 5
    length_penalty: float = 1.0


@dataclass
class DataSection:
    split_ratios: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    seed: int = 0
    instruction: str = "Integrate the following {n} translation candidates into one best translation:"
    separator: str = "\n"
    response_marker: str = "Answer: "
    dedup: bool = False


@dataclass
class EvalSection:
    n_use_sweep: list[int] = field(default_factory=lambda: [1, 3, 5])
    compare_modes: list[str] = field(default_factory=lambda: ["adapter", "lora"])
    coverage_max_n: int = 3
    coverage_unit: str = "char"

    def __post_init__(self):
        if self.coverage_unit not in ("word", "char"):
            raise ValueError("coverage_unit must be 'word' or 'char'")


@dataclass
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    decode: DecodeSection = field(default_factory=DecodeSection)
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self, *sections: str) -> str:
        """Hash of the named sections (all of them when none are given)."""
        d = self.to_dict()
        return config_hash({k: d[k] for k in (sections or d)})

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(obj) - set(sections)
        if unknown:
            raise ConfigKeyError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for name, f in sections.items():
            section_cls = f.default_factory().__class__
            values = obj.get(name, {})
            if not isinstance(values, dict):
                raise ConfigKeyError(f"section {name!r} must be an object")
            known = {sf.name for sf in dataclasses.fields(section_cls)}
            bad = set(values) - known
            if bad:
                raise ConfigKeyError(f"unknown key(s) in [{name}]: {sorted(bad)}")
            kwargs[name] = section_cls(**values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, else stay strings."""
        d = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot:
                raise ConfigKeyError(f"override {item!r} is not of the form section.key=value")
            if section not in d:
                raise ConfigKeyError(f"unknown config section {section!r}")
            if name not in d[section]:
                raise ConfigKeyError(f"unknown key {name!r} in [{section}]")
            d[section][name] = _parse_value(raw)
        return RunConfig.from_dict(d)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw

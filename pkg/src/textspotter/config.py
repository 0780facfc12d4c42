"""Declarative run configuration: JSON file with one section per concern.

Sections: data (synthetic rendering / dataset paths), model, train, eval,
io. Flag overrides are applied on top of the file; the resolved config is
echoed as a manifest next to every command's outputs and re-parses to an
equal RunConfig.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from textspotter.data import SyntheticConfig
from textspotter.evaluation import LEXICON_MODES
from textspotter.model import ModelConfig
from textspotter.training import TrainSettings


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass
class DataSection:
    dataset_dir: str = ""
    num_images: int = 100
    canvas_size: int = 64
    lexicon: list[str] = field(default_factory=list)
    instances_min: int = 1
    instances_max: int = 3
    glyph_size: int = 10
    noise_level: float = 0.05
    seed: int | None = None

    def synthetic_config(self) -> SyntheticConfig:
        if self.seed is None:
            raise ConfigError("data.seed is mandatory")
        return SyntheticConfig(
            canvas_size=self.canvas_size,
            lexicon=tuple(self.lexicon),
            instances_min=self.instances_min,
            instances_max=self.instances_max,
            glyph_size=self.glyph_size,
            noise_level=self.noise_level,
            seed=self.seed,
        )


@dataclass
class EvalSection:
    lexicon_mode: str = "none"
    lexicon_path: str = ""
    max_decode_len: int = 164
    batch_size: int = 32

    def __post_init__(self):
        if self.lexicon_mode not in LEXICON_MODES:
            raise ConfigError(f"unknown lexicon mode {self.lexicon_mode!r}")


@dataclass
class IoSection:
    out_dir: str = "run"
    checkpoint: str = ""


@dataclass
class TrainSection:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    seed: int | None = None
    instruction_mode: str = "on"
    freeze_text_encoder: bool = False
    shuffle_target_order: bool = False
    log_every: int = 50

    def settings(self) -> TrainSettings:
        if self.seed is None:
            raise ConfigError("train.seed is mandatory")
        return TrainSettings(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            seed=self.seed,
            instruction_mode=self.instruction_mode,
            freeze_text_encoder=self.freeze_text_encoder,
            shuffle_target_order=self.shuffle_target_order,
            log_every=self.log_every,
        )


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IoSection = field(default_factory=IoSection)

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "io": asdict(self.io),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {"data", "model", "train", "eval", "io"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

        def build(section_cls, key):
            payload = dict(raw.get(key, {}))
            names = {f for f in section_cls.__dataclass_fields__}
            bad = set(payload) - names
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
            try:
                return section_cls(**payload)
            except (TypeError, ValueError) as err:
                raise ConfigError(f"invalid [{key}] section: {err}") from err

        return cls(
            data=build(DataSection, "data"),
            model=build(ModelConfig, "model"),
            train=build(TrainSection, "train"),
            eval=build(EvalSection, "eval"),
            io=build(IoSection, "io"),
        )


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    return RunConfig.from_dict(raw)


def write_manifest(out_dir, config: RunConfig, command: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"command": command, **config.to_dict()}, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(path) -> tuple[str, RunConfig]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    command = raw.pop("command", "")
    return command, RunConfig.from_dict(raw)

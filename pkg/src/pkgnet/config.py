"""Experiment configuration: YAML sections ``data, teacher, student, loss,
train, score, eval`` mapped onto dataclasses, with dot-path overrides."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .data import SyntheticConfig
from .loss import LossWeights
from .model import StudentConfig, TeacherSpec


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class DataConfig:
    source: str = "directory"          # "directory" or "synthetic"
    root: str | None = None
    train_split: str = "train"
    test_split: str = "test"
    channels: int = 3
    temporal_window: int = 4
    confidence_threshold: float = 0.5
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 60
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 128
    epochs: int = 120
    checkpoint_every: int = 20
    seed: int = 0
    patience: int | None = None
    cache_teacher: bool = True


@dataclass
class ScoreSection:
    w_e: float = 0.01
    w_c: dict[int, float] = field(default_factory=lambda: {1: 0.65, 2: 0.35})
    policy: str = "top_k_mean:3"
    window: int = 15
    ddof: int = 1
    batch_size: int = 256


@dataclass
class EvalSection:
    smoothed: bool = True


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    student: StudentConfig = field(default_factory=StudentConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSection = field(default_factory=TrainSection)
    score: ScoreSection = field(default_factory=ScoreSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> list[str]:
        errs = []
        errs += [f"teacher: {e}" for e in self.teacher.validate()]
        errs += [f"student: {e}" for e in self.student.validate()]
        errs += [f"loss: {e}" for e in self.loss.validate()]
        if self.data.source not in ("directory", "synthetic"):
            errs.append(f"data.source must be 'directory' or 'synthetic', got {self.data.source!r}")
        if self.data.source == "directory" and not self.data.root:
            errs.append("data.root is required when data.source is 'directory'")
        if self.data.source == "synthetic":
            errs += [f"data.synthetic: {e}" for e in self.data.synthetic.validate()]
            if self.data.synthetic.channels != self.data.channels:
                errs.append("data.synthetic.channels must equal data.channels")
        if self.data.temporal_window < 1:
            errs.append("data.temporal_window must be >= 1")
        if self.student.input_frames != self.data.temporal_window:
            errs.append(f"student.input_frames ({self.student.input_frames}) must equal data.temporal_window "
                        f"({self.data.temporal_window})")
        if self.student.channels_per_frame != self.data.channels:
            errs.append("student.channels_per_frame must equal data.channels")
        if self.student.mode != "AE_only" and self.teacher.tap_blocks and \
                max(self.teacher.tap_blocks) > self.student.bottleneck_block:
            errs.append("teacher.tap_blocks may not go deeper than student.bottleneck_block")
        if self.student.mode != "AE_only" and set(self.score.w_c) != set(self.teacher.tap_blocks):
            errs.append(f"score.w_c keys {sorted(self.score.w_c)} must equal teacher.tap_blocks "
                        f"{self.teacher.tap_blocks}")
        t = self.train
        if t.learning_rate <= 0 or t.batch_size < 1 or t.epochs < 1 or t.lr_decay_every < 1:
            errs.append("train: learning_rate, batch_size, epochs and lr_decay_every must be positive")
        if not 0 < t.lr_decay_factor <= 1:
            errs.append("train.lr_decay_factor must lie in (0, 1]")
        if self.score.window < 1 or self.score.window % 2 == 0:
            errs.append("score.window must be an odd integer >= 1")
        from .scoring import ScoringError, parse_policy
        try:
            parse_policy(self.score.policy)
        except ScoringError as exc:
            errs.append(f"score.policy: {exc}")
        return errs


# --------------------------------------------------------------------------- (de)serialisation

def _build(cls, raw: Any, path: str, errs: list[str]):
    if not dataclasses.is_dataclass(cls):
        return raw
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errs.append(f"{path or 'config'}: expected a mapping")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in raw:
        if k not in names:
            errs.append(f"unknown key {path + '.' if path else ''}{k}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        v, hint = raw[f.name], hints[f.name]
        sub = f"{path}.{f.name}" if path else f.name
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, v, sub, errs)
        elif typing.get_origin(hint) is dict and isinstance(v, dict):
            kwargs[f.name] = {int(k): float(x) for k, x in v.items()}
        elif typing.get_origin(hint) is tuple and isinstance(v, (list, tuple)):
            kwargs[f.name] = tuple(v)
        elif hint is float and isinstance(v, int) and not isinstance(v, bool):
            kwargs[f.name] = float(v)
        else:
            kwargs[f.name] = v
    return cls(**kwargs)


def from_dict(raw: dict | None) -> Config:
    errs: list[str] = []
    cfg = _build(Config, raw or {}, "", errs)
    if errs:
        raise ConfigError(errs)
    return cfg


def to_dict(cfg: Config) -> dict:
    def conv(x):
        if dataclasses.is_dataclass(x):
            return {f.name: conv(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [conv(v) for v in x]
        return x
    return conv(cfg)


def dump(cfg: Config, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
    return path


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("pkgnet.presets").iterdir() if p.name.endswith(".yaml"))


def _read(path_or_preset: str | Path) -> dict:
    p = Path(path_or_preset)
    if not p.is_file():
        name = str(path_or_preset)
        res = resources.files("pkgnet.presets") / f"{name}.yaml"
        if not res.is_file():
            raise ConfigError([f"missing config file {path_or_preset} (presets: {', '.join(preset_names())})"])
        return yaml.safe_load(res.read_text()) or {}
    return yaml.safe_load(p.read_text()) or {}


def set_dotted(raw: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError([f"cannot override {dotted}: {k} is not a section"])
    node[keys[-1]] = value


def load(path_or_preset: str | Path | None = None, overrides: dict[str, Any] | None = None,
         validate: bool = True) -> Config:
    """Load a YAML file or a shipped preset name, apply dot-path overrides, validate."""
    raw = _read(path_or_preset) if path_or_preset else {}
    for k, v in (overrides or {}).items():
        set_dotted(raw, k, v)
    cfg = from_dict(raw)
    if validate:
        errs = cfg.validate()
        if errs:
            raise ConfigError(errs)
    return cfg

"""Run configuration: an INI-style key=value file where every key has a default.

Sections map onto the component dataclasses (``[synth]``, ``[model]``,
``[train]``, ``[sampling]``, ``[alignment]``) plus ``[paths]``,
``[evaluate]`` and ``[sweep]``. An empty file resolves to all defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .alignment import AlignmentConfig
from .data import ConfigError, SynthConfig
from .model import ModelConfig
from .sampling import SamplingConfig
from .training import TrainConfig

INF = math.inf

SWEEP_AXES = ("radii", "k_negatives", "clusters", "alpha2")


@dataclass
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = "runs/train"
    snapshot: str = ""  # empty means <run_dir>/snapshot

    def validate(self) -> None:
        if not self.data_dir or not self.run_dir:
            raise ConfigError("paths.data_dir and paths.run_dir must be non-empty")


@dataclass
class EvaluateConfig:
    cold_threshold: int = 3

    def validate(self) -> None:
        if self.cold_threshold < 1:
            raise ConfigError(f"evaluate.cold_threshold must be >= 1, got {self.cold_threshold}")


def _default_radii() -> tuple:
    grid = tuple((p, n) for p in (5.0, 10.0, 30.0) for n in (5.0, 10.0, 30.0))
    return grid + ((INF, INF),)


@dataclass
class SweepConfig:
    # (positive radius, negative radius) pairs; inf disables the constraint
    radii: tuple = field(default_factory=_default_radii)
    k_negatives: tuple = (3, 6, 9, 12, 15)
    clusters: tuple = (5, 25, 50, 75, 100)
    alpha2: tuple = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)

    def validate(self) -> None:
        for axis in SWEEP_AXES:
            if not getattr(self, axis):
                raise ConfigError(f"sweep.{axis} needs at least one setting")

    def settings(self, axis: str) -> tuple:
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
        return getattr(self, axis)


SECTIONS = {
    "synth": SynthConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampling": SamplingConfig,
    "alignment": AlignmentConfig,
    "paths": PathsConfig,
    "evaluate": EvaluateConfig,
    "sweep": SweepConfig,
}


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, synth=replace(self.synth, seed=seed), train=replace(self.train, seed=seed))

    @property
    def snapshot_path(self) -> Path:
        return Path(self.paths.snapshot) if self.paths.snapshot else Path(self.paths.run_dir) / "snapshot"

    def to_text(self) -> str:
        out = []
        for name in SECTIONS:
            out.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                out.append(f"{f.name} = {format_value(getattr(section, f.name))}")
            out.append("")
        return "\n".join(out)

    def write(self, out_dir, name: str = "config.resolved.ini") -> Path:
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if v == INF else repr(v)
    if isinstance(v, tuple):
        return ", ".join(":".join(format_value(x) for x in item) if isinstance(item, tuple) else format_value(item)
                         for item in v)
    return str(v)


def _parse_bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse_scalar(key: str, text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            return _parse_bool(key, text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def _parse_value(key: str, text: str, default):
    if not isinstance(default, tuple):
        return _parse_scalar(key, text, default)
    items = [t.strip() for t in text.split(",") if t.strip()]
    if default and isinstance(default[0], tuple):
        out = []
        for item in items:
            parts = item.split(":")
            if len(parts) != len(default[0]):
                raise ConfigError(f"{key}: expected {len(default[0])} ':'-separated values in {item!r}")
            out.append(tuple(_parse_scalar(key, p, x) for p, x in zip(parts, default[0])))
        return tuple(out)
    like = default[0] if default else 0.0
    return tuple(_parse_scalar(key, t, like) for t in items)


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    parts = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]; known: {', '.join(SECTIONS)}")
    for name, cls in SECTIONS.items():
        known = {f.name: f for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"unknown key {name}.{key}")
                values[key] = _parse_value(f"{name}.{key}", raw, _default_of(known[key]))
        parts[name] = cls(**values)
    return RunConfig(**parts).validate()


def load_config(path=None) -> RunConfig:
    """Read a config file; ``None`` yields the defaults."""
    if path is None:
        return RunConfig().validate()
    return parse_config(Path(path).read_text(encoding="utf-8"))

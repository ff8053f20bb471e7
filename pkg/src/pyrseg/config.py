"""``section.key = value`` run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .network import NetworkConfig
from .training import CtsConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MetricOptions:
    connectivity: int = 26
    min_fraction: float = 0.1
    postprocess: bool = True

    def __post_init__(self):
        if self.connectivity not in (6, 26):
            raise ValueError("metrics.connectivity must be 6 or 26")
        if not 0.0 <= self.min_fraction <= 1.0:
            raise ValueError("metrics.min_fraction must be in [0, 1]")


@dataclass(frozen=True)
class DataOptions:
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(v) for v in self.split))
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError("data.split must be three non-negative ratios summing to 1")


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cts: CtsConfig = field(default_factory=CtsConfig)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    data: DataOptions = field(default_factory=DataOptions)

    def __post_init__(self):
        self.cts.check(self.train, allow_single=True)


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _section_types(name: str):
    cls = _SECTIONS[name].default_factory
    return cls, {f.name: f for f in dataclasses.fields(cls)}


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        items = [v for v in raw.replace(" ", "").split(",") if v]
        kind = type(current[0]) if current else int
        return tuple(kind(v) for v in items)
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or default_config()
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        _, fields = _section_types(section)
        if name not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        current = getattr(getattr(base, section), name)
        try:
            values[section][name] = _parse_value(raw, current)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    try:
        sections = {
            name: dataclasses.replace(getattr(base, name), **vals) if vals else getattr(base, name)
            for name, vals in values.items()
        }
        return RunConfig(**sections)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def default_config() -> RunConfig:
    return RunConfig()


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    lines = ["# fully resolved run configuration"]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"

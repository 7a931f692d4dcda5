"""Run configuration: YAML in, validated dataclasses out.

Errors name the offending field and, when the text came from a file, the
line it sits on.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .codes import SyncCodeConfig
from .feedback import FeedbackConfig
from .finite_key import SecurityParams
from .link import ChannelDriftModel, DriftMode, LinkConfig
from .optics import IntensitySetting


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DriftConfig:
    mode: str = "static"
    step_interval: float = 300.0
    step_magnitude: float = 0.15
    seed: int = 0

    def __post_init__(self):
        DriftMode(self.mode)
        if not self.step_interval > 0:
            raise ValueError("step_interval must be positive")
        if self.step_magnitude < 0:
            raise ValueError("step_magnitude must be non-negative")

    def build(self) -> ChannelDriftModel:
        return ChannelDriftModel(DriftMode(self.mode), self.step_interval, self.step_magnitude, self.seed)


@dataclass(frozen=True)
class BenchConfig:
    """Loss sweep used by ``sync-bench``; losses are channel losses in dB."""

    losses: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    skew_ppm: tuple = (0.0, 20.0)
    jitter_sigma: float = 30e-12
    max_frames: int = 64

    def __post_init__(self):
        object.__setattr__(self, "losses", tuple(float(x) for x in self.losses))
        object.__setattr__(self, "skew_ppm", tuple(float(x) for x in self.skew_ppm))
        if any(x < 0 for x in self.losses):
            raise ValueError("losses must be non-negative")
        if len(self.skew_ppm) != 2 or self.skew_ppm[0] > self.skew_ppm[1]:
            raise ValueError("skew_ppm is a [low, high] range")
        if self.max_frames < 1:
            raise ValueError("max_frames must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    link: LinkConfig = field(default_factory=LinkConfig)
    sync: SyncCodeConfig = field(default_factory=SyncCodeConfig)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
    security: SecurityParams = field(default_factory=SecurityParams)
    drift: DriftConfig = field(default_factory=DriftConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    block_duration: float = 1.0
    # event-level simulated time per block; the rest of the block is skipped
    sample_duration: float = 1.0
    total_duration: float = 60.0
    feedback_enabled: bool = True
    dump_events: bool = False
    output_dir: str = "out"
    name: str = "custom"

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an integer in [0, 2**64)")
        if not self.block_duration > 0:
            raise ValueError("block_duration must be positive")
        if not self.block_duration <= self.total_duration:
            raise ValueError("block_duration must not exceed total_duration")
        if not 0 < self.sample_duration <= self.block_duration:
            raise ValueError("sample_duration must lie in (0, block_duration]")

    @property
    def n_blocks(self) -> int:
        return int(math.floor(self.total_duration / self.block_duration + 1e-9))

    @property
    def slots_per_block(self) -> int:
        return int(round(self.block_duration / self.link.tau_a))

    @property
    def slots_per_sample(self) -> int:
        return int(round(self.sample_duration / self.link.tau_a))

    def to_dict(self) -> dict:
        link = dataclasses.asdict(self.link)
        link["intensities"] = dataclasses.asdict(self.link.intensities)
        return {
            "name": self.name,
            "seed": self.seed,
            "block_duration": self.block_duration,
            "sample_duration": self.sample_duration,
            "total_duration": self.total_duration,
            "feedback_enabled": self.feedback_enabled,
            "dump_events": self.dump_events,
            "output_dir": self.output_dir,
            "link": link,
            "sync": self.sync.to_dict(),
            "feedback": dataclasses.asdict(self.feedback),
            "security": dataclasses.asdict(self.security),
            "drift": dataclasses.asdict(self.drift),
            "bench": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self.bench).items()},
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SECTIONS = {
    "link": LinkConfig,
    "sync": SyncCodeConfig,
    "feedback": FeedbackConfig,
    "security": SecurityParams,
    "drift": DriftConfig,
    "bench": BenchConfig,
}
_SCALARS = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)


def _line_map(text: str) -> dict:
    """Map dotted key paths to 1-based line numbers."""
    out = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)

    walk(root, "")
    return out


def _build(cls, data, path, lines, errors):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errors.append(_msg(path, "must be a mapping", lines))
        return None
    n_before = len(errors)
    known = {f.name for f in dataclasses.fields(cls) if f.init and not f.name.startswith("_")}
    if cls is SyncCodeConfig:
        known.discard("code")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}"
        if key not in known:
            errors.append(_msg(sub, "unknown field", lines))
            continue
        if cls is LinkConfig and key == "intensities":
            try:
                value = IntensitySetting(**value)
            except (TypeError, ValueError) as exc:
                errors.append(_msg(sub, str(exc), lines))
                continue
        kwargs[key] = value
    if len(errors) > n_before:
        return None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        named = [k for k in kwargs if k in str(exc)]
        target = f"{path}.{named[0]}" if named else path
        errors.append(_msg(target, str(exc), lines, keys=list(kwargs)))
        return None


def _msg(path, text, lines, keys=()):
    line = lines.get(path)
    if line is None:
        for k in keys:
            if f"{path}.{k}" in lines:
                line = lines[f"{path}.{k}"]
                break
    where = f" (line {line})" if line else ""
    return f"{path}: {text}{where}"


def config_from_dict(data: dict, text: str = "") -> RunConfig:
    lines = _line_map(text) if text else {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    errors = []
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            built = _build(_SECTIONS[key], value, key, lines, errors)
            if built is not None:
                kwargs[key] = built
        elif key in _SCALARS:
            kwargs[key] = value
        else:
            errors.append(_msg(key, "unknown field", lines))
    if errors:
        raise ConfigError("; ".join(errors))
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"run: {exc}") from None


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ConfigError(f"invalid YAML{where}: {getattr(exc, 'problem', exc)}") from None
    return config_from_dict(data or {}, text)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


# attenuation reproduces the measured total channel loss of each distance
_PRESETS = {
    "0km": dict(fiber_length=0.0, fiber_attenuation=0.2,
                intensities=IntensitySetting(0.5, 0.1, 0.9, 0.5)),
    "50km": dict(fiber_length=50.0, fiber_attenuation=0.19914,
                 intensities=IntensitySetting(0.568, 0.144, 0.799, 0.944)),
    "100km": dict(fiber_length=100.0, fiber_attenuation=0.18857,
                  intensities=IntensitySetting(0.565, 0.143, 0.798, 0.944)),
    "150km": dict(fiber_length=150.0, fiber_attenuation=0.19328,
                  intensities=IntensitySetting(0.564, 0.142, 0.798, 0.944)),
}
PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, **overrides) -> RunConfig:
    """Ready-made configuration for one of the standard link lengths."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    link = LinkConfig(**copy.deepcopy(_PRESETS[name]))
    return RunConfig(link=link, name=name, **overrides)

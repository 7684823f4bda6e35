"""Run configuration assembled from every module's settings.

A config file is YAML with one mapping per section:

    grid:     GridSpec
    pillars:  PillarConfig (without the grid)
    model:    ModelConfig
    tracker:  TrackerConfig
    train:    TrainConfig
    scene:    SceneConfig
    dataset:  DatasetConfig
    eval:     EvalConfig
    seed:     integer applied to every random source

Missing keys keep their defaults, unknown keys are rejected.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace, MISSING
from pathlib import Path
from typing import Any, Iterable

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import yaml

from .dataset import DatasetConfig, SceneConfig
from .enums import EvalMode
from .exceptions import ConfigError
from .nn.model import ModelConfig
from .pillars import PillarConfig
from .tracker import TrackerConfig
from .train import TrainConfig
from .types import GridSpec


TRACKER_KINDS = ('model', 'echo')


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol settings.

    Attributes:
        modes: Protocols to run, any of offline, realtime-pred and
            realtime-nonpred.
        data_rate: Sensor rate in Hz, or None to use the dataset's rate.
        latency: Injected latency per frame in seconds. None measures
            the tracker's own processing time instead.
        latency_periods: Injected latency as a multiple of the frame
            period. Takes priority over `latency`.
        workers: Parallel evaluation processes, 0 for one per
            physical core.
        device_label: Name to group real-time results by.
        tracker: Either the trained model or the ground truth echo mock.
    """

    modes: tuple[str, ...] = tuple(mode.value for mode in EvalMode)
    data_rate: float | None = None
    latency: float | None = None
    latency_periods: float | None = None
    workers: int = 0
    device_label: str = 'cpu'
    tracker: str = 'model'

    def __post_init__(self) -> None:
        object.__setattr__(self, 'modes', tuple(self.modes))
        valid = ', '.join(mode.value for mode in EvalMode)
        for mode in self.modes:
            try:
                EvalMode(mode)
            except ValueError:
                raise ConfigError(f'eval.modes must only contain {valid}, got {mode!r}') from None
        if not self.modes:
            raise ConfigError(f'eval.modes must contain at least one of {valid}')
        if self.data_rate is not None and not self.data_rate > 0:
            raise ConfigError(f'eval.data_rate must be positive, got {self.data_rate}')
        if self.latency is not None and not self.latency > 0:
            raise ConfigError(f'eval.latency must be positive, got {self.latency}')
        if self.latency_periods is not None and not self.latency_periods > 0:
            raise ConfigError(f'eval.latency_periods must be positive, got {self.latency_periods}')
        if self.workers < 0:
            raise ConfigError(f'eval.workers must not be negative, got {self.workers}')
        if self.tracker not in TRACKER_KINDS:
            raise ConfigError(f'eval.tracker must be one of {", ".join(TRACKER_KINDS)}, got {self.tracker!r}')

    @property
    def eval_modes(self) -> list[EvalMode]:
        return [EvalMode(mode) for mode in self.modes]

    def injected_latency(self, data_rate: float) -> float | None:
        """Get the injected latency in seconds, if any."""
        if self.latency_periods is not None:
            return self.latency_periods / data_rate
        return self.latency


SECTIONS: dict[str, type] = {
    'grid': GridSpec,
    'pillars': PillarConfig,
    'model': ModelConfig,
    'tracker': TrackerConfig,
    'train': TrainConfig,
    'scene': SceneConfig,
    'dataset': DatasetConfig,
    'eval': EvalConfig,
}


def _field_default(f: Any) -> Any:
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _coerce(value: Any, default: Any, key: str) -> Any:
    """Convert a parsed value to the type of a field's default.

    >>> _coerce(3, 0.5, 'x')
    3.0
    >>> _coerce([1, 2], (0.0, 1.0), 'x')
    (1.0, 2.0)
    """
    def fail() -> ConfigError:
        return ConfigError(f'{key} must be of type {type(default).__name__}, got {value!r}')

    match default:
        case bool():
            if isinstance(value, bool):
                return value
            raise fail()
        case int():
            if isinstance(value, bool):
                raise fail()
            if isinstance(value, int):
                return value
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise fail()
        case float():
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                return float(value)
            raise fail()
        case str():
            if isinstance(value, str):
                return value
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                return str(value)
            raise fail()
        case tuple():
            if isinstance(value, str):
                value = [value]
            if not isinstance(value, (list, tuple)):
                raise fail()
            if default:
                return tuple(_coerce(item, default[0], key) for item in value)
            return tuple(value)
        case None:
            if isinstance(value, (list, dict)):
                raise ConfigError(f'{key} must be a single value, got {value!r}')
            if isinstance(value, int) and not isinstance(value, bool):
                return float(value)
            return value
    raise fail()


def _section_defaults(section: str) -> dict[str, Any]:
    defaults = {f.name: _field_default(f) for f in fields(SECTIONS[section])}
    if section == 'pillars':
        del defaults['grid']
    return defaults


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


@dataclass(frozen=True)
class RunConfig:
    """Every setting used by a run."""

    grid: GridSpec = field(default_factory=GridSpec)
    pillars: PillarConfig = field(default_factory=PillarConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pillars.grid != self.grid:
            object.__setattr__(self, 'pillars', replace(self.pillars, grid=self.grid))

    @classmethod
    def desk(cls) -> Self:
        """Preset that generates, trains and evaluates in minutes on a CPU."""
        return cls(
            train=TrainConfig.desk(),
            scene=SceneConfig(speed_range=(0.0, 3.0), noise=0.02),
            dataset=DatasetConfig(train_sequences=20, val_sequences=5, test_sequences=5),
        )

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {}
        for section in SECTIONS:
            values = asdict(getattr(self, section))
            if section == 'pillars':
                del values['grid']
            data[section] = _plain(values)
        data['seed'] = self.seed
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: RunConfig | None = None) -> Self:
        """Build a config from nested sections on top of `base`.

        A top level seed that differs from the base seed replaces the
        seed of every section.

        Raises:
            ConfigError: If a section or key is unknown, or a value is
                invalid.
        """
        if not isinstance(data, dict):
            raise ConfigError(f'config must be a mapping of sections, got {type(data).__name__}')
        base = base or cls()
        current = base.to_dict()
        seed = None
        for section, values in data.items():
            if section == 'seed':
                seed = _coerce(values, 0, 'seed')
                continue
            if section not in SECTIONS:
                raise ConfigError(f'unknown config section {section!r} (valid sections: '
                                  f'{", ".join([*SECTIONS, "seed"])})')
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(f'config section {section!r} must be a mapping')
            defaults = _section_defaults(section)
            for key, value in values.items():
                if key not in defaults:
                    raise ConfigError(f'unknown config key {section}.{key}')
                current[section][key] = _coerce(value, defaults[key], f'{section}.{key}')
        config = cls._build(current)
        if seed is not None and seed != base.seed:
            config = config.with_seed(seed)
        return config

    @classmethod
    def _build(cls, data: dict[str, Any]) -> Self:
        sections: dict[str, Any] = {}
        for section, section_type in SECTIONS.items():
            values = {key: _coerce(value, default, f'{section}.{key}') if value is not None else None
                      for (key, value), default in zip(data[section].items(),
                                                       _section_defaults(section).values())}
            if section == 'pillars':
                values['grid'] = sections['grid']
            sections[section] = section_type(**values)
        return cls(**sections, seed=data['seed'])

    def with_overrides(self, overrides: Iterable[str]) -> Self:
        """Apply `section.key=value` overrides, parsing values as YAML.

        >>> RunConfig().with_overrides(['tracker.context_amount=0.26']).tracker.context_amount
        0.26
        """
        data: dict[str, dict[str, Any]] = {}
        for override in overrides:
            key, sep, raw = override.partition('=')
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f'override {override!r} must look like section.key=value')
            try:
                value = yaml.safe_load(raw)
            except yaml.YAMLError as e:
                raise ConfigError(f'invalid value for {key}: {e}') from e
            if key == 'seed':
                data['seed'] = value  # type: ignore[assignment]
                continue
            section, dot, name = key.partition('.')
            if not dot:
                raise ConfigError(f'unknown config key {key} (expected section.key)')
            data.setdefault(section, {})[name] = value
        return self.from_dict(data, self)

    def with_seed(self, seed: int) -> Self:
        """Use one seed for scene generation, initialisation and training."""
        return replace(self, seed=seed, scene=replace(self.scene, seed=seed),
                       model=replace(self.model, init_seed=seed), train=replace(self.train, seed=seed))

    @property
    def pillar_config(self) -> PillarConfig:
        return self.pillars

    def save(self, path: str | os.PathLike) -> None:
        """Save the config to a YAML file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(self.to_dict(), f, default_flow_style=False, sort_keys=False)

    @classmethod
    def load(cls, path: str | os.PathLike, base: RunConfig | None = None) -> Self:
        """Load a config from a YAML file.

        Raises:
            ConfigError: If the file can't be read or contains invalid
                settings.
        """
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f)
        except OSError as e:
            raise ConfigError(f'unable to read config {path}: {e}') from e
        except yaml.YAMLError as e:
            raise ConfigError(f'invalid config {path}: {e}') from e
        return cls.from_dict(data or {}, base)

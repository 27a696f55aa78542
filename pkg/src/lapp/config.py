"""Run configuration: one YAML file with a section per component."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .annotation import AnnotatorConfig, LLMConfig
from .envs import SEGMENT_FEATURES, EnvConfig
from .loop import LoopConfig, LoopSettings
from .preference_model import PredictorConfig
from .rl import PPOConfig
from .trainer import TrainerConfig

SCHEMA_VERSION = 1

SECTIONS = {
    "env": EnvConfig,
    "predictor": PredictorConfig,
    "trainer": TrainerConfig,
    "ppo": PPOConfig,
    "loop": LoopConfig,
    "annotator": AnnotatorConfig,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    annotator: AnnotatorConfig = field(default_factory=AnnotatorConfig)

    def settings(self):
        return LoopSettings(self.env, self.predictor, self.trainer, self.ppo, self.loop, self.annotator, self.seed)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)


def _line_index(text):
    """Map key paths like ("loop", "epochs") to 1-based source lines."""
    index = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                p = path + (key.value,)
                index[p] = key.start_mark.line + 1
                walk(value, p)

    root = yaml.compose(text, Loader=yaml.SafeLoader)
    if root is not None:
        walk(root, ())
    return index


def _where(lines, path):
    line = lines.get(tuple(path))
    return f" (line {line})" if line else ""


def _check_value(value, default, path, lines):
    name = ".".join(path)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(
            f"key '{name}'{_where(lines, path)} expects {type(default).__name__}, got {type(value).__name__}"
        )
    return value


def _build(cls, data, path, lines):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{'.'.join(path)}'{_where(lines, path)} must be a mapping")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        p = path + (key,)
        if key not in known:
            raise ConfigError(f"unknown key '{'.'.join(p)}'{_where(lines, p)}")
        value = _check_value(value, getattr(defaults, key), p, lines)
        if cls is AnnotatorConfig and key == "llm":
            value = dataclasses.asdict(_build(LLMConfig, value, p, lines))
        if cls is AnnotatorConfig and key == "weights":
            for feat, w in value.items():
                if feat not in SEGMENT_FEATURES:
                    raise ConfigError(f"unknown key '{'.'.join(p + (feat,))}'{_where(lines, p + (feat,))}")
                value[feat] = float(_check_value(w, 0.0, p + (feat,), lines))
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"section '{'.'.join(path)}'{_where(lines, path)}: {exc}") from exc


def parse_config(text):
    try:
        data = yaml.safe_load(text)
        lines = _line_index(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    kwargs = {}
    for key, value in data.items():
        if key in SECTIONS:
            kwargs[key] = _build(SECTIONS[key], value if value is not None else {}, (key,), lines)
        elif key in ("version", "seed"):
            kwargs[key] = _check_value(value, 0, (key,), lines)
        else:
            raise ConfigError(f"unknown key '{key}'{_where(lines, (key,))}")
    version = kwargs.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config version {version} is not supported (expected {SCHEMA_VERSION})")
    return RunConfig(**kwargs)


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def dump_config(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def save_config(config, path):
    Path(path).write_text(dump_config(config))

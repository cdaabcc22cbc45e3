"""Run configuration: one YAML file mirroring the module configs, plus overrides.

Precedence, lowest first: dataclass defaults, config file, ``HIURNET_SEED``,
command-line flags.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .baselines import GRAVITY_TRAIN_DEFAULTS
from .model import ModelConfig
from .synthcity import WorldConfig
from .training import TrainConfig
from .urban_graph import GraphOptions

SEED_ENV = "HIURNET_SEED"


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = "".join([f" key={key}" if key else "", f" line={line}" if line else ""])
        super().__init__(f"{message}{where}")
        self.key = key
        self.line = line


@dataclass(frozen=True)
class ExplainConfig:
    k: int = 10
    steps: int = 128


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    world: WorldConfig = field(default_factory=WorldConfig)
    graph: GraphOptions = field(default_factory=GraphOptions)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gravity: TrainConfig = GRAVITY_TRAIN_DEFAULTS
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def seeded(self) -> "RunConfig":
        """Push the top-level seed into every section that draws random numbers."""
        return replace(
            self,
            world=replace(self.world, seed=self.seed),
            train=replace(self.train, seed=self.seed),
            gravity=replace(self.gravity, seed=self.seed),
        )


# seeds live at the top level only, so one number reproduces a run
_SEEDLESS = {"world", "train", "gravity"}


def _line_map(text: str) -> dict[str, int]:
    """Dotted key -> 1-based line number, from the YAML node tree."""
    out: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{prefix}{k.value}"
                out[key] = k.start_mark.line + 1
                walk(v, key + ".")

    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", line=mark.line + 1 if mark else None) from None
    if root is not None:
        walk(root, "")
    return out


def _coerce(value: Any, default: Any, key: str, line: int | None):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key, line)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key, line)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key, line)
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", key, line)
        if default and len(value) != len(default) and not isinstance(default[0], str):
            raise ConfigError(f"expected {len(default)} values, got {len(value)}", key, line)
        proto = default[0] if default else value[0] if value else None
        return tuple(_coerce(v, proto, key, line) if proto is not None else v for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key, line)
        return value
    return value


def _apply(obj, values: dict, prefix: str, lines: dict[str, int]):
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for k, v in values.items():
        key = f"{prefix}{k}"
        line = lines.get(key)
        if k not in known:
            raise ConfigError("unknown key", key, line)
        default = getattr(obj, k)
        if dataclasses.is_dataclass(default):
            if not isinstance(v, dict):
                raise ConfigError("expected a mapping", key, line)
            changes[k] = _apply(default, v, key + ".", lines)
            continue
        if k == "seed" and prefix.rstrip(".") in _SEEDLESS:
            raise ConfigError("set the top-level seed instead", key, line)
        changes[k] = _coerce(v, default, key, line)
    try:
        return replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        first = next(iter(values), None)
        raise ConfigError(str(exc), f"{prefix}{first}".rstrip(".") if first else prefix.rstrip("."), lines.get(f"{prefix}{first}")) from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    lines = _line_map(text)
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1)
    return _apply(base or RunConfig(), data, "", lines)


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None, env=None) -> RunConfig:
    """Defaults, then the file, then ``HIURNET_SEED``, then dotted-key overrides."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_config(p.read_text(encoding="utf-8"), cfg)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = replace(cfg, seed=int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}", key=SEED_ENV) from None
    if overrides:
        nested: dict = {}
        for dotted, value in overrides.items():
            node = nested
            parts = dotted.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        cfg = _apply(cfg, nested, "", {})
    return cfg.seeded()


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if hasattr(v, "value"):
        return v.value
    return v


def config_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = {g.name: _plain(getattr(v, g.name)) for g in fields(v)}
        else:
            out[f.name] = _plain(v)
    return out


def describe_defaults() -> str:
    """Every configurable key with its default, for ``--help``."""
    lines = []
    for key, value in config_dict(RunConfig()).items():
        if isinstance(value, dict):
            for k, v in value.items():
                if k == "seed" and key in _SEEDLESS:
                    continue
                lines.append(f"  {key}.{k} = {v!r}")
        else:
            lines.append(f"  {key} = {value!r}")
    return "\n".join(lines)

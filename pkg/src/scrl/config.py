"""Sectioned key=value run configuration, parsed strictly.

Example::

    [env]
    kind = grid
    width = 9

    [train]
    batch_size = 256
    lambda = 0.5

Unknown sections or keys are errors, reported with their line number.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .algorithm import TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class EnvConfig:
    kind: str = "grid"
    width: int = 9
    height: int = 9
    slip_prob: float = 0.0
    dim: int = 2
    max_step: float = 0.1
    noise_std: float = 0.0
    horizon: int = 0  # 0 -> 50 for grids, 100 for point-mass
    image_size: int = 48
    channels: int = 1
    success_radius: float = 0.05

    def kwargs(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DataConfig:
    behavior: str = "scripted"
    num_transitions: int = 250_000
    seed: int = 0
    path: str = "data.scrl"


@dataclass
class EvalConfig:
    num_goals: int = 10
    horizon: int = 0  # 0 -> the process horizon
    criterion: str = "auto"  # auto | exact | l2
    radius: float = 0.05
    seed: int = 0
    num_alphas: int = 8
    num_rollouts: int = 10


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sections: tuple = ()  # sections present in the source file


SECTIONS = {"env": EnvConfig, "data": DataConfig, "train": TrainConfig, "eval": EvalConfig}
ALIASES = {"train": {"lambda": "lam"}}


def _line_of(lines, section, key=None):
    current = None
    for n, raw in enumerate(lines, 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return n
        elif key is not None and current == section and "=" in line:
            if line.split("=", 1)[0].strip().lower() == key:
                return n
    return 0


def _coerce(value: str, kind, where):
    try:
        if kind is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(float(value)) if "e" in value.lower() else int(value)
        if kind is float:
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {kind.__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    lines = text.splitlines()
    cp = configparser.ConfigParser(strict=True, interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{_line_of(lines, section)}: unknown section [{section}]")
        types = {f.name: type(f.default) for f in dataclasses.fields(SECTIONS[section])
                 if f.init and f.default is not dataclasses.MISSING}
        aliases = ALIASES.get(section, {})
        kw = {}
        for key, raw in cp.items(section):
            name = aliases.get(key, key)
            where = f"{source}:{_line_of(lines, section, key)}"
            if name not in types:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            kw[name] = _coerce(raw, types[name], where)
        values[section] = kw
    try:
        return RunConfig(
            env=EnvConfig(**values.get("env", {})),
            data=DataConfig(**values.get("data", {})),
            train=TrainConfig(**values.get("train", {})),
            eval=EvalConfig(**values.get("eval", {})),
            sections=tuple(cp.sections()),
        )
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def dump_config(cfg: RunConfig) -> str:
    out = []
    for name in SECTIONS:
        obj = getattr(cfg, name)
        out.append(f"[{name}]")
        inverse = {v: k for k, v in ALIASES.get(name, {}).items()}
        for f in dataclasses.fields(obj):
            out.append(f"{inverse.get(f.name, f.name)} = {getattr(obj, f.name)}")
        out.append("")
    return "\n".join(out)

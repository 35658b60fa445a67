"""INI-backed run configuration with typed keys and strict validation.

Every section maps onto a dataclass; unknown sections or keys are rejected.
Flag overrides are applied as `section.key=value` strings after file parsing.
A fully resolved echo of the configuration is written next to run outputs so
any run can be reproduced from its output directory alone.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .corpus import CorpusConfig
from .decode import DecodeConfig
from .grpo import GrpoConfig, RewardConfig
from .model import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection(CorpusConfig):
    count: int = 500
    seed: int = 0


@dataclass
class RvqSection:
    layers: int = 4
    codebook: int = 64
    downsample: int = 4
    iters: int = 60
    decay: float = 0.99
    dead_threshold: float = 1e-3
    seed: int = 0


@dataclass
class EvalSection:
    split: str = "test"
    limit: int = 50
    seed: int = 0


@dataclass
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    rvq: RvqSection = field(default_factory=RvqSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every section's seed field with the resolved run seed."""
        out = RunConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        for f in fields(out):
            sec = getattr(out, f.name)
            if any(sf.name == "seed" for sf in fields(sec)):
                setattr(out, f.name, replace(sec, seed=seed))
        return out


def _cast(value: str, target_type: type):
    if target_type is bool:
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"invalid boolean {value!r}")
    return target_type(value)


def _apply(cfg: RunConfig, section: str, key: str, value: str) -> None:
    sections = {f.name: f for f in fields(cfg)}
    if section not in sections:
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    for f in fields(obj):
        if f.name == key:
            try:
                setattr(obj, key, _cast(value, type(getattr(obj, key))))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {section}.{key}: {e}") from e
            return
    raise ConfigError(f"unknown key {key!r} in section [{section}]")


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, value in parser[section].items():
                _apply(cfg, section, key, value)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        _apply(cfg, section, key, value)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved INI text (the reproducibility echo)."""
    parser = configparser.ConfigParser()
    for f in fields(cfg):
        obj = getattr(cfg, f.name)
        parser[f.name] = {sf.name: str(getattr(obj, sf.name)) for sf in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()

"""Experiment configuration files (YAML or JSON) with strict key checking.

Precedence, highest first: command-line flags, the config file, built-in
defaults. Relative paths in a config file resolve against the file's folder.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .encoder import EncoderConfig

OUTPUT_ENV = "IPTKIT_OUTPUT_DIR"
DEFAULT_OUTPUT = "iptkit-out"
ARMS = ("none", "parsing", "mlm")


class ConfigError(ValueError):
    """Schema or value problem in a config; the message names the key."""


@dataclass
class ScheduleOverrides:
    max_epochs: int | None = None
    batch_size: int | None = None
    eval_every: int | None = None
    patience: int | None = None
    lr: float | None = None
    max_steps: int | None = None

    def merged(self, other: "ScheduleOverrides | None") -> "ScheduleOverrides":
        if other is None:
            return self
        return ScheduleOverrides(**{f.name: (getattr(other, f.name) if getattr(other, f.name) is not None
                                             else getattr(self, f.name))
                                    for f in dataclasses.fields(self)})

    def as_kwargs(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


@dataclass
class TreebankPaths:
    train: str = ""
    dev: str = ""
    test: str = ""
    strict: bool = True


@dataclass
class TokenizerSection:
    vocab_size: int = 8000
    path: str = ""


@dataclass
class IptSection:
    mode: str = "standard"
    schedule: ScheduleOverrides = field(default_factory=ScheduleOverrides)


@dataclass
class IlmtSection:
    mode: str = "standard"
    rate: float = 0.15
    train: str = ""
    dev: str = ""
    schedule: ScheduleOverrides = field(default_factory=ScheduleOverrides)


@dataclass
class TaskSection:
    name: str = ""
    kind: str = "seqc"
    train: str = ""
    dev: str = ""
    test: str = ""
    nli_like: bool = False
    schedule: ScheduleOverrides = field(default_factory=ScheduleOverrides)


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = ""
    decode: str = "greedy"
    base_checkpoint: str = ""
    encoder: dict = field(default_factory=dict)
    adapter_size: int = 64
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    treebank: TreebankPaths = field(default_factory=TreebankPaths)
    schedule: ScheduleOverrides = field(default_factory=ScheduleOverrides)
    ipt: IptSection = field(default_factory=IptSection)
    ilmt: IlmtSection = field(default_factory=IlmtSection)
    tasks: list = field(default_factory=list)
    arms: list = field(default_factory=lambda: list(ARMS))

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(**{**self.encoder, "vocab_size": vocab_size})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output folder excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha1(blob).hexdigest()[:12]

    def out_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


_NESTED = {
    "tokenizer": TokenizerSection, "treebank": TreebankPaths, "schedule": ScheduleOverrides,
    "ipt": IptSection, "ilmt": IlmtSection,
}
_PATH_KEYS = {"train", "dev", "test", "path", "base_checkpoint"}


def _check_type(key: str, value: Any, expected: Any) -> Any:
    if value is None:
        return None
    kinds = {"int": int, "float": (int, float), "bool": bool, "str": str,
             "int | None": int, "float | None": (int, float), "list": list, "dict": dict}
    want = kinds.get(expected if isinstance(expected, str) else getattr(expected, "__name__", ""))
    if want is None:
        return value
    if isinstance(value, bool) and want in (int, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if not isinstance(value, want):
        raise ConfigError(f"{key}: expected {expected}, got {type(value).__name__} {value!r}")
    return float(value) if want == (int, float) else value


def _build(cls, data: Any, where: str, base: Path):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in fields:
            raise ConfigError(f"unknown key '{path}'")
        if key == "schedule" or (cls is ExperimentConfig and key in _NESTED):
            kwargs[key] = _build(_NESTED[key], value, path, base)
        elif cls is ExperimentConfig and key == "tasks":
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
            kwargs[key] = [_build(TaskSection, t, f"{path}[{k}]", base) for k, t in enumerate(value)]
        elif cls is ExperimentConfig and key == "encoder":
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a mapping")
            known = {f.name for f in dataclasses.fields(EncoderConfig)} - {"vocab_size"}
            for k in value:
                if k not in known:
                    raise ConfigError(f"unknown key '{path}.{k}'")
            kwargs[key] = dict(value)
        else:
            value = _check_type(path, value, fields[key].type)
            if key in _PATH_KEYS and isinstance(value, str) and value:
                value = str((base / value)) if not os.path.isabs(value) else value
            kwargs[key] = value
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.decode not in ("greedy", "mst"):
        raise ConfigError(f"decode: expected 'greedy' or 'mst', got {cfg.decode!r}")
    for name, sec in (("ipt", cfg.ipt), ("ilmt", cfg.ilmt)):
        if sec.mode not in ("standard", "adapter"):
            raise ConfigError(f"{name}.mode: expected 'standard' or 'adapter', got {sec.mode!r}")
    if not 0.0 < cfg.ilmt.rate <= 1.0:
        raise ConfigError(f"ilmt.rate: must lie in (0, 1], got {cfg.ilmt.rate}")
    for k, arm in enumerate(cfg.arms):
        if arm not in ARMS:
            raise ConfigError(f"arms[{k}]: unknown arm {arm!r}; choose from {', '.join(ARMS)}")
    for k, t in enumerate(cfg.tasks):
        if t.kind not in ("seqc", "mcc"):
            raise ConfigError(f"tasks[{k}].kind: expected 'seqc' or 'mcc', got {t.kind!r}")
        if not t.name:
            t.name = f"{t.kind}{k}"
    try:
        enc = EncoderConfig(**{**cfg.encoder, "vocab_size": 1000})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"encoder: {exc}") from None
    if not 0 < cfg.adapter_size < enc.hidden:
        raise ConfigError(f"adapter_size: must lie in (0, {enc.hidden}), got {cfg.adapter_size}")


def config_from_dict(data: dict, base: str | Path = ".") -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {}, "", Path(base))
    _validate(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) if path.suffix.lower() in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    return config_from_dict(data or {}, path.parent)


def require_files(*paths: str) -> None:
    """Fail with FileNotFoundError naming the first missing path."""
    for p in paths:
        if not p:
            raise ConfigError("a required path is empty in the config")
        if not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")

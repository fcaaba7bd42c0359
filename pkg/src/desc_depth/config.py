"""Run configuration: one JSON document covering data, generator, training and evaluation.

Values resolve as command-line flag > config file > default. Structural
checks (types, unknown keys) are done by pydantic over the plain
dataclasses; semantic checks come from each section's ``validate``. All
violations are reported together.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

from pydantic import ConfigDict, TypeAdapter, ValidationError

from .evaluation import EvalSettings
from .losses import LossWeights
from .synthetic import GenerationError, SyntheticConfig
from .trainer import AblationFlags, ConfigError, NetworkConfig, TrainConfig

OUTPUT_ROOT_ENV = "DESC_OUTPUT_ROOT"
SCHEMA_PATH = Path(__file__).with_name("config_schema.json")


@dataclass
class DataConfig:
    root: str = "data/synthetic"
    train_split: str = "train"
    eval_split: str = "test"
    eval_domain: str = "target"

    def validate(self) -> list[str]:
        errors = []
        if self.eval_domain not in ("source", "target"):
            errors.append(f"data.eval_domain must be 'source' or 'target', got {self.eval_domain!r}")
        for name in ("train_split", "eval_split"):
            if getattr(self, name) not in ("train", "val", "test"):
                errors.append(f"data.{name} must be one of train/val/test")
        return errors


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    generator: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self) -> TrainConfig:
        """The training section with the run seed applied."""
        d = asdict(self.train)
        d["seed"] = self.seed
        return TrainConfig.from_dict(d)

    def output_path(self, *parts) -> Path:
        return resolve_output(self.output_dir).joinpath(*parts)


_SECTIONS = (DataConfig, RunConfig, SyntheticConfig, TrainConfig, LossWeights, AblationFlags, NetworkConfig,
             EvalSettings)
for _cls in _SECTIONS:
    _cls.__pydantic_config__ = ConfigDict(extra="forbid")
_ADAPTER = TypeAdapter(RunConfig)


def json_schema() -> dict:
    return _ADAPTER.json_schema()


def resolve_output(path) -> Path:
    """Relative output paths are placed under ``$DESC_OUTPUT_ROOT`` when it is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def leaf_keys(cls=RunConfig, prefix: str = "") -> list[str]:
    """Dotted paths of every scalar or tuple leaf of the config tree."""
    out = []
    defaults = cls()
    for f in fields(cls):
        value = getattr(defaults, f.name)
        if is_dataclass(value):
            out += leaf_keys(type(value), f"{prefix}{f.name}.")
        else:
            out.append(prefix + f.name)
    return out


def set_dotted(tree: dict, key: str, value: Any) -> None:
    node = tree
    *parents, last = key.split(".")
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: parent {p!r} is not a section")
    node[last] = value


def has_dotted(tree: dict, key: str) -> bool:
    node = tree
    for p in key.split("."):
        if not isinstance(node, dict) or p not in node:
            return False
        node = node[p]
    return True


def parse_flag_value(text: str) -> Any:
    """JSON literal if it parses (numbers, booleans, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return text


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _format_loc(loc) -> str:
    return ".".join(str(p) for p in loc)


def build_config(file_data: Optional[dict] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Merge defaults, file contents and dotted-key overrides, then validate everything.

    A pretraining run whose target weight was not set explicitly gets 0.
    """
    file_data = file_data or {}
    if not isinstance(file_data, dict):
        raise ConfigError("config file must contain a JSON object")
    tree = _merge({}, file_data)
    for key, value in (overrides or {}).items():
        set_dotted(tree, key, value)
    explicit_target = has_dotted(tree, "train.weights.target")
    explicit_train_seed = has_dotted(tree, "train.seed")
    try:
        cfg = _ADAPTER.validate_python(tree)
    except ValidationError as e:
        raise ConfigError([f"{_format_loc(err['loc'])}: {err['msg']}" for err in e.errors()]) from None
    if cfg.train.phase == "pretrain" and not explicit_target:
        cfg.train.weights.target = 0.0
    errors = []
    if explicit_train_seed and cfg.train.seed != cfg.seed:
        errors.append(f"train.seed ({cfg.train.seed}) conflicts with seed ({cfg.seed}); set only seed")
    cfg.train.seed = cfg.seed
    errors += cfg.data.validate() + cfg.train.validate() + cfg.eval.validate()
    try:
        cfg.generator.validate()
    except GenerationError as e:
        errors.append(f"generator: {e}")
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None

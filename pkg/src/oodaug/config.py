"""Pipeline configuration: one YAML file mapped onto nested dataclasses."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .datasets import SplitConfig
from .downstream import ClassifierConfig
from .metrics import RandomGinConfig
from .models import ArchConfig, TrainConfig
from .sampler import SamplerConfig
from .sde import DiffusionSde


class ConfigValidationError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass
class ModelSection:
    arch: ArchConfig = field(default_factory=ArchConfig)
    classifier_arch: Optional[ArchConfig] = None
    score_train: TrainConfig = field(default_factory=lambda: TrainConfig(max_steps=3000))
    classifier_train: TrainConfig = field(default_factory=lambda: TrainConfig(max_steps=3000))


@dataclass
class GuidanceSection:
    lambdas: list = field(default_factory=lambda: [round(0.1 * k, 1) for k in range(10)])
    r1: float = 0.5
    r2: float = 0.5
    alpha_cap: float = 10.0

    def __post_init__(self):
        for lam in self.lambdas:
            if not 0 <= float(lam) < 1:
                raise ValueError(f"lambda {lam} outside [0, 1)")


@dataclass
class SamplerSection:
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(num_steps=200))
    per_class: int = 100


@dataclass
class DownstreamSection:
    enabled: bool = True
    lambdas: list = field(default_factory=lambda: [0.1, 0.2])
    num_seeds: int = 5
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)


@dataclass
class PipelineConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: SplitConfig = field(default_factory=SplitConfig)
    sde_x: DiffusionSde = field(default_factory=DiffusionSde)
    sde_a: DiffusionSde = field(default_factory=DiffusionSde)
    model: ModelSection = field(default_factory=ModelSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: RandomGinConfig = field(default_factory=RandomGinConfig)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if tp is Any:
        return value
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigValidationError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigValidationError(path, f"expected a string, got {value!r}")
        return value
    return value


def build(cls, data, path: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, reporting the key path of any error."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigValidationError(path or "<root>", f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigValidationError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{path}.{f.name}" if path else f.name)
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigValidationError):
            raise
        raise ConfigValidationError(path or "<root>", str(err)) from None
    return obj


def load_config(path) -> PipelineConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as err:
        raise ConfigValidationError(str(path), f"invalid YAML ({err})") from None
    except OSError as err:
        raise ConfigValidationError(str(path), f"cannot read config ({err.strerror})") from None
    return build(PipelineConfig, data or {})


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_dict(v) for k, v in obj.items()}
    return obj


def digest(obj) -> str:
    blob = json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def derive_seed(global_seed: int, name: str) -> int:
    """Stable per-stage seed from the global seed and a stage name."""
    h = hashlib.sha256(f"{global_seed}:{name}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF

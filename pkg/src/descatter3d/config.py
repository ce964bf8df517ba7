"""JSON pipeline configuration with strict keys and dotted-path overrides."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .metrics import SpineCriteria
from .neural3d import NetworkConfig
from .phantom import PhantomSpec
from .scatter import NoiseParams, ScatterParams
from .trainer import TrainConfig


@dataclass(frozen=True)
class DatasetSection:
    cubes_per_source: int = 134
    cube_dims: tuple[int, int, int] = (32, 32, 16)
    seed: int = 0
    train_fraction: float = 0.95
    percentile: float = 99.9

    def __post_init__(self):
        if self.cubes_per_source < 1:
            raise ValueError("cubes_per_source must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must be in (0, 100]")


@dataclass(frozen=True)
class TilingSection:
    overlap: tuple[int, int, int] = (16, 16, 8)
    blend: str = "center_crop"
    seam_shift: tuple[int, int, int] = (0, 0, 0)
    percentile: float = 99.9

    def __post_init__(self):
        if self.blend not in ("center_crop", "hann"):
            raise ValueError(f"blend must be 'center_crop' or 'hann', got {self.blend!r}")


@dataclass(frozen=True)
class NetworkSection:
    n_stages: int = 2
    base_channels: int = 8
    convs_per_stage: int = 2
    input_dims: tuple[int, int, int] = (32, 32, 16)
    residual: bool = True
    init_seed: int = 0

    def __post_init__(self):
        self.build_config()  # validate

    def build_config(self) -> NetworkConfig:
        return NetworkConfig(self.n_stages, self.base_channels, self.convs_per_stage, self.input_dims, self.residual)


SECTIONS: dict[str, type] = {
    "phantom": PhantomSpec,
    "scatter": ScatterParams,
    "noise": NoiseParams,
    "dataset": DatasetSection,
    "network": NetworkSection,
    "train": TrainConfig,
    "tiling": TilingSection,
    "eval": SpineCriteria,
}


@dataclass(frozen=True)
class PipelineConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    scatter: ScatterParams = field(default_factory=ScatterParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    tiling: TilingSection = field(default_factory=TilingSection)
    eval: SpineCriteria = field(default_factory=SpineCriteria)

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def to_json(self) -> str:
        """Canonical form: sorted keys, resolved defaults, trailing newline."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<root>: expected a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown section")
        return cls(**{name: _build(SECTIONS[name], doc.get(name, {}), name) for name in SECTIONS})

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    unknown = sorted(set(doc) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}") for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        # validators start their messages with the field name when there is one
        head = str(exc).split(" ", 1)[0]
        where = f"{path}.{head}" if head in names else path
        raise ConfigError(f"{where}: {exc}") from exc


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` strings; values are parsed as JSON when possible."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"{item}: override must look like key.path=value")
        parts = key.split(".")
        if len(parts) != 2:
            raise ConfigError(f"{key}: override path must be section.field")
        section, name = parts
        if section not in SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc.setdefault(section, {})[name] = value
    return doc


def load_config(path=None, overrides: list[str] | None = None) -> PipelineConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON in {path} ({exc})") from exc
    return PipelineConfig.from_dict(apply_overrides(doc, overrides or []))

"""Pipeline configuration: YAML files, named presets, and overrides.

A config file fully determines a run. Parsing is strict: any key that no
section declares is rejected, so typos fail fast instead of silently
falling back to defaults. Named presets ship inside the package
(``ped2``, ``avenue``, ``shanghaitech``, ``synthetic-tiny``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError
from .ingestion import ObjectSpec, SyntheticSpec
from .training import LossWeights, TrainConfig


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    root: str = "data"
    layout: str = "generic_folders"


@dataclass
class ExtractionConfig:
    half_window: int = 3
    confidence_threshold: float = 0.5
    diff_threshold: float = 0.05
    min_area: int = 25
    dilation: int = 3
    merge_iou: float = 0.5
    boxes_file: str | None = None


@dataclass
class PatchingConfig:
    spatial_grid: int = 3
    k_perm: int = 1
    seed: int = 0


@dataclass
class ModelConfig:
    size_preset: str = "tiny"
    dropout: float = 0.1
    # optional explicit architecture overrides; None means "use the preset"
    embed_dim: int | None = None
    depth: int | None = None
    heads: int | None = None
    mlp_ratio: float | None = None

    def overrides(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
        }


@dataclass
class ScoringConfig:
    omega_s: float = 0.5
    omega_t: float = 0.5
    smoothing: bool = False
    smoothing_sigma: float = 2.0


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    patching: PatchingConfig = field(default_factory=PatchingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    synthetic: SyntheticSpec | None = None

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = None if value is None else dataclasses.asdict(value)
        return out


def _build(cls, data: dict, prefix: str):
    """Construct a flat dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {prefix + '.' + key!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            value = data[f.name]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad section {prefix!r}: {exc}") from exc


def _build_synthetic(data: dict) -> SyntheticSpec:
    if not isinstance(data, dict):
        raise ConfigError("section 'synthetic' must be a mapping")
    data = dict(data)
    for side in ("normal_behaviors", "anomaly_behaviors"):
        if side in data:
            data[side] = [_build(ObjectSpec, b, f"synthetic.{side}") for b in data[side]]
    if "anomaly_intervals" in data:
        data["anomaly_intervals"] = [
            [tuple(iv) for iv in per_video] for per_video in data["anomaly_intervals"]
        ]
    if "canvas" in data:
        data["canvas"] = tuple(data["canvas"])
    known = {f.name for f in fields(SyntheticSpec)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key 'synthetic.{key}'")
    return SyntheticSpec(**data)


_SECTIONS = {
    "dataset": DatasetConfig,
    "extraction": ExtractionConfig,
    "patching": PatchingConfig,
    "model": ModelConfig,
    "training": TrainConfig,
    "loss_weights": LossWeights,
    "scoring": ScoringConfig,
}


def config_from_dict(data: dict) -> PipelineConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    kwargs = {}
    for key, value in data.items():
        if key == "synthetic":
            kwargs["synthetic"] = None if value is None else _build_synthetic(value)
        elif key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            raise ConfigError(f"unknown key {key!r}")
    return PipelineConfig(**kwargs)


def preset_path(name: str) -> Path:
    candidate = resources.files("pstrp").joinpath("presets", f"{name}.yaml")
    if not candidate.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return Path(str(candidate))


def _parse_scalar(raw: str):
    # plain int/float first: YAML 1.1 would keep "2e-4" as a string
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return yaml.safe_load(raw)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply `section.key=value` strings onto a raw config dict.

    Values get natural scalar types: `epochs=5` an int, `lr=2e-4` a float,
    `flag=true` a bool, anything else falls back to the YAML parser.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if any(not k for k in keys):
            raise ConfigError(f"override {item!r} has an empty key component")
        node = data
        for key in keys[:-1]:
            nxt = node.setdefault(key, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {dotted!r} descends into a scalar")
            node = nxt
        node[keys[-1]] = _parse_scalar(raw)
    return data


def load_config(source: str | Path | None, overrides: list[str] | None = None) -> PipelineConfig:
    """Load a config from a YAML path or preset name and apply overrides.

    ``source`` may be None (all defaults), a filesystem path, or a preset
    name. The result is validated strictly.
    """
    data: dict = {}
    if source is not None:
        path = Path(source)
        if not path.is_file():
            path = preset_path(str(source))
        loaded = yaml.safe_load(path.read_text())
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: config root must be a mapping")
            data = loaded
    apply_overrides(data, overrides or [])
    return config_from_dict(data)


def dump_config(cfg: PipelineConfig, path):
    """Write the fully-resolved config for run provenance."""
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)

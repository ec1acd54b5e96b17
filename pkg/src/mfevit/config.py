"""Configuration dataclasses and the flat ``key = value`` config file format.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Keys are the field names of :class:`ModelConfig`,
:class:`AugmentationConfig` and :class:`TrainConfig`, which are disjoint, so
the file needs no sections. Unknown keys and malformed values are collected
and reported together.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

FUSION_MODES = ("rgb_only", "depth_only", "naive", "alternative")

# number of patch-projection streams for each fusion mode
STREAMS = {"rgb_only": 1, "depth_only": 1, "naive": 2, "alternative": 3}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    num_layers: int = 12
    num_heads: int = 6
    mlp_ratio: int = 4
    num_expressions: int = 6
    num_subclasses: int = 5
    delta: float = 0.4
    fusion_mode: str = "alternative"
    standardize: bool = True
    dropout: float = 0.0
    layernorm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.image_size <= 0 or self.patch_size <= 0:
            out.append("image_size and patch_size must be positive")
        elif self.image_size % self.patch_size:
            out.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim <= 0 or self.num_heads <= 0:
            out.append("embed_dim and num_heads must be positive")
        elif self.embed_dim % self.num_heads:
            out.append(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 0:
            out.append("num_layers must be >= 0")
        if self.mlp_ratio <= 0:
            out.append("mlp_ratio must be positive")
        if self.num_expressions != 6:
            out.append("num_expressions is fixed at 6")
        if self.num_subclasses < 0:
            out.append("num_subclasses must be >= 0")
        if not 0.0 < self.delta:
            out.append("delta must be positive")
        if self.fusion_mode not in FUSION_MODES:
            out.append(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            out.append("dropout must be in [0, 1)")
        if self.layernorm_eps <= 0:
            out.append("layernorm_eps must be positive")
        return out

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * 3

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    @property
    def num_labels(self) -> int:
        return self.num_expressions * (self.num_subclasses + 1)

    @property
    def num_streams(self) -> int:
        return STREAMS[self.fusion_mode]


@dataclass(frozen=True)
class AugmentationConfig:
    augment: bool = True
    flip_prob: float = 0.5
    erase_prob: float = 0.25
    erase_area_min: float = 0.02
    erase_area_max: float = 0.2
    jitter_prob: float = 0.5
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2
    jitter_saturation: float = 0.2

    def __post_init__(self) -> None:
        problems = []
        for name in ("flip_prob", "erase_prob", "jitter_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must be in [0, 1]")
        if not 0.0 < self.erase_area_min <= self.erase_area_max < 1.0:
            problems.append("erase area fractions must satisfy 0 < min <= max < 1")
        for name in ("jitter_brightness", "jitter_contrast", "jitter_saturation"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must be in [0, 1)")
        if problems:
            raise ConfigError("invalid AugmentationConfig: " + "; ".join(problems))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 130
    batch_size: int = 16
    lr: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    sf_enabled: bool = True
    sf_start_epoch: int = 20
    seed: int = 0
    dtype: str = "float64"
    cv_folds: int = 10
    cv_repeats: int = 1
    jobs: int = 1

    def __post_init__(self) -> None:
        problems = []
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size <= 0:
            problems.append("batch_size must be positive")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            problems.append("betas must be in [0, 1)")
        if self.adam_eps <= 0:
            problems.append("adam_eps must be positive")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.sf_start_epoch < 1:
            problems.append("sf_start_epoch must be >= 1")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype must be float32 or float64")
        if self.cv_folds < 2:
            problems.append("cv_folds must be >= 2")
        if self.cv_repeats < 1:
            problems.append("cv_repeats must be >= 1")
        if self.jobs < 1:
            problems.append("jobs must be >= 1")
        if problems:
            raise ConfigError("invalid TrainConfig: " + "; ".join(problems))


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {}
        for part in (self.model, self.augmentation, self.train):
            flat.update(dataclasses.asdict(part))
        return flat

    def replace(self, **overrides) -> "ExperimentConfig":
        return from_flat({**self.to_flat(), **overrides})


_SECTIONS = {"model": ModelConfig, "augmentation": AugmentationConfig, "train": TrainConfig}


def _field_types() -> dict[str, tuple[str, type]]:
    out = {}
    for section, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            out[f.name] = (section, hints[f.name])
    return out


def _coerce(raw, typ: type):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    if typ is bool:
        if isinstance(raw, str):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        as_float = float(raw)
        if not as_float.is_integer():
            raise ValueError(f"not an integer: {raw!r}")
        return int(as_float)
    if typ is float:
        return float(raw)
    return str(raw).strip()


def from_flat(values: dict[str, object]) -> ExperimentConfig:
    types = _field_types()
    errors = []
    parts: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    for key, raw in values.items():
        if key not in types:
            errors.append(f"unknown key {key!r}")
            continue
        section, typ = types[key]
        try:
            parts[section][key] = _coerce(raw, typ)
        except (TypeError, ValueError) as exc:
            errors.append(f"{key}: {exc}")
    # keep going so range problems in the remaining keys are reported too
    built = {}
    for section, cls in _SECTIONS.items():
        try:
            built[section] = cls(**parts[section])
        except ConfigError as exc:
            errors.append(str(exc))
    if errors:
        raise ConfigError("; ".join(errors))
    return ExperimentConfig(**built)


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            errors.append(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    if errors:
        raise ConfigError("; ".join(errors))
    return values


def load_config(path: str | Path, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, object] = dict(parse_config_text(path.read_text()))
    values.update(overrides or {})
    return from_flat(values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, part in (("model", cfg.model), ("augmentation", cfg.augmentation), ("train", cfg.train)):
        lines.append(f"# {section}")
        for key, value in dataclasses.asdict(part).items():
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))

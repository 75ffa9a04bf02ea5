"""Training configuration: defaults, presets, file loading, overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Raised for malformed or contradictory configuration."""


@dataclass
class TrainConfig:
    """Hyperparameters and run settings for one training job.

    Defaults follow the reference setup: 500K iterations, batch 100,
    latent dim 100, two-time-scale Adam (discriminators at 4e-4,
    encoder/generator at 1e-4, betas (0, 0.9)).
    """

    # data
    dataset: str = ""
    data_format: str = "idx"  # idx | cifar-binary | image-directory
    known_class: int = 0
    protocol: str = "B"  # A | B
    channels: int = 0  # 0 = infer from the dataset

    # optimization
    T: int = 500_000
    N: int = 100
    d_z: int = 100
    alpha_z: float = 1.0
    lr_d: float = 4e-4
    lr_eg: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9

    # reconstruction ensemble: feature levels entering the multi-level loss.
    # Empty list disables the feature reconstruction loss entirely.
    active_levels: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    level_mean: bool = False  # experimental: per-level mean instead of raw sum

    # architecture
    base_width: int = 32  # channels of the first conv; deeper stages scale x2,x4,x8
    tanh_encoder: bool = False  # bounded-latent ablation variant
    use_preactivation: bool = True  # score with [h-, f_L] at the final tap

    # run control
    seed: int = 0
    checkpoint_every: int = 10_000
    torch_threads: int = 1

    def validate(self) -> "TrainConfig":
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if self.d_z < 1:
            raise ConfigError(f"d_z must be >= 1, got {self.d_z}")
        if self.alpha_z < 0:
            raise ConfigError(f"alpha_z must be >= 0, got {self.alpha_z}")
        if self.protocol not in ("A", "B"):
            raise ConfigError(f"protocol must be 'A' or 'B', got {self.protocol!r}")
        if self.data_format not in ("idx", "cifar-binary", "image-directory"):
            raise ConfigError(f"unknown data format {self.data_format!r}")
        if self.channels not in (0, 1, 3):
            raise ConfigError(f"channels must be 1 or 3 (or 0 to infer), got {self.channels}")
        levels = list(self.active_levels)
        if any((not isinstance(l, int)) or l < 0 or l > 4 for l in levels):
            raise ConfigError(f"active_levels must be a subset of 0..4, got {levels}")
        if len(set(levels)) != len(levels):
            raise ConfigError(f"active_levels has duplicates: {levels}")
        if levels and 4 not in levels:
            raise ConfigError("the final feature level (4) must be active whenever the "
                              "feature reconstruction loss is on")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.lr_d <= 0 or self.lr_eg <= 0:
            raise ConfigError("learning rates must be positive")
        return self

    @property
    def use_feature_recon(self) -> bool:
        return len(self.active_levels) > 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Stable short hash of the full configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, value):
    """Coerce a raw (file or command-line) value to the field's type."""
    if name == "active_levels":
        if isinstance(value, str):
            value = value.strip().lstrip("[").rstrip("]")
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"active_levels must be a list, got {value!r}")
        return [int(v) for v in value]
    target = _FIELD_TYPES[name]
    if target == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
        raise ConfigError(f"cannot parse boolean for {name}: {value!r}")
    try:
        if target == "int":
            return int(value)
        if target == "float":
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse {target} for {name}: {value!r}") from None
    return str(value)


def config_from_mapping(mapping: dict) -> TrainConfig:
    """Build a validated config from a plain mapping; unknown keys are errors."""
    unknown = sorted(set(mapping) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v) for k, v in mapping.items()}
    return TrainConfig(**kwargs).validate()


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    """Load a YAML/JSON config file, then apply key=value overrides (last wins)."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}")
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    if overrides:
        raw.update(overrides)
    return config_from_mapping(raw)


def parse_overrides(pairs: list[str]) -> dict:
    """Parse repeated ``key=value`` strings; later duplicates win."""
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


def desk_preset(**overrides) -> TrainConfig:
    """Desk-scale preset: short schedule and a narrow CPU-sized backbone.

    Keeps the reference batch size, latent dim and optimizer settings but
    runs 20K iterations with checkpoints every 1000 and a base width of 4
    so a single CPU core can finish in roughly an hour.
    """
    base = dict(
        T=20_000,
        checkpoint_every=1_000,
        N=100,
        d_z=100,
        alpha_z=0.001,
        base_width=4,
    )
    base.update(overrides)
    return TrainConfig(**base).validate()

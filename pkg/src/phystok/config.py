"""Run configuration: nested dataclasses loaded from YAML/JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .processor import ProcessorConfig
from .schedule import ROLLOUT_OPTIMISER, TOKENISER_OPTIMISER, OptimiserConfig
from .tokeniser import TokeniserConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    warmup_epochs: int = 1
    cooldown_epochs: int = 1
    alpha: float = 0.1
    kappa: float = 128.0


@dataclass
class TrainingSection:
    pretrain_steps: int = 200
    rollout_steps: int = 200
    batch_size: int = 2
    accumulation: int = 1
    pretrain_unique_batches: int = 21_000
    rollout_unique_batches: int = 2_100
    shard_id: int = 0
    num_shards: int = 1
    val_every: int = 50
    val_sequences: int = 8
    ckpt_every: int = 100
    log_every: int = 1
    freeze: str = "fully_trainable"
    tokeniser_init: str = "fresh"
    rollout_compression: str = "validate"


@dataclass
class DatasetSection:
    name: str = "advection"
    kind: str = "advection"  # advection | gaussian | archive
    path: str | None = None
    n_trajectories: int = 64
    frames: int = 10
    beta: float = 4.0
    speeds: list = field(default_factory=lambda: [-1, 0, 1])
    seed: int = 0


@dataclass
class DataSection:
    grid: list = field(default_factory=lambda: [32, 32])
    window: int = 10
    stride: int | None = None
    val_fraction: float = 0.125
    datasets: list = field(default_factory=lambda: [DatasetSection()])


@dataclass
class MetricsSection:
    thresholds: list | None = None
    rollout_steps: int = 18


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    tokeniser: TokeniserConfig = field(
        default_factory=lambda: TokeniserConfig(channels=[8, 16, 16], latent_channels=8, residual_blocks=1)
    )
    processor: ProcessorConfig = field(default_factory=lambda: ProcessorConfig(latent_dim=8))
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    tokeniser_optimiser: OptimiserConfig = TOKENISER_OPTIMISER
    rollout_optimiser: OptimiserConfig = ROLLOUT_OPTIMISER
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)


def _build(base, raw, where: str):
    """Overlay ``raw`` onto the dataclass instance ``base``."""
    if dataclasses.is_dataclass(raw):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(base, name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(default, value, path)
        elif name == "datasets":
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{path}: expected a non-empty list")
            kwargs[name] = [_build(DatasetSection(), v, f"{path}[{i}]") for i, v in enumerate(value)]
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(raw: dict | None) -> RunConfig:
    cfg = _build(RunConfig(), raw or {}, "")
    if cfg.processor.latent_dim != cfg.tokeniser.latent_channels:
        raise ConfigError(
            f"processor.latent_dim {cfg.processor.latent_dim} != tokeniser.latent_channels "
            f"{cfg.tokeniser.latent_channels}"
        )
    if cfg.training.freeze not in ("fully_trainable", "mostly_frozen"):
        raise ConfigError(f"training.freeze: unknown mode {cfg.training.freeze!r}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def resolved(cfg: RunConfig) -> dict:
    """Fully expanded config as plain data."""
    return dataclasses.asdict(cfg)

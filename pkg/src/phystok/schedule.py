"""Learning-rate schedules and optimiser presets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

TOKENISER_LR = 5e-4


@dataclass(frozen=True)
class ScheduleConfig:
    """Per-epoch schedule: linear warmup, inverse-sqrt decay, sqrt cooldown."""

    epochs: int
    warmup: int
    cooldown: int
    lr_peak: float = 5e-5
    alpha: float = 0.1
    kappa: float = 128.0

    def __post_init__(self):
        if self.warmup < 0 or self.cooldown < 0 or self.warmup + self.cooldown > self.epochs:
            raise ValueError(f"need 0 <= W, C and W + C <= E, got {self}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.kappa <= 0 or self.lr_peak <= 0:
            raise ValueError("kappa and lr_peak must be positive")

    @property
    def lr_end(self) -> float:
        return self.lr_peak / (1 + math.sqrt(self.epochs - self.cooldown + self.kappa) - math.sqrt(self.kappa))


def lr_at_epoch(e: int, cfg: ScheduleConfig) -> float:
    """Learning rate at 0-indexed epoch ``e``.

    The cooldown level ``lr_end`` is evaluated at ``E - C`` epochs while the
    last decay epoch is evaluated at ``E - C - W``, so for ``W > 0`` there
    is a jump at the decay/cooldown boundary. Kept as defined.
    """
    E, W, C = cfg.epochs, cfg.warmup, cfg.cooldown
    if not 0 <= e <= E:
        raise ValueError(f"epoch {e} outside [0, {E}]")
    if e <= W:
        frac = e / W if W > 0 else 1.0
        return cfg.lr_peak * (cfg.alpha + (1 - cfg.alpha) * frac)
    if e <= E - C:
        s = e - W
        return cfg.lr_peak / (1 + math.sqrt(s + cfg.kappa) - math.sqrt(cfg.kappa))
    t = e - (E - C)
    return cfg.lr_end * (1 - math.sqrt((t - 1) / C))


def schedule_constant(epoch: int = 0, lr: float = TOKENISER_LR) -> float:
    """Tokeniser pretraining runs at a fixed learning rate."""
    return lr


def schedule_curve(cfg: ScheduleConfig) -> list[tuple[int, float]]:
    return [(e, lr_at_epoch(e, cfg)) for e in range(cfg.epochs + 1)]


def write_schedule_csv(path, cfg: ScheduleConfig):
    with open(path, "w") as f:
        f.write("epoch,lr\n")
        for e, lr in schedule_curve(cfg):
            f.write(f"{e},{lr!r}\n")


@dataclass(frozen=True)
class OptimiserConfig:
    kind: str = "adamw"
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    eps: float = 1e-10
    clip_norm: float = 5.0


# SOAP is not bundled: tokeniser pretraining falls back to AdamW with the
# SOAP row's hyperparameters.
TOKENISER_OPTIMISER = OptimiserConfig("adamw", 5e-4, (0.95, 0.95), 0.01, 1e-8, 0.5)
ROLLOUT_OPTIMISER = OptimiserConfig("adamw", 5e-5, (0.9, 0.999), 1e-4, 1e-10, 5.0)

OPTIMISERS = {"adamw": torch.optim.AdamW}


def register_optimiser(name: str, factory):
    """Plug in an optimiser class taking ``(params, lr, betas, weight_decay, eps)``."""
    OPTIMISERS[name] = factory


def build_optimiser(params, cfg: OptimiserConfig) -> torch.optim.Optimizer:
    try:
        factory = OPTIMISERS[cfg.kind]
    except KeyError:
        raise ValueError(f"unknown optimiser {cfg.kind!r}; registered: {sorted(OPTIMISERS)}") from None
    return factory(params, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay, eps=cfg.eps)


def set_lr(optimiser: torch.optim.Optimizer, lr: float):
    for group in optimiser.param_groups:
        group["lr"] = lr

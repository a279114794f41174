"""Causal convolutional encoder/decoder with runtime-selectable compression.

Continuous latents, no quantisation. Every layer is causal in time, so
latent frame ``j`` only sees input frames ``<= j * prod(s_t)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import FieldSchema
from .ops import (
    ScalePair,
    ShapeError,
    adaptive_field_conv,
    causal_conv3d,
    flexible_depth_to_space,
    flexible_downsample,
    kernel_size_for,
)

RMS_EPS = 1e-7

# per-depth (s_t, s_s) options sampled uniformly during training
DEPTH_SCALES = (
    ((1,), (2,)),
    ((1, 2), (2, 4)),
    ((1, 2), (2, 4)),
)
VALIDATION_CHOICE = ((1, 2), (2, 2), (2, 2))


@dataclass
class TokeniserConfig:
    channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    latent_channels: int = 18
    depth_scales: list = field(default_factory=lambda: [list(map(list, d)) for d in DEPTH_SCALES])
    residual_blocks: int = 2
    c_total: int = 3
    norm_groups: int = 8

    def __post_init__(self):
        if len(self.depth_scales) != len(self.channels):
            raise ValueError("need one factor set per depth")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")

    def max_scales(self) -> list[ScalePair]:
        return [ScalePair(max(ts), max(ss)) for ts, ss in self.depth_scales]

    def options(self, depth: int) -> list[ScalePair]:
        ts, ss = self.depth_scales[depth]
        return [ScalePair(t, s) for t in ts for s in ss]

    def all_choices(self) -> list[tuple[ScalePair, ...]]:
        return list(itertools.product(*(self.options(d) for d in range(len(self.channels)))))


def as_choice(choice) -> tuple[ScalePair, ...]:
    return tuple(ScalePair.of(c) for c in choice)


def sample_compression(cfg: TokeniserConfig, mode: str, rng: np.random.Generator | None = None) -> tuple[ScalePair, ...]:
    """Validation uses the fixed scales; training draws each depth independently."""
    if mode == "validate":
        return as_choice(VALIDATION_CHOICE)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'validate', got {mode!r}")
    rng = rng if rng is not None else np.random.default_rng()
    out = []
    for ts, ss in cfg.depth_scales:
        out.append(ScalePair(int(ts[rng.integers(len(ts))]), int(ss[rng.integers(len(ss))])))
    return tuple(out)


def check_choice(cfg: TokeniserConfig, choice) -> tuple[ScalePair, ...]:
    choice = as_choice(choice)
    if len(choice) != len(cfg.channels):
        raise ValueError(f"choice has {len(choice)} depths, tokeniser has {len(cfg.channels)}")
    for d, (c, m) in enumerate(zip(choice, cfg.max_scales())):
        if not c.divides(m):
            raise ValueError(f"depth {d + 1}: scale {c.as_tuple()} does not divide base {m.as_tuple()}")
    return choice


def cumulative_scale(choice) -> ScalePair:
    choice = as_choice(choice)
    return ScalePair(math.prod(c.s_t for c in choice), math.prod(c.s_s for c in choice))


def latent_shape(shape, choice) -> tuple[int, int, int]:
    t, h, w = shape
    cum = cumulative_scale(choice)
    if (t - 1) % cum.s_t or h % cum.s_s or w % cum.s_s:
        raise ShapeError(
            f"input (T={t}, H={h}, W={w}) not divisible by cumulative strides "
            f"(s_t={cum.s_t}, s_s={cum.s_s}); need (T-1) % s_t == 0 and H, W % s_s == 0"
        )
    return 1 + (t - 1) // cum.s_t, h // cum.s_s, w // cum.s_s


# ---------------------------------------------------------------------------
# input normalisation


@dataclass
class NormaliserState:
    """Per-sample, per-field RMS scales, shape ``(batch, n_fields)``."""

    scales: Tensor
    schema: FieldSchema

    def channel_scales(self) -> Tensor:
        reps = torch.tensor([f.channels for f in self.schema.fields], device=self.scales.device)
        return torch.repeat_interleave(self.scales, reps, dim=1)[:, :, None, None, None]


def rms_normalise(x: Tensor, schema: FieldSchema | None = None) -> tuple[Tensor, NormaliserState]:
    """Divide each field of each sample by its RMS over time and space."""
    schema = schema or FieldSchema.scalars(x.shape[1])
    if schema.n_channels != x.shape[1]:
        raise ShapeError(f"schema has {schema.n_channels} channels, input has {x.shape[1]}")
    scales = []
    for sl in schema.slices():
        rms = x[:, sl].pow(2).mean(dim=(1, 2, 3, 4)).sqrt()
        scales.append(rms.clamp_min(RMS_EPS))
    state = NormaliserState(torch.stack(scales, dim=1), schema)
    return x / state.channel_scales(), state


def denormalise(x: Tensor, state: NormaliserState) -> Tensor:
    return x * state.channel_scales()


def tokeniser_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).mean()


# ---------------------------------------------------------------------------
# layers


def _conv_weight(c_out, c_in, kt, kh, kw):
    w = torch.empty(c_out, c_in, kt, kh, kw)
    nn.init.kaiming_uniform_(w, a=math.sqrt(5))
    return nn.Parameter(w)


def _conv_bias(c_out, fan_in):
    bound = 1 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(c_out).uniform_(-bound, bound))


class CausalConv3d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3):
        super().__init__()
        self.weight = _conv_weight(c_out, c_in, kernel, kernel, kernel)
        self.bias = _conv_bias(c_out, c_in * kernel**3)

    def forward(self, x):
        return causal_conv3d(x, self.weight, self.bias)


class AdaptiveFieldConv(nn.Module):
    """Causal 3x3x3 head defined over ``c_total`` physical fields.

    ``select="in"`` maps fields to features (encoder head), ``"out"`` maps
    features to fields (decoder head).
    """

    def __init__(self, c_total: int, c_features: int, select: str):
        super().__init__()
        self.select = select
        if select == "in":
            self.weight = _conv_weight(c_features, c_total, 3, 3, 3)
            self.bias = _conv_bias(c_features, c_total * 27)
        else:
            self.weight = _conv_weight(c_total, c_features, 3, 3, 3)
            self.bias = _conv_bias(c_total, c_features * 27)

    def forward(self, x, active):
        return adaptive_field_conv(x, self.weight, active, self.bias, select=self.select)


class FlexibleDownsample(nn.Module):
    def __init__(self, c_in: int, c_out: int, max_scale: ScalePair):
        super().__init__()
        self.max_scale = max_scale
        k_t, k_s = kernel_size_for(max_scale)
        self.weight = _conv_weight(c_out, c_in, k_t, k_s, k_s)
        self.bias = _conv_bias(c_out, c_in * k_t * k_s * k_s)

    def forward(self, x, scale):
        return flexible_downsample(x, self.weight, scale, self.bias, max_scale=self.max_scale)


class FlexibleUpsample(nn.Module):
    """Depth-to-space upsampling from a base expansion kernel."""

    def __init__(self, c_in: int, c_out: int, base: ScalePair):
        super().__init__()
        self.base = base
        c_exp = c_out * base.s_t * base.s_s**2
        self.weight = _conv_weight(c_exp, c_in, 3, 3, 3)
        self.bias = _conv_bias(c_exp, c_in * 27)

    def forward(self, x, scale):
        return flexible_depth_to_space(x, self.weight, self.base, scale, self.bias)


class FrameGroupNorm(nn.GroupNorm):
    """Group norm with statistics taken per frame, keeping the layer causal."""

    def forward(self, x):
        b, c, t, h, w = x.shape
        y = super().forward(x.transpose(1, 2).reshape(b * t, c, h, w))
        return y.reshape(b, t, c, h, w).transpose(1, 2)


class ResBlock(nn.Module):
    def __init__(self, c: int, groups: int = 8):
        super().__init__()
        g = math.gcd(groups, c)
        self.norm1 = FrameGroupNorm(g, c)
        self.conv1 = CausalConv3d(c, c)
        self.norm2 = FrameGroupNorm(g, c)
        self.conv2 = CausalConv3d(c, c)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


# ---------------------------------------------------------------------------
# encoder / decoder


class Encoder(nn.Module):
    def __init__(self, cfg: TokeniserConfig):
        super().__init__()
        ch = cfg.channels
        outs = ch[1:] + ch[-1:]
        self.head = AdaptiveFieldConv(cfg.c_total, ch[0], "in")
        self.stages = nn.ModuleList(
            nn.Sequential(*(ResBlock(c, cfg.norm_groups) for _ in range(cfg.residual_blocks))) for c in ch
        )
        self.down = nn.ModuleList(
            FlexibleDownsample(c_in, c_out, m) for c_in, c_out, m in zip(ch, outs, cfg.max_scales())
        )
        self.bottleneck = CausalConv3d(outs[-1], cfg.latent_channels, kernel=1)

    def forward(self, x, choice, active):
        h = self.head(x, active)
        for stage, down, scale in zip(self.stages, self.down, choice):
            h = down(stage(h), scale)
        return self.bottleneck(h)


class Decoder(nn.Module):
    def __init__(self, cfg: TokeniserConfig):
        super().__init__()
        ch = cfg.channels
        outs = ch[1:] + ch[-1:]
        self.bottleneck = CausalConv3d(cfg.latent_channels, outs[-1], kernel=3)
        # deepest first
        self.up = nn.ModuleList(
            FlexibleUpsample(c_out, c_in, m)
            for c_in, c_out, m in reversed(list(zip(ch, outs, cfg.max_scales())))
        )
        self.stages = nn.ModuleList(
            nn.Sequential(*(ResBlock(c, cfg.norm_groups) for _ in range(cfg.residual_blocks)))
            for c in reversed(ch)
        )
        self.head = AdaptiveFieldConv(cfg.c_total, ch[0], "out")

    def forward(self, z, choice, active):
        h = self.bottleneck(z)
        for up, stage, scale in zip(self.up, self.stages, reversed(choice)):
            h = stage(up(h, scale))
        return self.head(h, active)


class Tokeniser(nn.Module):
    def __init__(self, cfg: TokeniserConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def _active(self, active, n_channels=None):
        if active is None:
            active = range(self.cfg.c_total if n_channels is None else n_channels)
        return [int(i) for i in active]

    def encode(self, x: Tensor, choice, active: Sequence[int] | None = None) -> Tensor:
        choice = check_choice(self.cfg, choice)
        active = self._active(active, x.shape[1])
        if x.ndim != 5:
            raise ShapeError(f"expected (B, C, T, H, W), got {tuple(x.shape)}")
        if x.shape[1] != len(active):
            raise ShapeError(f"input has {x.shape[1]} channels but {len(active)} active fields")
        latent_shape(x.shape[2:], choice)
        return self.encoder(x, choice, active)

    def decode(self, z: Tensor, choice, active: Sequence[int] | None = None, expected_shape=None) -> Tensor:
        choice = check_choice(self.cfg, choice)
        active = self._active(active)
        if z.ndim != 5 or z.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"latent must be (B, {self.cfg.latent_channels}, T, H, W), got {tuple(z.shape)}")
        out = self.decoder(z, choice, active)
        if expected_shape is not None and tuple(out.shape[2:]) != tuple(expected_shape):
            raise ShapeError(
                f"decoded shape {tuple(out.shape[2:])} != expected {tuple(expected_shape)}; "
                "latent was produced with a different compression choice"
            )
        return out

    def forward(self, x, choice, active=None):
        return self.decode(self.encode(x, choice, active), choice, active, expected_shape=x.shape[2:])

    # parameters that touch pixel space or latent space
    INTERFACE_MODULES = ("encoder.head", "encoder.bottleneck", "decoder.bottleneck", "decoder.head")

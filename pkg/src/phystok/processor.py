"""Factorised space/time transformer over tokeniser latents.

Each block applies full spatial attention within a frame (axial rotary
positions) with a SwiGLU MLP, then causal temporal attention per spatial
location with learned relative-position biases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from .data import FieldSchema
from .ops import ShapeError
from .tokeniser import Tokeniser, TokeniserConfig, check_choice, denormalise, rms_normalise


@dataclass
class ProcessorConfig:
    blocks: int = 2
    embed_dim: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    drop_path_max: float = 0.05
    latent_dim: int = 18
    max_time: int = 16
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if (self.embed_dim // self.heads) % 4:
            raise ValueError("head dim must be divisible by 4 for axial rotary encoding")

    def drop_path_rates(self) -> list[float]:
        if self.blocks == 1:
            return [0.0]
        return [self.drop_path_max * i / (self.blocks - 1) for i in range(self.blocks)]


REFERENCE_PROCESSOR = dict(blocks=6, embed_dim=1088, heads=16, mlp_ratio=4, drop_path_max=0.05, latent_dim=18)


class RMSGroupNorm(nn.Module):
    """RMS normalisation within channel groups, learned per-channel gain."""

    def __init__(self, dim: int, groups: int, eps: float = 1e-6):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        shape = x.shape
        g = x.reshape(*shape[:-1], self.groups, shape[-1] // self.groups)
        g = g * torch.rsqrt(g.pow(2).mean(-1, keepdim=True) + self.eps)
        return g.reshape(shape) * self.weight


class DropPath(nn.Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


def axial_rope_tables(h: int, w: int, head_dim: int, base: float, dtype, device):
    """cos/sin tables ``(h*w, head_dim)``; half the dims rotate with y, half with x."""
    quarter = head_dim // 4
    freqs = 1.0 / (base ** (torch.arange(quarter, dtype=dtype, device=device) / quarter))
    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    ang_y = torch.outer(ys, freqs)[:, None, :].expand(h, w, quarter)
    ang_x = torch.outer(xs, freqs)[None, :, :].expand(h, w, quarter)
    ang = torch.cat([ang_y, ang_y, ang_x, ang_x], dim=-1).reshape(h * w, head_dim)
    return ang.cos(), ang.sin()


def _rotate_halves(x):
    # rotate-half within each of the y and x sections
    q = x.shape[-1] // 4
    y1, y2, x1, x2 = x.split(q, dim=-1)
    return torch.cat([-y2, y1, -x2, x1], dim=-1)


def apply_rope(x, cos, sin):
    return x * cos + _rotate_halves(x) * sin


def attention(q, k, v, bias=None):
    scores = q @ k.transpose(-2, -1) * q.shape[-1] ** -0.5
    if bias is not None:
        scores = scores + bias
    return scores.softmax(dim=-1) @ v


class SpatialAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rope_base: float):
        super().__init__()
        self.heads = heads
        self.rope_base = rope_base
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):  # (B, T, H, W, D)
        b, t, h, w, d = x.shape
        qkv = rearrange(self.qkv(x), "b t h w (k n e) -> k (b t) n (h w) e", k=3, n=self.heads)
        q, k, v = qkv[0], qkv[1], qkv[2]
        cos, sin = axial_rope_tables(h, w, d // self.heads, self.rope_base, x.dtype, x.device)
        o = attention(apply_rope(q, cos, sin), apply_rope(k, cos, sin), v)
        o = rearrange(o, "(b t) n (h w) e -> b t h w (n e)", b=b, h=h)
        return self.out(o)


class TemporalAttention(nn.Module):
    """Causal attention along time with a per-head bias per relative offset."""

    def __init__(self, dim: int, heads: int, max_time: int):
        super().__init__()
        self.heads = heads
        self.max_time = max_time
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros(heads, max_time))

    def bias(self, t: int, dtype, device):
        i = torch.arange(t, device=device)
        rel = (i[:, None] - i[None, :]).clamp(0, self.max_time - 1)
        b = self.rel_bias[:, rel].to(dtype)
        future = i[None, :] > i[:, None]
        return b.masked_fill(future, float("-inf"))

    def forward(self, x):
        b, t, h, w, d = x.shape
        qkv = rearrange(self.qkv(x), "b t h w (k n e) -> k (b h w) n t e", k=3, n=self.heads)
        o = attention(qkv[0], qkv[1], qkv[2], self.bias(t, x.dtype, x.device))
        o = rearrange(o, "(b h w) n t e -> b t h w (n e)", b=b, h=h, w=w)
        return self.out(o)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        hidden = dim * ratio
        self.gate = nn.Linear(dim, 2 * hidden)
        self.down = nn.Linear(hidden, dim)

    def forward(self, x):
        a, g = self.gate(x).chunk(2, dim=-1)
        return self.down(F.silu(g) * a)


class ProcessorBlock(nn.Module):
    def __init__(self, cfg: ProcessorConfig, drop_path: float):
        super().__init__()
        d, n = cfg.embed_dim, cfg.heads
        self.norm_s = RMSGroupNorm(d, n)
        self.spatial = SpatialAttention(d, n, cfg.rope_base)
        self.norm_m = RMSGroupNorm(d, n)
        self.mlp = SwiGLU(d, cfg.mlp_ratio)
        self.norm_t = RMSGroupNorm(d, n)
        self.temporal = TemporalAttention(d, n, cfg.max_time)
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(self.spatial(self.norm_s(x)))
        x = x + self.drop_path(self.mlp(self.norm_m(x)))
        x = x + self.drop_path(self.temporal(self.norm_t(x)))
        return x


class Processor(nn.Module):
    def __init__(self, cfg: ProcessorConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(ProcessorBlock(cfg, r) for r in cfg.drop_path_rates())
        self.norm = RMSGroupNorm(cfg.embed_dim, cfg.heads)

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.ndim != 5 or tokens.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"expected (B, T, H, W, {self.cfg.embed_dim}) tokens, got {tuple(tokens.shape)}")
        if tokens.shape[1] > self.cfg.max_time:
            raise ShapeError(f"{tokens.shape[1]} latent frames exceed max_time {self.cfg.max_time}")
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)


class Projection(nn.Module):
    """Linear map between latent channels and token embeddings."""

    def __init__(self, latent_dim: int, embed_dim: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.inp = nn.Linear(latent_dim, embed_dim)
        self.outp = nn.Linear(embed_dim, latent_dim)

    def project_in(self, z: Tensor) -> Tensor:
        if z.ndim != 5 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent must be (B, {self.latent_dim}, T, H, W), got {tuple(z.shape)}")
        return self.inp(rearrange(z, "b c t h w -> b t h w c"))

    def project_out(self, tokens: Tensor) -> Tensor:
        return rearrange(self.outp(tokens), "b t h w c -> b c t h w")


def rollout_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean absolute error."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


class RolloutModel(nn.Module):
    """Tokeniser + projection + processor predicting the next frame."""

    def __init__(self, tok_cfg: TokeniserConfig, proc_cfg: ProcessorConfig):
        super().__init__()
        if proc_cfg.latent_dim != tok_cfg.latent_channels:
            raise ValueError(
                f"processor latent_dim {proc_cfg.latent_dim} != tokeniser latent {tok_cfg.latent_channels}"
            )
        self.tokeniser = Tokeniser(tok_cfg)
        self.projection = Projection(proc_cfg.latent_dim, proc_cfg.embed_dim)
        self.processor = Processor(proc_cfg)

    def forward(self, x: Tensor, choice, active: Sequence[int] | None = None) -> Tensor:
        """Decoded sequence for normalised context ``x``; same shape as ``x``."""
        choice = check_choice(self.tokeniser.cfg, choice)
        z = self.tokeniser.encode(x, choice, active)
        z = self.projection.project_out(self.processor(self.projection.project_in(z)))
        return self.tokeniser.decode(z, choice, active, expected_shape=x.shape[2:])

    def predict_next_frame(
        self,
        context: Tensor,
        choice,
        active: Sequence[int] | None = None,
        schema: FieldSchema | None = None,
        normalised: bool = False,
    ) -> Tensor:
        """Next frame ``(B, C, 1, H, W)`` from context ``(B, C, T, H, W)``.

        The context is RMS-normalised per sample and field; the prediction
        is the last decoded frame, mapped back to physical units unless
        ``normalised`` is set.
        """
        choice = check_choice(self.tokeniser.cfg, choice)
        t = context.shape[2]
        window = 1
        for c in choice:
            window *= c.s_t
        if t < window + 1:
            raise ShapeError(f"context of {t} frames is shorter than one compression window ({window + 1})")
        xn, state = rms_normalise(context, schema)
        pred = self(xn, choice, active)[:, :, -1:]
        return pred if normalised else denormalise(pred, state)

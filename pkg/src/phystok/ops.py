"""Causal and flexible-stride convolution primitives.

All tensors use the layout ``(batch, channel, time, height, width)``.
Weights use the ``torch.nn.functional.conv3d`` layout
``(c_out, c_in, k_t, k_s, k_s)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ScalePair:
    """Temporal and spatial stride of one flexible layer."""

    s_t: int
    s_s: int

    def __post_init__(self):
        if not (is_power_of_two(self.s_t) and is_power_of_two(self.s_s)):
            raise ValueError(f"strides must be powers of two, got {self}")

    @classmethod
    def of(cls, value) -> "ScalePair":
        if isinstance(value, ScalePair):
            return value
        s_t, s_s = value
        return cls(int(s_t), int(s_s))

    def as_tuple(self) -> tuple[int, int]:
        return (self.s_t, self.s_s)

    def divides(self, other: "ScalePair") -> bool:
        return other.s_t % self.s_t == 0 and other.s_s % self.s_s == 0


def kernel_size_for(scale: ScalePair) -> tuple[int, int]:
    """``(k_t, k_s)`` of a strided downsampling kernel.

    One frame of temporal overlap when ``s_t > 1``, none in space.
    """
    k_t = 1 + scale.s_t if scale.s_t > 1 else scale.s_t
    return k_t, scale.s_s


# ---------------------------------------------------------------------------
# stride-1 causal convolution


def causal_conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 causal 3D convolution preserving ``(T, H, W)``.

    Zero padding: ``k_t - 1`` leading frames, ``(k_s - 1) / 2`` on both
    sides of each spatial axis.
    """
    if x.ndim != 5:
        raise ShapeError(f"expected (B, C, T, H, W) input, got shape {tuple(x.shape)}")
    c_out, c_in, k_t, k_h, k_w = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    if k_h % 2 == 0 or k_w % 2 == 0:
        raise ShapeError(f"spatial kernel size must be odd at stride 1, got {(k_h, k_w)}")
    pad = (k_w // 2, k_w // 2, k_h // 2, k_h // 2, k_t - 1, 0)
    return F.conv3d(F.pad(x, pad), weight, bias)


# ---------------------------------------------------------------------------
# adaptive field convolution


def field_rescale(c_total: int, c_active: int) -> float:
    return math.sqrt(c_total / c_active)


def _check_active(active: Sequence[int], c_total: int) -> list[int]:
    active = [int(i) for i in active]
    if not active:
        raise ValueError("active field set is empty")
    if len(set(active)) != len(active):
        raise ValueError(f"duplicate indices in active set {active}")
    bad = [i for i in active if not 0 <= i < c_total]
    if bad:
        raise ValueError(f"active indices {bad} outside [0, {c_total})")
    return active


def adaptive_field_conv(
    x: Tensor,
    weight: Tensor,
    active: Sequence[int],
    bias: Tensor | None = None,
    *,
    select: str = "in",
) -> Tensor:
    """Causal conv whose kernel is defined over ``c_total`` fields.

    ``select="in"`` (encoder head) keeps the input-channel slices of the
    active fields and multiplies the result by ``sqrt(c_total / c_active)``.
    ``select="out"`` (decoder head) keeps the output-channel slices of the
    active fields; fan-in is unchanged so no rescale is applied.
    """
    if select == "in":
        c_total = weight.shape[1]
        idx = _check_active(active, c_total)
        if len(idx) == c_total and idx == list(range(c_total)):
            return causal_conv3d(x, weight, bias)
        w = weight[:, idx]
        scale = field_rescale(c_total, len(idx))
        out = causal_conv3d(x, w) * scale
        if bias is not None:
            out = out + bias.view(1, -1, 1, 1, 1)
        return out
    if select == "out":
        c_total = weight.shape[0]
        idx = _check_active(active, c_total)
        if len(idx) == c_total and idx == list(range(c_total)):
            return causal_conv3d(x, weight, bias)
        return causal_conv3d(x, weight[idx], None if bias is None else bias[idx])
    raise ValueError(f"select must be 'in' or 'out', got {select!r}")


# ---------------------------------------------------------------------------
# kernel interpolation


def overlap_resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Conservative linear remap from ``n_in`` to ``n_out`` cells on [0, 1].

    Entry ``(i, j)`` is the fraction of input cell ``j`` that falls inside
    output cell ``i``. Columns sum to one, so the total mass of any vector
    is preserved; ``n_in == n_out`` gives the identity.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("cell counts must be positive")
    m = np.zeros((n_out, n_in))
    for j in range(n_in):
        a, b = j / n_in, (j + 1) / n_in
        for i in range(n_out):
            lo, hi = max(a, i / n_out), min(b, (i + 1) / n_out)
            if hi > lo:
                m[i, j] = (hi - lo) * n_in
    return m


def interpolate_kernel(weight: Tensor, target: tuple[int, int]) -> Tensor:
    """Resample a ``(c_out, c_in, k_t, k_s, k_s)`` kernel to ``(k_t', k_s')``.

    Separable along time, height and width; the kernel sum along each axis
    is preserved. Downsizing only.
    """
    k_t, k_s = target
    _, _, kt0, kh0, kw0 = weight.shape
    if k_t > kt0 or k_s > kh0 or k_s > kw0:
        raise ShapeError(f"target kernel {(k_t, k_s)} larger than base {(kt0, kh0, kw0)}")
    if (k_t, k_s, k_s) == (kt0, kh0, kw0):
        return weight
    opts = dict(dtype=weight.dtype, device=weight.device)
    mt = torch.as_tensor(overlap_resample_matrix(kt0, k_t), **opts)
    mh = torch.as_tensor(overlap_resample_matrix(kh0, k_s), **opts)
    mw = torch.as_tensor(overlap_resample_matrix(kw0, k_s), **opts)
    return torch.einsum("oitxy,at,bx,cy->oiabc", weight, mt, mh, mw)


# ---------------------------------------------------------------------------
# flexible downsampling


def flexible_downsample(
    x: Tensor,
    base_weight: Tensor,
    scale: ScalePair,
    bias: Tensor | None = None,
    *,
    max_scale: ScalePair | None = None,
) -> Tensor:
    """Strided causal conv with stride ``(s_t, s_s, s_s)``.

    ``T = 1 + N`` frames become ``1 + N / s_t``: the input is front-padded
    with ``k_t - 1`` zero frames so latent frame ``j`` sees input frames
    ``<= j * s_t``. No spatial padding.
    """
    scale = ScalePair.of(scale)
    if max_scale is not None and not scale.divides(ScalePair.of(max_scale)):
        raise ShapeError(f"scale {scale.as_tuple()} does not divide base {ScalePair.of(max_scale).as_tuple()}")
    _, _, t, h, w = x.shape
    if h % scale.s_s or w % scale.s_s or (t - 1) % scale.s_t:
        raise ShapeError(
            f"input (T={t}, H={h}, W={w}) incompatible with scale {scale.as_tuple()}: "
            f"need (T-1) % {scale.s_t} == 0 and H, W % {scale.s_s} == 0"
        )
    if x.shape[1] != base_weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {base_weight.shape[1]}")
    k_t, k_s = kernel_size_for(scale)
    weight = interpolate_kernel(base_weight, (k_t, k_s))
    x = F.pad(x, (0, 0, 0, 0, k_t - 1, 0))
    return F.conv3d(x, weight, bias, stride=(scale.s_t, scale.s_s, scale.s_s))


# ---------------------------------------------------------------------------
# flexible depth-to-space


def depth_to_space(x: Tensor, scale: ScalePair) -> Tensor:
    """Pixel shuffle ``(c * s_t * s_s**2, T, H, W) -> (c, T*s_t, H*s_s, W*s_s)``."""
    c = x.shape[1]
    block = scale.s_t * scale.s_s**2
    if c % block:
        raise ShapeError(f"{c} channels not divisible by s_t * s_s^2 = {block}")
    return rearrange(
        x,
        "b (c st sh sw) t h w -> b c (t st) (h sh) (w sw)",
        st=scale.s_t,
        sh=scale.s_s,
        sw=scale.s_s,
    )


def d2s_channel_index(c: int, base: ScalePair, eta: tuple[int, int]) -> list[int]:
    """Output-channel indices of a base expansion kernel kept under ``eta``."""
    e_t, e_s = eta
    idx = []
    for ci in range(c):
        for a in range(base.s_t):
            for bh in range(base.s_s):
                for bw in range(base.s_s):
                    if a % e_t == 0 and bh % e_s == 0 and bw % e_s == 0:
                        idx.append(((ci * base.s_t + a) * base.s_s + bh) * base.s_s + bw)
    return idx


def subsample_eta(base: ScalePair, scale: ScalePair) -> tuple[int, int]:
    if base.s_t % scale.s_t or base.s_s % scale.s_s:
        raise ValueError(f"eta = base/scale is not integral for base {base.as_tuple()}, scale {scale.as_tuple()}")
    return base.s_t // scale.s_t, base.s_s // scale.s_s


def subsample_d2s_kernel(
    weight: Tensor, base: ScalePair, eta: tuple[int, int], bias: Tensor | None = None
) -> tuple[Tensor, Tensor | None]:
    """Keep the expansion-kernel outputs that survive every-``eta``-th selection.

    Convolving with the returned kernel and shuffling at ``base / eta``
    equals convolving with the full kernel, shuffling at ``base`` and
    keeping indices ``0, eta, 2 * eta, ...`` along each shuffled axis.
    """
    e_t, e_s = eta
    if int(e_t) != e_t or int(e_s) != e_s or e_t < 1 or e_s < 1:
        raise ValueError(f"eta must be positive integers, got {eta}")
    if base.s_t % e_t or base.s_s % e_s:
        raise ValueError(f"eta {eta} does not divide base {base.as_tuple()}")
    if (e_t, e_s) == (1, 1):
        return weight, bias
    block = base.s_t * base.s_s**2
    if weight.shape[0] % block:
        raise ShapeError(f"kernel has {weight.shape[0]} outputs, not a multiple of {block}")
    idx = d2s_channel_index(weight.shape[0] // block, base, (e_t, e_s))
    idx_t = torch.as_tensor(idx, device=weight.device)
    return weight[idx_t], None if bias is None else bias[idx_t]


def flexible_depth_to_space(
    z: Tensor,
    base_weight: Tensor,
    base: ScalePair,
    scale: ScalePair,
    bias: Tensor | None = None,
) -> Tensor:
    """Causal channel expansion, pixel shuffle, then drop the first ``s_t - 1`` frames."""
    scale = ScalePair.of(scale)
    eta = subsample_eta(base, scale)
    weight, b = subsample_d2s_kernel(base_weight, base, eta, bias)
    y = depth_to_space(causal_conv3d(z, weight, b), scale)
    return y[:, :, scale.s_t - 1 :]

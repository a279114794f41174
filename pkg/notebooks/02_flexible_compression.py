"""
Flexible compression and causality
==================================

One tokeniser serves sixteen compression settings: at each depth the
temporal and spatial strides are chosen at run time. Downsampling kernels
are resampled from a base kernel and upsampling kernels are subsampled
from the largest-stride kernel. Here we list the latent shapes, confirm
the subsampled upsampler matches the full one, and probe causality by
perturbing one input frame.
"""

import math

import torch

from phystok.ops import ScalePair, causal_conv3d, depth_to_space, subsample_d2s_kernel, subsample_eta
from phystok.tokeniser import Tokeniser, TokeniserConfig, cumulative_scale, latent_shape

cfg = TokeniserConfig(channels=[8, 16, 16], latent_channels=8, residual_blocks=1)
choices = cfg.all_choices()
print(f"{len(choices)} compression choices for a 9x64x64 clip")
for choice in choices:
    s = cumulative_scale(choice)
    print(" ", [c.as_tuple() for c in choice], "-> latent", latent_shape((9, 64, 64), choice),
          f"(x{9 * 64 * 64 * 3 // (math.prod(latent_shape((9, 64, 64), choice)) * 8)} smaller)")

###############################################################################
# Subsampled upsampling kernel vs. full kernel followed by subsampling.

base = ScalePair(2, 4)
w = torch.randn(3 * 2 * 16, 4, 3, 3, 3, dtype=torch.float64)
z = torch.randn(1, 4, 3, 5, 5, dtype=torch.float64)
for scale in (ScalePair(1, 2), ScalePair(2, 2), ScalePair(1, 4), ScalePair(2, 4)):
    eta = subsample_eta(base, scale)
    ws, _ = subsample_d2s_kernel(w, base, eta)
    fast = depth_to_space(causal_conv3d(z, ws), scale)
    full = depth_to_space(causal_conv3d(z, w), base)[:, :, :: eta[0], :: eta[1], :: eta[1]]
    print(scale.as_tuple(), "eta", eta, "max diff", (fast - full).abs().max().item())

###############################################################################
# Perturb frame 3 and see which reconstructed frames move.

torch.manual_seed(0)
tok = Tokeniser(cfg).eval()
x = torch.randn(1, 3, 9, 64, 64)
xp = x.clone()
xp[:, :, 3] += 1.0
with torch.no_grad():
    for choice in (choices[0], choices[-1]):
        a, b = tok(x, choice), tok(xp, choice)
        moved = [j for j in range(9) if not torch.equal(a[:, :, j], b[:, :, j])]
        print("time stride", cumulative_scale(choice).s_t, "-> frames affected", moved)

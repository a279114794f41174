"""Shared small configs and checks for model tests."""

import math

import torch

from phystok.processor import ProcessorConfig
from phystok.tokeniser import TokeniserConfig, cumulative_scale

# acceptance criteria record (number, title, passed, detail) here
ACCEPTANCE_RESULTS = []

TINY_TOK = dict(channels=[8, 16, 16], latent_channels=8, residual_blocks=1, c_total=3)
TINY_PROC = dict(blocks=2, embed_dim=32, heads=2, latent_dim=8)


def tiny_tok(**kw):
    return TokeniserConfig(**{**TINY_TOK, **kw})


def tiny_proc(**kw):
    return ProcessorConfig(**{**TINY_PROC, **kw})


def perturb_frame(x, f, seed=99):
    g = torch.Generator().manual_seed(seed)
    y = x.clone()
    y[:, :, f] += torch.randn(y[:, :, f].shape, generator=g, dtype=y.dtype)
    return y


def unchanged_frames(a, b):
    return {j for j in range(a.shape[2]) if torch.equal(a[:, :, j], b[:, :, j])}


def encoder_expected(n_latent, s, f):
    # latent frame j summarises input frames <= j * s
    return {j for j in range(n_latent) if j * s < f}


def decoder_expected(n_out, s, g):
    # output frame i is decoded from latent frames <= ceil(i / s)
    return {i for i in range(n_out) if math.ceil(i / s) < g}


def pipeline_expected(n_out, s, f):
    return {i for i in range(n_out) if s * math.ceil(i / s) < f}


def time_stride(choice):
    return cumulative_scale(choice).s_t


def directional_fd_check(params, loss_fn, n_dirs=3, eps=1e-6, seed=0):
    """Worst relative gap between analytic and central-difference directional derivatives."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.detach().clone() for p in params]
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
        analytic = sum((gr * d).sum() for gr, d in zip(grads, dirs)).item()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            up = loss_fn().item()
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
            down = loss_fn().item()
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        numeric = (up - down) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-12))
    return worst

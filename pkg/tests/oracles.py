"""Slow reference implementations used only by the test-suite."""

from fractions import Fraction

import numpy as np


def direct_conv3d(x, w, bias=None, stride=(1, 1, 1), pad_t=0, pad_s=0):
    """Loop-based 3D convolution with leading temporal and symmetric spatial zero padding.

    x: (C_in, T, H, W), w: (C_out, C_in, kt, kh, kw).
    """
    c_in, t, h, wd = x.shape
    c_out, _, kt, kh, kw = w.shape
    xp = np.zeros((c_in, t + pad_t, h + 2 * pad_s, wd + 2 * pad_s))
    xp[:, pad_t:, pad_s : pad_s + h, pad_s : pad_s + wd] = x
    st, sh, sw = stride
    to = (xp.shape[1] - kt) // st + 1
    ho = (xp.shape[2] - kh) // sh + 1
    wo = (xp.shape[3] - kw) // sw + 1
    out = np.zeros((c_out, to, ho, wo))
    for o in range(c_out):
        for a in range(to):
            for b in range(ho):
                for c in range(wo):
                    patch = xp[:, a * st : a * st + kt, b * sh : b * sh + kh, c * sw : c * sw + kw]
                    out[o, a, b, c] = np.sum(patch * w[o])
        if bias is not None:
            out[o] += bias[o]
    return out


def overlap(a0, a1, b0, b1):
    lo, hi = max(a0, b0), min(a1, b1)
    return hi - lo if hi > lo else Fraction(0)


def box_resample_kernel(w, target):
    """Integrate a piecewise-constant kernel over output boxes, one voxel at a time.

    Each input tap is spread over the unit cube as a constant density of
    total mass equal to the tap; every output tap collects the mass of the
    part of the cube it covers. Non-separable, exact rational overlaps.
    """
    kt0, kh0, kw0 = w.shape[2:]
    kt, kh, kw = target
    out = np.zeros(w.shape[:2] + (kt, kh, kw))
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                for i in range(kt0):
                    ft = overlap(Fraction(i, kt0), Fraction(i + 1, kt0), Fraction(a, kt), Fraction(a + 1, kt)) * kt0
                    if not ft:
                        continue
                    for j in range(kh0):
                        fh = overlap(Fraction(j, kh0), Fraction(j + 1, kh0), Fraction(b, kh), Fraction(b + 1, kh)) * kh0
                        if not fh:
                            continue
                        for k in range(kw0):
                            fw = overlap(Fraction(k, kw0), Fraction(k + 1, kw0), Fraction(c, kw), Fraction(c + 1, kw)) * kw0
                            if fw:
                                out[:, :, a, b, c] += float(ft * fh * fw) * w[:, :, i, j, k]
    return out


def pixel_shuffle_loops(x, st, ss):
    """(C*st*ss*ss, T, H, W) -> (C, T*st, H*ss, W*ss) by explicit index mapping."""
    cin, t, h, w = x.shape
    c = cin // (st * ss * ss)
    out = np.zeros((c, t * st, h * ss, w * ss))
    for ci in range(c):
        for a in range(st):
            for b in range(ss):
                for d in range(ss):
                    ch = ((ci * st + a) * ss + b) * ss + d
                    out[ci, a::st, b::ss, d::ss] = x[ch]
    return out

"""
Power spectra, VRMSE and spectral error bands
=============================================

Gaussian random fields with a prescribed power law are the reference
signal for the metrics. We check the measured spectrum against the
target slope, verify that the binned residual spectrum sums back to the
pixel MSE, and look at how a smoothing "model" loses the high band.
"""

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from phystok.data import gen_gaussian_field_trajectory
from phystok.metrics import BandPartition, neps, power_spectrum, residual_power_spectrum, spectrum_mse, vrmse

shape = (64, 64)
part = BandPartition.for_shape(shape)
print(f"bins 0..{part.k_max}; low <= {part.low_max}, mid <= {part.mid_max}, high above")

###############################################################################
# Measured spectra for a few exponents, averaged over 50 realisations.

k = np.arange(1, part.k_max + 1)
fig, ax = plt.subplots(figsize=(5, 4))
for beta in (0.0, 2.0, 4.0):
    frames = gen_gaussian_field_trajectory(shape, beta, 50, seed=0)[0]
    p = np.mean([power_spectrum(f, part) for f in frames], axis=0)
    fit = np.arange(2, part.k_max // 2 + 1)
    slope = np.polyfit(np.log(fit), np.log(p[fit]), 1)[0]
    ax.loglog(k, p[1:], label=f"beta={beta:g}, slope {slope:.2f}")
ax.set_xlabel("|k|")
ax.set_ylabel("P(k)")
ax.legend()
fig.savefig("spectra.png", dpi=100)

###############################################################################
# The binned residual spectrum carries the whole MSE.

rng = np.random.default_rng(1)
x, y = rng.standard_normal(shape), rng.standard_normal(shape)
print("pixel MSE   ", np.mean((x - y) ** 2))
print("spectral MSE", spectrum_mse(residual_power_spectrum(x, y, part), part))

###############################################################################
# A box blur keeps large scales and discards small ones, which shows up as
# NEPS close to 0 in the low band and close to 1 in the high band.

field = gen_gaussian_field_trajectory(shape, 2.0, 1, seed=3)[0, 0]
blur = sum(np.roll(field, (i, j), axis=(0, 1)) for i in (-1, 0, 1) for j in (-1, 0, 1)) / 9
low, mid, high = neps(field, blur, part)
print(f"VRMSE {vrmse(field, blur):.3f}  NEPS low {low:.3f} mid {mid:.3f} high {high:.3f}")

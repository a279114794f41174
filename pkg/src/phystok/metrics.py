"""Spatial and spectral error metrics.

VRMSE normalises the RMSE of a frame by the target's standard deviation.
The residual power spectrum bins orthonormal 2D Fourier modes by integer
wavenumber magnitude; with the orthonormal transform the bin-multiplicity
weighted spectrum sums to the pixel MSE. NEPS is the per-bin ratio of
residual to signal power, averaged within low/mid/high bands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

SIGMA_MIN = 1e-12
SIGNAL_POWER_MIN = 1e-20
BANDS = ("low", "mid", "high")
METRIC_NAMES = ("vrmse", "neps_low", "neps_mid", "neps_high")
HORIZON_BUCKETS = {"steps 1-2": (1, 2), "steps 3-6": (3, 6), "steps 7-18": (7, 18)}


class DegenerateTargetError(ValueError):
    """Target frame has (numerically) zero variance."""


def wavenumber_magnitude(shape: tuple[int, int]) -> np.ndarray:
    """|k| of every FFT mode, in integer-mode units of the longer axis.

    Each axis' frequency in cycles per pixel is scaled by ``max(H, W)`` so
    non-square grids share one wavenumber unit; on square grids this is the
    usual integer mode index with negative frequencies folded.
    """
    h, w = shape
    n = max(h, w)
    ky = np.fft.fftfreq(h) * n
    kx = np.fft.fftfreq(w) * n
    return np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)


@dataclass(frozen=True)
class BandPartition:
    """Integer wavenumber bins and their split into low / mid / high bands.

    ``bin_index[i, j]`` is the bin of FFT mode ``(i, j)``; bins with index
    ``<= low_max`` are low, ``<= mid_max`` mid, the rest high. The DC mode
    is in the low band.
    """

    shape: tuple[int, int]
    bin_index: np.ndarray
    counts: np.ndarray
    low_max: int
    mid_max: int

    @classmethod
    def for_shape(cls, shape, thresholds: tuple[int, int] | None = None) -> "BandPartition":
        shape = tuple(int(s) for s in shape)
        bins = np.rint(wavenumber_magnitude(shape)).astype(np.int64)
        counts = np.bincount(bins.ravel())
        k_max = len(counts) - 1
        if thresholds is None:
            # equal-width thirds of the bin range [0, k_max]
            low_max = (k_max + 1) // 3 - 1
            mid_max = 2 * (k_max + 1) // 3 - 1
        else:
            low_max, mid_max = (int(t) for t in thresholds)
            if not 0 <= low_max < mid_max:
                raise ValueError(f"need 0 <= low_max < mid_max, got {thresholds}")
        return cls(shape, bins, counts, low_max, mid_max)

    @property
    def k_max(self) -> int:
        return len(self.counts) - 1

    def band_of(self, k: int) -> str:
        if k <= self.low_max:
            return "low"
        if k <= self.mid_max:
            return "mid"
        return "high"

    def band_masks(self) -> dict[str, np.ndarray]:
        k = np.arange(len(self.counts))
        return {
            "low": k <= self.low_max,
            "mid": (k > self.low_max) & (k <= self.mid_max),
            "high": k > self.mid_max,
        }


def vrmse(x: np.ndarray, x_hat: np.ndarray) -> float:
    """RMSE over all pixels divided by the population std of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    sigma = x.std()
    if sigma < SIGMA_MIN:
        raise DegenerateTargetError(f"target std {sigma:.3g} below {SIGMA_MIN}")
    return float(np.sqrt(np.mean((x - x_hat) ** 2)) / sigma)


def power_spectrum(field: np.ndarray, partition: BandPartition) -> np.ndarray:
    """Bin-averaged squared orthonormal Fourier magnitude; NaN for empty bins."""
    field = np.asarray(field, dtype=np.float64)
    if field.shape != partition.shape:
        raise ValueError(f"field shape {field.shape} does not match partition {partition.shape}")
    power = np.abs(np.fft.fft2(field, norm="ortho")) ** 2
    sums = np.bincount(partition.bin_index.ravel(), weights=power.ravel(), minlength=len(partition.counts))
    out = np.full(len(partition.counts), np.nan)
    nz = partition.counts > 0
    out[nz] = sums[nz] / partition.counts[nz]
    return out


def residual_power_spectrum(x: np.ndarray, x_hat: np.ndarray, partition: BandPartition | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    partition = partition or BandPartition.for_shape(x.shape)
    return power_spectrum(x - x_hat, partition)


def spectrum_mse(spectrum: np.ndarray, partition: BandPartition) -> float:
    """Pixel MSE recovered from a binned spectrum, ``sum |B_k| P(k) / N``."""
    n = partition.shape[0] * partition.shape[1]
    valid = partition.counts > 0
    return float(np.sum(partition.counts[valid] * spectrum[valid]) / n)


def neps_per_bin(x, x_hat, partition: BandPartition | None = None) -> np.ndarray:
    """Residual-to-signal power ratio per bin; NaN where signal power is ~0."""
    x = np.asarray(x, dtype=np.float64)
    partition = partition or BandPartition.for_shape(x.shape)
    p_res = residual_power_spectrum(x, x_hat, partition)
    p_sig = power_spectrum(x, partition)
    out = np.full_like(p_sig, np.nan)
    ok = np.isfinite(p_sig) & (p_sig >= SIGNAL_POWER_MIN)
    out[ok] = p_res[ok] / p_sig[ok]
    return out


def neps(x, x_hat, partition: BandPartition | None = None) -> tuple[float, float, float]:
    """Band-averaged NEPS ``(low, mid, high)``; NaN for a band with no signal."""
    x = np.asarray(x, dtype=np.float64)
    partition = partition or BandPartition.for_shape(x.shape)
    ratio = neps_per_bin(x, x_hat, partition)
    out = []
    for band in BANDS:
        vals = ratio[partition.band_masks()[band]]
        vals = vals[np.isfinite(vals)]
        out.append(float(vals.mean()) if vals.size else math.nan)
    return tuple(out)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricReport:
    """Aggregate and per-(field, frame) metrics.

    ``rows`` holds long-format records ``(field, frame, metric, value)``;
    aggregates are means over the finite per-frame, per-field values.
    """

    vrmse: float
    neps_low: float
    neps_mid: float
    neps_high: float
    rows: list[tuple[str, int, str, float]] = field(default_factory=list)
    skipped: int = 0

    def aggregates(self) -> dict[str, float]:
        return {
            "vrmse": self.vrmse,
            "neps_low": self.neps_low,
            "neps_mid": self.neps_mid,
            "neps_high": self.neps_high,
        }

    def to_json(self) -> dict:
        return {
            **self.aggregates(),
            "skipped_degenerate": self.skipped,
            "rows": [{"field": f, "frame": t, "metric": m, "value": v} for f, t, m, v in self.rows],
        }


def _nanmean(values) -> float:
    arr = np.asarray(list(values), dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    return float(arr.mean()) if arr.size else math.nan


def evaluate_fields(
    x: np.ndarray,
    x_hat: np.ndarray,
    field_names: Sequence[str] | None = None,
    partition: BandPartition | None = None,
) -> MetricReport:
    """Metrics for ``(C, T, H, W)`` target/prediction arrays.

    Each channel/frame pair is scored separately. Frames whose target has
    zero variance cannot be scored by VRMSE; they are counted in
    ``skipped`` and left out of the averages.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape or x.ndim != 4:
        raise ValueError(f"expected matching (C, T, H, W) arrays, got {x.shape} and {x_hat.shape}")
    c, t = x.shape[:2]
    names = list(field_names) if field_names is not None else [f"ch{i}" for i in range(c)]
    partition = partition or BandPartition.for_shape(x.shape[2:])
    rows, skipped = [], 0
    per = {k: [] for k in ("vrmse", "neps_low", "neps_mid", "neps_high")}
    for ci in range(c):
        for ti in range(t):
            try:
                v = vrmse(x[ci, ti], x_hat[ci, ti])
            except DegenerateTargetError:
                skipped += 1
                continue
            lo, mid, hi = neps(x[ci, ti], x_hat[ci, ti], partition)
            for key, val in zip(per, (v, lo, mid, hi)):
                per[key].append(val)
                rows.append((names[ci], ti, key, val))
    return MetricReport(
        vrmse=_nanmean(per["vrmse"]),
        neps_low=_nanmean(per["neps_low"]),
        neps_mid=_nanmean(per["neps_mid"]),
        neps_high=_nanmean(per["neps_high"]),
        rows=rows,
        skipped=skipped,
    )


def merge_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Pool reports from several samples: mean of each aggregate, rows concatenated."""
    agg = {key: _nanmean(getattr(r, key) for r in reports) for key in METRIC_NAMES}
    rows = [row for r in reports for row in r.rows]
    return MetricReport(**agg, rows=rows, skipped=sum(r.skipped for r in reports))


# ---------------------------------------------------------------------------
# rollout evaluation


@dataclass
class RolloutReport:
    buckets: dict[str, float]
    per_step: list[float]
    n_trajectories: int
    rejected: int

    def lines(self) -> list[str]:
        return [f"{name}: VRMSE {val:.6g}" for name, val in self.buckets.items()]


def rollout(predict: Callable[[np.ndarray], np.ndarray], trajectory: np.ndarray, context: int = 9, steps: int = 18) -> np.ndarray:
    """Autoregressive rollout; returns predicted frames ``(C, steps, H, W)``.

    ``predict`` maps a ``(C, context, H, W)`` window to the next frame
    ``(C, H, W)``. Each prediction is appended and the window slides by one.
    """
    frames = [trajectory[:, i] for i in range(context)]
    preds = []
    for _ in range(steps):
        window = np.stack(frames[-context:], axis=1)
        nxt = np.asarray(predict(window))
        preds.append(nxt)
        frames.append(nxt)
    return np.stack(preds, axis=1)


def rollout_evaluate(
    predict: Callable[[np.ndarray], np.ndarray],
    trajectories: Iterable[np.ndarray],
    steps: int = 18,
    context: int = 9,
) -> RolloutReport:
    """Horizon-bucketed VRMSE of an autoregressive rollout.

    Frames ``0 .. context-1`` seed the rollout; step ``k`` predicts frame
    ``context + k - 1``. Trajectories shorter than ``context + steps`` are
    rejected and counted.
    """
    per_step: list[list[float]] = [[] for _ in range(steps)]
    n, rejected = 0, 0
    for traj in trajectories:
        if traj.shape[1] < context + steps:
            rejected += 1
            continue
        n += 1
        preds = rollout(predict, traj, context, steps)
        for k in range(steps):
            target = traj[:, context + k]
            vals = []
            for ci in range(target.shape[0]):
                try:
                    vals.append(vrmse(target[ci], preds[ci, k]))
                except DegenerateTargetError:
                    continue
            per_step[k].append(_nanmean(vals))
    step_means = [_nanmean(v) for v in per_step]
    buckets = {}
    for name, (lo, hi) in HORIZON_BUCKETS.items():
        if lo <= steps:
            buckets[name] = _nanmean(step_means[lo - 1 : min(hi, steps)])
    return RolloutReport(buckets, step_means, n, rejected)

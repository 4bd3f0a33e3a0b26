"""Stochastic gain comodulation: the half-normal modulator, encoder gain
application, covariance-based decoder gain estimation with min-max
normalization, and the fixed per-task gain variant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

F32 = np.float32


@dataclass(frozen=True)
class ModulatorConfig:
    """Half-normal modulator: |N(0, variance)|, T draws per estimation episode."""

    variance: float = 0.4
    draws: int = 10

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if self.draws < 2:
            raise ValueError(f"need at least 2 modulator draws, got {self.draws}")


@dataclass
class ModulatorTrace:
    values: np.ndarray  # (T,) non-negative
    mean: float = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ValueError("modulator values must be non-negative")
        if len(self.values) < 2:
            raise ValueError("trace needs at least 2 values")
        self.mean = float(self.values.mean())


@dataclass
class GainVector:
    raw: np.ndarray         # per-unit covariance sums, unnormalized
    normalized: np.ndarray  # per-unit gains in [0,1]


def sample_modulator(config: ModulatorConfig, rng: np.random.Generator) -> ModulatorTrace:
    sigma = np.sqrt(config.variance)
    return ModulatorTrace(np.abs(rng.normal(0.0, sigma, size=config.draws)))


def apply_encoder_modulation(activity: np.ndarray, context: np.ndarray, m: float) -> np.ndarray:
    """Scale each encoder channel by m * context[channel].

    activity is (C,H,W) or (N,C,H,W); the context has one entry per channel,
    shared by all spatial positions.
    """
    context = np.asarray(context, dtype=F32)
    ch_axis = 0 if activity.ndim == 3 else 1
    if activity.shape[ch_axis] != context.shape[0]:
        raise ValueError(
            f"context has {context.shape[0]} entries but activity has "
            f"{activity.shape[ch_axis]} channels")
    gain = (F32(m) * context)
    shape = [1] * activity.ndim
    shape[ch_axis] = -1
    return (activity * gain.reshape(shape)).astype(F32)


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min); if max == min every gain is set to 1
    (degenerate trace carries no modulator information, so fall back to the
    neutral attention-style decoder)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("empty gain vector")
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite raw gains")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.ones_like(raw, dtype=F32)
    return ((raw - lo) / (hi - lo)).astype(F32)


def estimate_decoder_gains(decoder_activities: np.ndarray, trace: ModulatorTrace) -> GainVector:
    """Per-unit covariance sums between the modulator and decoder activity.

    decoder_activities is (T, units): one snapshot per modulator draw.
    raw[k] = sum_t (m_t - mean(m)) * (h_tk - mean_t(h_k)).
    """
    h = np.asarray(decoder_activities, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != len(trace.values):
        raise ValueError(
            f"expected ({len(trace.values)}, units) activity snapshots, got {h.shape}")
    if h.shape[0] < 2:
        raise ValueError("need at least 2 snapshots")
    m_bar = trace.values - trace.mean
    h_bar = h - h.mean(axis=0, keepdims=True)
    raw = m_bar @ h_bar
    return GainVector(raw=raw, normalized=minmax_normalize(raw))


def estimate_decoder_gains_batch(decoder_activities: np.ndarray,
                                 trace: ModulatorTrace) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-input gain estimation.

    decoder_activities is (T, N, units); returns (raw, normalized), each
    (N, units), with min-max normalization applied per input.
    """
    h = np.asarray(decoder_activities, dtype=np.float64)
    if h.ndim != 3 or h.shape[0] != len(trace.values):
        raise ValueError(f"expected (T, N, units), got {h.shape}")
    m_bar = trace.values - trace.mean
    h_bar = h - h.mean(axis=0, keepdims=True)
    raw = np.einsum("t,tnu->nu", m_bar, h_bar)
    lo = raw.min(axis=1, keepdims=True)
    hi = raw.max(axis=1, keepdims=True)
    span = hi - lo
    degenerate = (span == 0.0)[:, 0]
    span[degenerate] = 1.0
    norm = (raw - lo) / span
    norm[degenerate] = 1.0
    return raw, norm.astype(F32)


def apply_decoder_gains(rectified_activity: np.ndarray, gains) -> np.ndarray:
    """Multiply the rectified decoder activity by the per-unit gains.

    gains may be a GainVector, a (units,) vector, or (N, units) matching a
    batched activity.
    """
    g = gains.normalized if isinstance(gains, GainVector) else np.asarray(gains)
    act = np.asarray(rectified_activity)
    if g.shape[-1] != act.shape[-1]:
        raise ValueError(f"gain length {g.shape[-1]} vs {act.shape[-1]} decoder units")
    return (act * g.astype(F32)).astype(F32)


def average_gains_per_task(per_input_gains: list) -> GainVector:
    """Elementwise mean of normalized gains across inputs of one task.

    The result is not re-normalized; means of [0,1] values stay in [0,1].
    """
    if not per_input_gains:
        raise ValueError("no gain vectors to average")
    norm = np.stack([g.normalized if isinstance(g, GainVector) else np.asarray(g)
                     for g in per_input_gains])
    mean = norm.mean(axis=0)
    return GainVector(raw=mean.astype(np.float64), normalized=mean.astype(F32))


def gain_sparsity(raw_gains: np.ndarray, thresholds) -> list[int]:
    """Count of units with |raw gain| below each threshold."""
    thresholds = list(thresholds)
    if any(t <= 0 for t in thresholds):
        raise ValueError("thresholds must be positive")
    if sorted(thresholds) != thresholds:
        raise ValueError("thresholds must be ascending")
    raw = np.abs(np.asarray(raw_gains, dtype=np.float64))
    return [int((raw < t).sum()) for t in thresholds]


def dump_gains_csv(path, rows) -> None:
    """Write (task_id, unit_index, raw_gain, normalized_gain) rows."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task_id", "unit_index", "raw_gain", "normalized_gain"])
        for task_id, raw, norm in rows:
            for i, (r, g) in enumerate(zip(raw, norm)):
                w.writerow([task_id, i, repr(float(r)), repr(float(g))])

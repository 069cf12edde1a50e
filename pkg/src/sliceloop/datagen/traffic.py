"""Time-varying Poisson packet arrivals."""

from __future__ import annotations

import numpy as np

from ..numerics import RngStream
from .params import TrafficParams


def rate_at(traffic: TrafficParams, t):
    """Arrival rate lambda(t) in packets/s; accepts scalars or arrays."""
    t = np.asarray(t, dtype=float)
    rate = np.full(t.shape, traffic.lambda0, dtype=float)
    for h in traffic.harmonics:
        rate = rate + h.alpha * np.sin(2.0 * np.pi * h.freq_hz * t + h.phase_rad)
    return float(rate) if rate.ndim == 0 else rate


def thinning_candidates(majorant: float, duration_s: float, rng: RngStream):
    """Homogeneous candidate points at rate ``majorant`` plus their acceptance uniforms."""
    if majorant <= 0:
        return np.empty(0), np.empty(0)
    n = rng.gen.poisson(majorant * duration_s)
    times = np.sort(rng.gen.uniform(0.0, duration_s, n))
    u = rng.gen.uniform(0.0, 1.0, n)
    return times, u


def sample_arrivals(traffic: TrafficParams, duration_s: float, rng: RngStream,
                    majorant: float | None = None) -> np.ndarray:
    """Arrival timestamps on [0, duration_s] by Lewis-Shedler thinning.

    ``majorant`` defaults to lambda0 + sum|alpha_k|; any larger constant
    gives the same process and lets callers share candidate streams across
    nearby parameter values.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be > 0")
    lam_max = traffic.max_rate() if majorant is None else majorant
    if lam_max < traffic.max_rate() - 1e-12:
        raise ValueError("majorant is below the peak rate")
    times, u = thinning_candidates(lam_max, duration_s, rng)
    if times.size == 0:
        return times
    keep = u * lam_max < rate_at(traffic, times)
    return times[keep]


def rate_ceiling(peak: float) -> float:
    """Power-of-two majorant at or above ``peak`` (stable under small perturbations)."""
    if peak <= 0:
        return 0.0
    return float(2.0 ** np.ceil(np.log2(peak)))

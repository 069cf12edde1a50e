"""Log-distance path loss with log-normal shadowing."""

from __future__ import annotations

import numpy as np

from ..errors import DistanceBelowReference
from ..numerics import RngStream
from .params import ChannelParams

# free-space loss uses the conventional c = 3e8 m/s
SPEED_OF_LIGHT = 3.0e8


def fspl_db(distance_m, freq_hz: float):
    """Free-space path loss 20*log10(4*pi*d*f/c)."""
    return 20.0 * np.log10(4.0 * np.pi * np.asarray(distance_m, dtype=float) * freq_hz / SPEED_OF_LIGHT)


def mean_snr_db(chan: ChannelParams, distance_m):
    d = np.asarray(distance_m, dtype=float)
    loss = fspl_db(chan.ref_distance_m, chan.freq_hz) + 10.0 * chan.pathloss_exponent * np.log10(
        d / chan.ref_distance_m
    )
    return chan.tx_budget_db - loss


def snr_from_normals(chan: ChannelParams, distance_m, z):
    """SNR given pre-drawn standard normals ``z`` for the shadowing term."""
    d = np.asarray(distance_m, dtype=float)
    if np.any(d < chan.ref_distance_m):
        raise DistanceBelowReference(
            f"distance {d.min():.3g} m is below the reference {chan.ref_distance_m} m"
        )
    return mean_snr_db(chan, d) - chan.shadowing_sigma_db * np.asarray(z, dtype=float)


def channel_snr(chan: ChannelParams, distance_m: float, rng: RngStream) -> float:
    return float(snr_from_normals(chan, distance_m, rng.gen.standard_normal()))


def cell_sites(area_side_m: float, cells_per_side: int) -> np.ndarray:
    """Cell centres of a regular ``cells_per_side`` x ``cells_per_side`` grid."""
    step = area_side_m / cells_per_side
    c = (np.arange(cells_per_side) + 0.5) * step
    gx, gy = np.meshgrid(c, c, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def nearest_site_distance(x, y, sites: np.ndarray):
    dx = np.asarray(x)[:, None] - sites[None, :, 0]
    dy = np.asarray(y)[:, None] - sites[None, :, 1]
    return np.sqrt(dx * dx + dy * dy).min(axis=1)

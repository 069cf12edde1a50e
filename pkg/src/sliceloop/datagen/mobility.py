"""Random waypoint mobility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import RngStream
from .params import MobilityParams

_BATCH = 32


@dataclass(frozen=True)
class Track:
    """Piecewise-linear trajectory: knots (t, x, y) and the speed on each segment."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray  # len(t) - 1, speed on [t[i], t[i+1])

    def at(self, times):
        times = np.asarray(times, dtype=float)
        x = np.interp(times, self.t, self.x)
        y = np.interp(times, self.t, self.y)
        seg = np.clip(np.searchsorted(self.t, times, side="right") - 1, 0, len(self.speed) - 1)
        return x, y, self.speed[seg]


def waypoint_track(mob: MobilityParams, area_side_m: float, duration_s: float,
                   rng: RngStream, warmup_s: float = 0.0) -> Track:
    """Build a random waypoint track covering [0, duration_s].

    The walk starts at ``-warmup_s`` so that positions at t = 0 are close to
    the model's stationary (centre-heavy) distribution rather than uniform.
    Uniforms are drawn in fixed-size batches of (x, y, speed) triples so the
    draw sequence does not depend on the speed bounds; nearby parameter
    values then produce nearby tracks.
    """
    x0, y0 = rng.gen.uniform(0.0, area_side_m, 2)
    t0 = -float(warmup_s)
    ts, xs, ys, speeds = [t0], [x0], [y0], []
    t, x, y = t0, x0, y0
    while t < duration_s:
        batch = rng.gen.uniform(0.0, 1.0, (_BATCH, 3))
        for ux, uy, us in batch:
            nx, ny = ux * area_side_m, uy * area_side_m
            v = mob.v_min + (mob.v_max - mob.v_min) * us
            dist = float(np.hypot(nx - x, ny - y))
            t += dist / v
            ts.append(t); xs.append(nx); ys.append(ny); speeds.append(v)
            x, y = nx, ny
            if mob.pause_s > 0:
                t += mob.pause_s
                ts.append(t); xs.append(x); ys.append(y); speeds.append(0.0)
            if t >= duration_s:
                break
    return Track(np.array(ts), np.array(xs), np.array(ys), np.array(speeds))


def random_waypoint(mob: MobilityParams, area_side_m: float, duration_s: float, dt_s: float,
                    rng: RngStream) -> list[tuple[float, float, float, float]]:
    """Trajectory sampled every ``dt_s`` seconds as (t, x, y, speed) tuples."""
    if dt_s <= 0:
        raise ValueError("dt_s must be > 0")
    track = waypoint_track(mob, area_side_m, duration_s, rng)
    times = np.arange(0.0, duration_s + 0.5 * dt_s, dt_s)
    times = times[times <= duration_s]
    x, y, v = track.at(times)
    return list(zip(times.tolist(), x.tolist(), y.tolist(), v.tolist()))

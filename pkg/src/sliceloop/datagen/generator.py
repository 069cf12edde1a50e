"""Dataset generation: traffic, mobility, channel and labels per user.

Each user draws from its own substream keyed by ``user_id``; within a user
every physical component has a further substream. Regenerating a subset of
users, or the same users under slightly different parameters, therefore
reuses the same underlying random numbers.
"""

from __future__ import annotations

import numpy as np

from .. import canonical
from ..errors import InvalidParams, NegativeSigma
from ..numerics import RngStream
from .channel import cell_sites, nearest_site_distance, snr_from_normals
from .dataset import (
    GENERATOR_VERSION,
    NUMERIC_FEATURES,
    SCHEMA_VERSION,
    Dataset,
    Sample,
    now_iso,
)
from .mobility import waypoint_track
from .params import SimulationParams
from .traffic import rate_at, rate_ceiling, thinning_candidates

# The model registry the generator is assembled from. Only these members exist.
MODEL_REGISTRY = {
    "traffic": "inhomogeneous-poisson-thinning",
    "mobility": "random-waypoint",
    "channel": "log-distance-shadowing",
    "anomaly": "additive-gaussian",
}


# Mobility runs this long before t = 0 so sampled positions are near-stationary.
MOBILITY_WARMUP_S = 2000.0


def samples_per_user(n_samples: int, n_users: int) -> np.ndarray:
    base, extra = divmod(n_samples, n_users)
    counts = np.full(n_users, base, dtype=np.int64)
    counts[:extra] += 1
    return counts


def surge_interval(theta: SimulationParams, rng: RngStream) -> tuple[float, float]:
    frac = theta.surge.surge_fraction
    start = rng.child("surge").gen.uniform() * theta.duration_s * (1.0 - frac)
    return float(start), float(start + frac * theta.duration_s)


def group_of(x, y, theta: SimulationParams) -> np.ndarray:
    """1 (urban) inside the central disc, 0 (rural) elsewhere."""
    c = 0.5 * theta.area_side_m
    return (np.hypot(np.asarray(x) - c, np.asarray(y) - c) <= theta.urban_radius_m).astype(np.int8)


def perturb(values: np.ndarray, sigma: float, normals: np.ndarray) -> np.ndarray:
    if sigma < 0:
        raise NegativeSigma(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return values.copy()
    return values + sigma * normals


def inject_anomaly(d: Sample, sigma: float, rng: RngStream) -> Sample:
    """Additive Gaussian noise on every numeric feature; marks the sample anomalous."""
    z = rng.gen.standard_normal(len(NUMERIC_FEATURES))
    new = perturb(d.numeric(), sigma, z)
    fields = dict(zip(NUMERIC_FEATURES, new.tolist()))
    return Sample(**{**d.__dict__, **fields, "is_anomalous": True})


def _user_columns(theta: SimulationParams, user: int, k: int, surge: tuple[float, float],
                  lam_cap: float, sites: np.ndarray, rng: RngStream) -> dict[str, np.ndarray]:
    D = theta.duration_s
    win = D / k
    w = np.arange(k)
    tc = (w + 0.5) * win

    track = waypoint_track(theta.mobility, theta.area_side_m, D, rng.child("mobility"),
                           warmup_s=MOBILITY_WARMUP_S)
    x, y, speed = track.at(tc)
    group = group_of(x, y, theta)

    in_surge = (tc >= surge[0]) & (tc < surge[1])
    escape = rng.child("exposure").gen.uniform(0.0, 1.0, k)
    exposed = in_surge & ((group == 1) | (escape >= theta.label_rule.confound))

    times, u = thinning_candidates(lam_cap, D, rng.child("arrivals"))
    if times.size:
        widx = np.minimum((times / win).astype(np.int64), k - 1)
        mult = np.where(exposed[widx], theta.surge.surge_multiplier, 1.0)
        keep = u * lam_cap < rate_at(theta.traffic, times) * mult
        counts = np.bincount(widx[keep], minlength=k)
    else:
        counts = np.zeros(k, dtype=np.int64)
    load = counts / win

    dist = np.maximum(nearest_site_distance(x, y, sites), theta.channel.ref_distance_m)
    z = rng.child("shadow").gen.standard_normal(k)
    snr = snr_from_normals(theta.channel, dist, z)
    label = ((snr < theta.label_rule.snr_threshold_db) | exposed).astype(np.int8)

    feats = np.column_stack([x, y, speed, load, snr])
    eps = rng.child("anomaly").gen.standard_normal(feats.shape)
    noisy = perturb(feats, theta.anomaly_sigma, eps)
    feats = np.where(exposed[:, None], noisy, feats)
    side = theta.area_side_m
    feats[:, 0:2] = np.clip(feats[:, 0:2], 0.0, side)
    feats[:, 2:4] = np.maximum(feats[:, 2:4], 0.0)

    return {
        "user_id": np.full(k, user, dtype=np.int64),
        "window": w,
        "timestamp_s": tc,
        "pos_x_m": feats[:, 0],
        "pos_y_m": feats[:, 1],
        "speed_mps": feats[:, 2],
        "traffic_load_pps": feats[:, 3],
        "snr_db": feats[:, 4],
        "group": group_of(feats[:, 0], feats[:, 1], theta),
        "label": label,
        "is_anomalous": exposed,
    }


def generate(theta: SimulationParams, n_samples: int, rng: RngStream,
             user_ids=None, created_at: str | None = None) -> Dataset:
    """Generate ``n_samples`` samples spread round-robin over ``theta.n_users`` users.

    ``user_ids`` restricts generation to a subset of users; their rows are
    identical to the corresponding rows of the full dataset.
    """
    if n_samples < 1:
        raise InvalidParams("n_samples must be >= 1")
    counts = samples_per_user(n_samples, theta.n_users)
    users = range(theta.n_users) if user_ids is None else sorted(int(u) for u in user_ids)
    surge = surge_interval(theta, rng)
    lam_cap = rate_ceiling(theta.traffic.max_rate() * theta.surge.surge_multiplier)
    sites = cell_sites(theta.area_side_m, theta.channel.cells_per_side)

    parts = []
    for user in users:
        if not 0 <= user < theta.n_users:
            raise InvalidParams(f"user_id {user} outside [0, {theta.n_users})")
        k = int(counts[user])
        if k == 0:
            continue
        parts.append(_user_columns(theta, user, k, surge, lam_cap, sites, rng.child("user", user)))

    cols = {name: np.concatenate([p[name] for p in parts]) for name in parts[0]} if parts else {
        name: np.empty(0) for name in ("user_id", "window", "timestamp_s", "pos_x_m", "pos_y_m",
                                       "speed_mps", "traffic_load_pps", "snr_db", "group",
                                       "label", "is_anomalous")
    }
    # global sample id = position in the full round-robin layout
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    cols["sample_id"] = offsets[cols["user_id"].astype(np.int64)] + cols["window"].astype(np.int64)

    theta_dict = theta.to_dict()
    run_id = canonical.digest({"theta": theta_dict, "seed": rng.seed, "path": list(rng.path),
                               "n": n_samples})[:16]
    meta = {
        "theta": theta_dict,
        "seed": rng.seed,
        "stream_path": list(rng.path),
        "n_samples": int(cols["sample_id"].size),
        "n_samples_requested": n_samples,
        "run_id": run_id,
        "generator_version": GENERATOR_VERSION,
        "schema_version": SCHEMA_VERSION,
        "model_registry": dict(MODEL_REGISTRY),
        "surge_interval_s": list(surge),
        "provenance_log": [{"event": "generated", "run_id": run_id}],
        "created_at": created_at or now_iso(),
    }
    return Dataset(cols, meta)

"""Simulation parameters and their flat-vector view.

The flat view is what the federated calibration differentiates through.
Its ordering is fixed (``THETA_LAYOUT_VERSION``)::

    [lambda0, alpha_1..K, f_1..K, phi_1..K,
     v_min, v_max, pathloss_exponent, shadowing_sigma_db,
     anomaly_sigma, surge_multiplier]
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..errors import InvalidParams

THETA_LAYOUT_VERSION = 1


@dataclass(frozen=True)
class Harmonic:
    alpha: float
    freq_hz: float
    phase_rad: float


@dataclass(frozen=True)
class TrafficParams:
    lambda0: float = 5.0
    harmonics: tuple[Harmonic, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "harmonics", tuple(
            h if isinstance(h, Harmonic) else Harmonic(*h) for h in self.harmonics
        ))
        if not math.isfinite(self.lambda0) or self.lambda0 < 0:
            raise InvalidParams(f"lambda0 must be finite and >= 0, got {self.lambda0}")
        if self.lambda0 < self.peak_swing() - 1e-12:
            raise InvalidParams(
                f"lambda0={self.lambda0} < sum|alpha_k|={self.peak_swing()}: rate could go negative"
            )

    def peak_swing(self) -> float:
        return sum(abs(h.alpha) for h in self.harmonics)

    def max_rate(self) -> float:
        return self.lambda0 + self.peak_swing()


@dataclass(frozen=True)
class MobilityParams:
    v_min: float = 1.0
    v_max: float = 10.0
    pause_s: float = 0.0

    def __post_init__(self):
        if not (0 < self.v_min <= self.v_max):
            raise InvalidParams(f"need 0 < v_min <= v_max, got {self.v_min}, {self.v_max}")
        if self.pause_s < 0:
            raise InvalidParams("pause_s must be >= 0")


@dataclass(frozen=True)
class ChannelParams:
    freq_hz: float = 28e9
    pathloss_exponent: float = 2.0
    shadowing_sigma_db: float = 4.0
    ref_distance_m: float = 1.0
    tx_budget_db: float = 90.0
    # small cells on a regular grid; SNR uses the nearest one
    cells_per_side: int = 4

    def __post_init__(self):
        if self.freq_hz <= 0 or self.ref_distance_m <= 0:
            raise InvalidParams("freq_hz and ref_distance_m must be > 0")
        if self.shadowing_sigma_db < 0:
            raise InvalidParams("shadowing_sigma_db must be >= 0")
        if self.pathloss_exponent <= 0:
            raise InvalidParams("pathloss_exponent must be > 0")
        if self.cells_per_side < 1:
            raise InvalidParams("cells_per_side must be >= 1")


@dataclass(frozen=True)
class AnomalySpec:
    surge_fraction: float = 0.2
    surge_multiplier: float = 1.2

    def __post_init__(self):
        if not 0.0 <= self.surge_fraction <= 1.0:
            raise InvalidParams("surge_fraction must lie in [0, 1]")
        if self.surge_multiplier < 1.0:
            raise InvalidParams("surge_multiplier must be >= 1")


@dataclass(frozen=True)
class LabelRuleParams:
    """Fault label: Y = 1 when SNR is below threshold or the sample is surge-exposed.

    ``confound`` in [0, 1] is the probability that a rural sample inside a
    surge window escapes the surge. At 0 exposure is independent of group;
    above 0 surges concentrate on urban users, which plants a
    group -> exposure -> label path for the bias audit to find.
    """

    snr_threshold_db: float = -15.0
    confound: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confound <= 1.0:
            raise InvalidParams("confound must lie in [0, 1]")


@dataclass(frozen=True)
class SimulationParams:
    traffic: TrafficParams = field(default_factory=TrafficParams)
    mobility: MobilityParams = field(default_factory=MobilityParams)
    channel: ChannelParams = field(default_factory=ChannelParams)
    anomaly_sigma: float = 0.5
    surge: AnomalySpec = field(default_factory=AnomalySpec)
    n_users: int = 100
    area_side_m: float = 1000.0
    duration_s: float = 6000.0
    urban_radius_m: float = 200.0
    label_rule: LabelRuleParams = field(default_factory=LabelRuleParams)

    def __post_init__(self):
        if self.n_users < 1:
            raise InvalidParams("n_users must be >= 1")
        if not (self.area_side_m > 0 and self.duration_s > 0):
            raise InvalidParams("area_side_m and duration_s must be > 0")
        if self.anomaly_sigma < 0 or not math.isfinite(self.anomaly_sigma):
            raise InvalidParams("anomaly_sigma must be finite and >= 0")
        if self.urban_radius_m < 0:
            raise InvalidParams("urban_radius_m must be >= 0")

    @property
    def n_harmonics(self) -> int:
        return len(self.traffic.harmonics)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["traffic"]["harmonics"] = [list(astuple_h(h)) for h in self.traffic.harmonics]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationParams":
        d = dict(d)
        traffic = dict(d.pop("traffic", {}))
        traffic["harmonics"] = tuple(Harmonic(*h) for h in traffic.get("harmonics", ()))
        try:
            return cls(
                traffic=TrafficParams(**traffic),
                mobility=MobilityParams(**d.pop("mobility", {})),
                channel=ChannelParams(**d.pop("channel", {})),
                surge=AnomalySpec(**d.pop("surge", {})),
                label_rule=LabelRuleParams(**d.pop("label_rule", {})),
                **d,
            )
        except TypeError as exc:
            raise InvalidParams(str(exc)) from exc


def astuple_h(h: Harmonic) -> tuple[float, float, float]:
    return (h.alpha, h.freq_hz, h.phase_rad)


def theta_names(n_harmonics: int) -> list[str]:
    k = range(1, n_harmonics + 1)
    return (
        ["lambda0"]
        + [f"alpha_{i}" for i in k]
        + [f"f_{i}" for i in k]
        + [f"phi_{i}" for i in k]
        + ["v_min", "v_max", "pathloss_exponent", "shadowing_sigma_db",
           "anomaly_sigma", "surge_multiplier"]
    )


def to_vector(p: SimulationParams) -> np.ndarray:
    h = p.traffic.harmonics
    return np.array(
        [p.traffic.lambda0]
        + [x.alpha for x in h]
        + [x.freq_hz for x in h]
        + [x.phase_rad for x in h]
        + [p.mobility.v_min, p.mobility.v_max,
           p.channel.pathloss_exponent, p.channel.shadowing_sigma_db,
           p.anomaly_sigma, p.surge.surge_multiplier],
        dtype=float,
    )


def from_vector(template: SimulationParams, vec) -> SimulationParams:
    """Rebuild params from a flat vector; non-vector fields come from ``template``."""
    v = np.asarray(vec, dtype=float)
    k = template.n_harmonics
    if v.shape != (1 + 3 * k + 6,):
        raise InvalidParams(f"theta vector has shape {v.shape}, expected ({1 + 3 * k + 6},)")
    if not np.all(np.isfinite(v)):
        raise InvalidParams("theta vector has non-finite entries")
    harmonics = tuple(
        Harmonic(float(v[1 + i]), float(v[1 + k + i]), float(v[1 + 2 * k + i])) for i in range(k)
    )
    v_min, v_max, n_exp, shadow, anomaly, mult = (float(x) for x in v[1 + 3 * k:])
    return replace(
        template,
        traffic=TrafficParams(float(v[0]), harmonics),
        mobility=replace(template.mobility, v_min=v_min, v_max=v_max),
        channel=replace(template.channel, pathloss_exponent=n_exp, shadowing_sigma_db=shadow),
        anomaly_sigma=anomaly,
        surge=replace(template.surge, surge_multiplier=mult),
    )


# Admissible box per coordinate kind; also the normalization range used by
# the calibrator (u = (theta - lo) / (hi - lo)).
_BOUNDS = {
    "lambda0": (0.0, 50.0),
    "alpha": (-25.0, 25.0),
    "f": (0.0, 1.0),
    "phi": (-math.pi, math.pi),
    "v_min": (0.1, 30.0),
    "v_max": (0.1, 30.0),
    "pathloss_exponent": (1.5, 6.0),
    "shadowing_sigma_db": (0.0, 20.0),
    "anomaly_sigma": (0.0, 10.0),
    "surge_multiplier": (1.0, 5.0),
}


def theta_bounds(n_harmonics: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = [], []
    for name in theta_names(n_harmonics):
        kind = name.split("_")[0] if name[:2] in ("al", "f_", "ph") else name
        a, b = _BOUNDS[kind]
        lo.append(a)
        hi.append(b)
    return np.array(lo), np.array(hi)


def project(vec, n_harmonics: int) -> np.ndarray:
    """Clamp a theta vector back into the admissible region."""
    lo, hi = theta_bounds(n_harmonics)
    v = np.clip(np.asarray(vec, dtype=float), lo, hi)
    k = n_harmonics
    swing = np.abs(v[1:1 + k]).sum()
    if v[0] < swing:
        v[0] = min(swing, hi[0])
        if v[0] < swing:
            v[1:1 + k] *= v[0] / swing
    i_min = 1 + 3 * k
    if v[i_min] > v[i_min + 1]:
        mid = 0.5 * (v[i_min] + v[i_min + 1])
        v[i_min] = v[i_min + 1] = mid
    return v

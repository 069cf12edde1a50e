"""Federated calibration of the generator parameters.

Virtual clients hold emulated real observations. Each one measures how far
the simulator, regenerated under a candidate theta, lands from its
observations, differentiates that discrepancy by central finite differences
under common random numbers, clips and noises the gradient, and the server
averages the contributions and takes a gradient step.

All round arithmetic happens in normalized coordinates
``u = (theta - lo) / (hi - lo)`` so one learning rate, clip norm and noise
scale mean the same thing for every coordinate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import canonical
from .datagen.dataset import NUMERIC_FEATURES, Dataset
from .datagen.generator import generate
from .datagen.params import (
    SimulationParams,
    from_vector,
    project,
    theta_bounds,
    theta_names,
    to_vector,
)
from .errors import (
    DimensionMismatch,
    InvalidParams,
    NonFiniteLoss,
    SchemaMismatch,
    WeightSumMismatch,
)
from .numerics import RngStream

# The channel block of theta. Its effect on every feature is smooth under
# common random numbers, unlike mobility or arrival-rate coordinates whose
# perturbed trajectories drift apart over a run.
CHANNEL_COORDINATES = ("pathloss_exponent", "shadowing_sigma_db")

PRIVACY_NOTE = "(epsilon, delta)-DP accounting out of scope; noise scale and clip norm recorded only"


@dataclass(frozen=True)
class FLConfig:
    n_clients: int = 5
    n_rounds: int = 10
    learning_rate: float = 2e-3
    dp_sigma: float = 1.0
    clip_norm: float = 1.0
    fd_step: float = 1e-3
    interference_fraction: float = 0.15
    # negative SNR offset applied to interfered samples, drawn uniformly (dB)
    interference_db: tuple[float, float] = (5.0, 15.0)
    # theta coordinates refined by the loop; the rest stay at their initial value
    calibrated: tuple[str, ...] = CHANNEL_COORDINATES

    def __post_init__(self):
        object.__setattr__(self, "interference_db", tuple(float(x) for x in self.interference_db))
        object.__setattr__(self, "calibrated", tuple(self.calibrated))
        if not self.calibrated:
            raise InvalidParams("at least one theta coordinate must be calibrated")
        if self.n_clients < 1 or self.n_rounds < 0:
            raise InvalidParams("n_clients must be >= 1 and n_rounds >= 0")
        if not self.learning_rate > 0 or not self.clip_norm > 0 or not self.fd_step > 0:
            raise InvalidParams("learning_rate, clip_norm and fd_step must be > 0")
        if self.dp_sigma < 0:
            raise InvalidParams("dp_sigma must be >= 0")
        if not 0.0 <= self.interference_fraction <= 1.0:
            raise InvalidParams("interference_fraction must lie in [0, 1]")
        lo, hi = self.interference_db
        if not 0.0 <= lo <= hi:
            raise InvalidParams("interference_db must satisfy 0 <= low <= high")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["interference_db"] = list(self.interference_db)
        d["calibrated"] = list(self.calibrated)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FLConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ClientState:
    client_id: int
    real_samples: Dataset
    # stream the observations were generated from; regeneration reuses it
    rng: RngStream
    template: SimulationParams | None = None
    # per-feature standardization; None means the client's own std
    scale: np.ndarray | None = None

    def __post_init__(self):
        if len(self.real_samples) < 1:
            raise InvalidParams("a client needs at least one sample")
        if self.template is None:
            theta = self.real_samples.metadata.get("theta")
            if theta is None:
                raise InvalidParams("client data carries no theta; pass a template")
            object.__setattr__(self, "template", SimulationParams.from_dict(theta))

    @property
    def n_cl(self) -> int:
        return len(self.real_samples)

    @property
    def user_ids(self) -> np.ndarray:
        return np.unique(self.real_samples["user_id"])

    @property
    def layout_size(self) -> int:
        """Sample count of the full run the client's rows were cut from."""
        meta = self.real_samples.metadata
        return int(meta.get("n_samples_requested", meta.get("n_samples", self.n_cl)))


@dataclass(frozen=True)
class PrivacyLedger:
    dp_sigma: float
    clip_norm: float
    rounds_applied: int = 0
    note: str = PRIVACY_NOTE

    def bump(self) -> "PrivacyLedger":
        return replace(self, rounds_applied=self.rounds_applied + 1)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ClientContribution:
    client_id: int
    n_cl: int
    delta: float
    gradient: np.ndarray
    noised_gradient: np.ndarray


@dataclass(frozen=True)
class FLRoundState:
    """One aggregation round. Vectors are in normalized coordinates."""

    round: int
    theta: np.ndarray
    per_client: tuple[ClientContribution, ...]
    aggregated_g: np.ndarray
    # theta - lr * aggregated_g, before projection
    theta_step: np.ndarray
    theta_next: np.ndarray
    learning_rate: float

    @property
    def mean_delta(self) -> float:
        return float(np.mean([c.delta for c in self.per_client]))

    def summary(self, space: "ThetaSpace | None" = None) -> dict:
        out = {
            "round": self.round,
            "theta": self.theta.tolist(),
            "aggregated_g": self.aggregated_g.tolist(),
            "theta_step": self.theta_step.tolist(),
            "theta_next": self.theta_next.tolist(),
            "learning_rate": self.learning_rate,
            "mean_delta": self.mean_delta,
            "per_client": [
                {"client_id": c.client_id, "n_cl": c.n_cl, "delta": c.delta,
                 "gradient": c.gradient.tolist(), "noised_gradient": c.noised_gradient.tolist()}
                for c in self.per_client
            ],
        }
        if space is not None:
            out["theta_physical"] = space.to_theta(self.theta).tolist()
            out["theta_next_physical"] = space.to_theta(self.theta_next).tolist()
        return out


@dataclass(frozen=True)
class ThetaSpace:
    """Affine map between (a selection of) theta and normalized coordinates.

    ``base`` and ``index`` describe how the selected coordinates sit inside
    the full parameter vector; ``full`` fills the remaining entries from
    ``base``.
    """

    lo: np.ndarray
    scale: np.ndarray
    names: tuple[str, ...] = ()
    base: np.ndarray | None = None
    index: np.ndarray | None = None
    projector: Callable[[np.ndarray], np.ndarray] | None = None

    @classmethod
    def identity(cls, dim: int) -> "ThetaSpace":
        return cls(np.zeros(dim), np.ones(dim), tuple(f"theta_{i}" for i in range(dim)))

    @classmethod
    def for_params(cls, template: SimulationParams, names=None) -> "ThetaSpace":
        k = template.n_harmonics
        all_names = theta_names(k)
        names = tuple(all_names if names is None else names)
        unknown = [n for n in names if n not in all_names]
        if unknown:
            raise InvalidParams(f"unknown theta coordinates {unknown}")
        index = np.array([all_names.index(n) for n in names], dtype=np.int64)
        lo, hi = theta_bounds(k)
        return cls(lo[index], (hi - lo)[index], names, to_vector(template), index,
                   lambda v: project(v, k))

    @property
    def dim(self) -> int:
        return int(self.lo.size)

    def to_unit(self, theta) -> np.ndarray:
        return (np.asarray(theta, dtype=float) - self.lo) / self.scale

    def to_theta(self, u) -> np.ndarray:
        return self.lo + np.asarray(u, dtype=float) * self.scale

    def full(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.base is None:
            return theta.copy()
        out = self.base.copy()
        out[self.index] = theta
        return out

    def select(self, full_theta) -> np.ndarray:
        v = np.asarray(full_theta, dtype=float)
        return v.copy() if self.index is None else v[self.index]

    def project_unit(self, u) -> np.ndarray:
        if self.projector is None:
            return np.asarray(u, dtype=float).copy()
        return self.to_unit(self.select(self.projector(self.full(self.to_theta(u)))))


# -- emulated observations and partitioning ----------------------------------


def emulate_real(base: Dataset, interference_fraction: float, rng: RngStream,
                 offset_db: tuple[float, float] = (5.0, 15.0)) -> Dataset:
    """Degrade SNR on an exact ``round(fraction * n)`` subset to mimic interference."""
    if not 0.0 <= interference_fraction <= 1.0:
        raise InvalidParams("interference_fraction must lie in [0, 1]")
    n = len(base)
    k = int(round(interference_fraction * n))
    idx = np.sort(rng.child("interfered").gen.choice(n, size=k, replace=False))
    offsets = rng.child("offset").gen.uniform(offset_db[0], offset_db[1], k)
    snr = np.array(base["snr_db"], dtype=float)
    snr[idx] -= offsets
    event = {"event": "emulate_real", "interference_fraction": float(interference_fraction),
             "n_altered": k, "offset_db": [float(x) for x in offset_db]}
    return base.replace_columns(event=event, snr_db=snr)


def partition_clients(real: Dataset, n_clients: int, rng: RngStream,
                      template: SimulationParams | None = None,
                      scale: np.ndarray | None = None) -> list[ClientState]:
    """Round-robin split by user_id; client c holds users with user_id % n_clients == c.

    Passing a common ``scale`` makes every client's discrepancy a plain mean
    over its rows, so the sample-weighted average of client losses equals
    the loss on the pooled data.
    """
    users = np.asarray(real["user_id"])
    clients = []
    for c in range(n_clients):
        idx = np.flatnonzero(users % n_clients == c)
        if idx.size == 0:
            raise InvalidParams(f"client {c} would hold no samples")
        part = real.take(idx, event={"event": "client_partition", "client_id": c,
                                     "n_clients": n_clients})
        clients.append(ClientState(c, part, rng, template, scale))
    return clients


# -- discrepancy ---------------------------------------------------------------


def mean_squared_distance(pred, obs) -> float:
    """(1/m) * sum_i ||pred_i - obs_i||^2 over row vectors."""
    p = np.asarray(pred, dtype=float)
    o = np.asarray(obs, dtype=float)
    # a flat vector holds one scalar observation per sample
    p = p.reshape(-1, 1) if p.ndim == 1 else p
    o = o.reshape(-1, 1) if o.ndim == 1 else o
    if p.shape != o.shape:
        raise SchemaMismatch(f"prediction shape {p.shape} != observation shape {o.shape}")
    return float(np.mean(np.sum((p - o) ** 2, axis=1)))


def _key_codes(ds: Dataset, stride: int) -> np.ndarray:
    return np.asarray(ds["user_id"], dtype=np.int64) * stride + np.asarray(ds["window"], dtype=np.int64)


def match_rows(sim: Dataset, obs: Dataset) -> np.ndarray:
    """Index into ``sim`` for each row of ``obs``, matched on (user_id, window)."""
    stride = int(max(np.max(sim["window"], initial=0), np.max(obs["window"], initial=0))) + 1
    sk, ok = _key_codes(sim, stride), _key_codes(obs, stride)
    order = np.argsort(sk, kind="stable")
    pos = np.searchsorted(sk[order], ok)
    pos = np.minimum(pos, sk.size - 1)
    hit = sk[order][pos] == ok
    if not np.all(hit):
        raise SchemaMismatch(f"{int((~hit).sum())} observations have no simulated counterpart")
    return order[pos]


def feature_scale(ds: Dataset, features=NUMERIC_FEATURES) -> np.ndarray:
    s = ds.features(features).std(axis=0)
    return np.where(s > 1e-12, s, 1.0)


def simulate(theta_vec, client: ClientState) -> Dataset:
    """f_theta for a client: regenerate its users' rows under ``theta_vec``."""
    params = from_vector(client.template, theta_vec)
    return generate(params, client.layout_size, client.rng, user_ids=client.user_ids,
                    created_at="")


def discrepancy(theta_vec, client: ClientState, features=NUMERIC_FEATURES) -> float:
    """Paired mean squared error on standardized features against the client's observations."""
    obs = client.real_samples
    missing = [f for f in features if f not in obs.columns]
    if missing:
        raise SchemaMismatch(f"client data lacks features {missing}")
    sim = simulate(theta_vec, client)
    idx = match_rows(sim, obs)
    scale = feature_scale(obs, features) if client.scale is None else np.asarray(client.scale, float)
    return mean_squared_distance(sim.features(features)[idx] / scale, obs.features(features) / scale)


# -- gradients, privacy, aggregation ------------------------------------------


LossFn = Callable[[np.ndarray, object], float]


def _checked(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss is not finite at {where}")
    return float(value)


def local_gradient(theta, client, fd_step: float, loss: LossFn | None = None) -> np.ndarray:
    """Central finite-difference gradient of ``loss(theta, client)``.

    Each evaluation of the default loss regenerates from the client's own
    stream, so theta + h and theta - h see identical random numbers. A
    coordinate whose forward or backward point is inadmissible falls back to
    a one-sided difference.
    """
    if not fd_step > 0:
        raise InvalidParams("fd_step must be > 0")
    loss = loss or discrepancy
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    center = None
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = fd_step
        vals = []
        for point in (theta + e, theta - e):
            try:
                vals.append(_checked(loss(point, client), f"coordinate {j}"))
            except InvalidParams:
                vals.append(None)
        if vals[0] is not None and vals[1] is not None:
            grad[j] = (vals[0] - vals[1]) / (2.0 * fd_step)
            continue
        if center is None:
            center = _checked(loss(theta, client), "center")
        if vals[0] is not None:
            grad[j] = (vals[0] - center) / fd_step
        elif vals[1] is not None:
            grad[j] = (center - vals[1]) / fd_step
        else:
            grad[j] = 0.0
    return grad


def clip(g, clip_norm: float) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    norm = float(np.linalg.norm(g))
    return g * (clip_norm / norm) if norm > clip_norm else g.copy()


def dp_noise(g, clip_norm: float, sigma: float, rng: RngStream) -> np.ndarray:
    """Clip to ``clip_norm`` then add N(0, sigma^2) to every coordinate."""
    if not clip_norm > 0:
        raise InvalidParams("clip_norm must be > 0")
    if sigma < 0:
        raise InvalidParams("sigma must be >= 0")
    clipped = clip(g, clip_norm)
    v = rng.gen.standard_normal(clipped.shape)
    return clipped + sigma * v if sigma > 0 else clipped


def fedavg(contributions: Sequence[tuple[int, np.ndarray]], n_total: int) -> np.ndarray:
    """Sample-count weighted mean, sum_c (n_c / N) g_c."""
    if not contributions:
        raise DimensionMismatch("no contributions to aggregate")
    dims = {np.asarray(g).shape for _, g in contributions}
    if len(dims) != 1:
        raise DimensionMismatch(f"gradient shapes differ: {sorted(dims)}")
    if sum(n for n, _ in contributions) != n_total:
        raise WeightSumMismatch(f"client counts sum to {sum(n for n, _ in contributions)}, not {n_total}")
    out = np.zeros(dims.pop())
    for n, g in contributions:
        out += (n / n_total) * np.asarray(g, dtype=float)
    return out


# -- rounds ---------------------------------------------------------------------


def _unit_loss(space: ThetaSpace, loss: LossFn) -> LossFn:
    return lambda u, client: loss(space.to_theta(u), client)


def run_round(u, clients: Sequence[ClientState], cfg: FLConfig, rng: RngStream,
              round_index: int = 0, space: ThetaSpace | None = None,
              loss: LossFn | None = None, ledger: PrivacyLedger | None = None
              ) -> tuple[FLRoundState, PrivacyLedger]:
    """One FedAvg round starting from normalized coordinates ``u``."""
    if not clients:
        raise InvalidParams("at least one client is required")
    u = np.asarray(u, dtype=float)
    space = space or ThetaSpace.identity(u.size)
    f = _unit_loss(space, loss or discrepancy)
    ledger = ledger or PrivacyLedger(cfg.dp_sigma, cfg.clip_norm)

    per_client = []
    for client in sorted(clients, key=lambda c: c.client_id):
        delta = _checked(f(u, client), f"client {client.client_id}")
        g = local_gradient(u, client, cfg.fd_step, f)
        noised = dp_noise(g, cfg.clip_norm, cfg.dp_sigma,
                          rng.child("dp", round_index, client.client_id))
        per_client.append(ClientContribution(client.client_id, client.n_cl, delta, g, noised))

    n_total = sum(c.n_cl for c in per_client)
    agg = fedavg([(c.n_cl, c.noised_gradient) for c in per_client], n_total)
    step = u - cfg.learning_rate * agg
    state = FLRoundState(round_index, u, tuple(per_client), agg, step,
                         space.project_unit(step), cfg.learning_rate)
    return state, ledger.bump()


@dataclass(frozen=True)
class CalibrationResult:
    theta_final: np.ndarray
    history: tuple[FLRoundState, ...]
    ledger: PrivacyLedger
    space: ThetaSpace = field(repr=False, default=None)
    final_mean_delta: float | None = None

    def __iter__(self):
        # allows ``theta, history = calibrate(...)``
        return iter((self.theta_final, self.history))

    def theta_trace(self) -> np.ndarray:
        """Physical theta before round 0 and after every round."""
        if not self.history:
            return self.theta_final[None, :]
        units = [self.history[0].theta] + [r.theta_next for r in self.history]
        return np.array([self.space.to_theta(x) for x in units])


def calibrate(theta0, clients: Sequence[ClientState], cfg: FLConfig, rng: RngStream,
              space: ThetaSpace | None = None, loss: LossFn | None = None,
              evaluate_final: bool = False) -> CalibrationResult:
    """Run ``cfg.n_rounds`` rounds from physical ``theta0``; returns physical theta."""
    theta0 = np.asarray(theta0, dtype=float)
    space = space or ThetaSpace.identity(theta0.size)
    u = space.to_unit(theta0)
    ledger = PrivacyLedger(cfg.dp_sigma, cfg.clip_norm)
    history = []
    for r in range(cfg.n_rounds):
        state, ledger = run_round(u, clients, cfg, rng, r, space, loss, ledger)
        history.append(state)
        u = state.theta_next
    theta_final = space.to_theta(u) if history else theta0.copy()
    final_delta = None
    if evaluate_final:
        f = loss or discrepancy
        final_delta = float(np.mean([f(theta_final, c) for c in clients]))
    return CalibrationResult(theta_final, tuple(history), ledger, space, final_delta)


def calibrate_params(theta0: SimulationParams, clients: Sequence[ClientState], cfg: FLConfig,
                     rng: RngStream, evaluate_final: bool = False
                     ) -> tuple[SimulationParams, CalibrationResult]:
    """Calibrate the ``cfg.calibrated`` coordinates of a SimulationParams."""
    space = ThetaSpace.for_params(theta0, cfg.calibrated)
    loss = lambda theta, client: discrepancy(space.full(theta), client)  # noqa: E731
    result = calibrate(space.select(to_vector(theta0)), clients, cfg, rng, space, loss,
                       evaluate_final)
    return from_vector(theta0, space.full(result.theta_final)), result


# -- exports ----------------------------------------------------------------------


def write_history(result: CalibrationResult, path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for state in result.history:
            fh.write(canonical.dumps(state.summary(result.space)) + "\n")
    return path


def read_history(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def write_theta_trace(result: CalibrationResult, path) -> Path:
    path = Path(path)
    names = list(result.space.names) if result.space is not None else []
    trace = result.theta_trace()
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round"] + (names or [f"theta_{i}" for i in range(trace.shape[1])]))
        for r, row in enumerate(trace):
            w.writerow([r] + [repr(float(x)) for x in row])
    return path

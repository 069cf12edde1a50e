"""Independence-test graph and backdoor-adjusted bias scoring.

The graph is a depth-limited PC skeleton: an edge survives when the
marginal G-test rejects independence and no single other variable makes the
pair conditionally independent.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .. import canonical
from ..datagen.dataset import SCHEMA, Dataset
from ..errors import EmptyStratum, TooFewSamples
from ..numerics import RngStream

MIN_SAMPLES = 200
DEFAULT_BINS = 4
GRAPH_VARIABLES = tuple(name for name, _, kind in SCHEMA
                        if kind in ("numeric", "categorical", "flag"))


@dataclass(frozen=True)
class CausalGraph:
    vertices: tuple[str, ...]
    # (u, v, G statistic, p-value) of the marginal test for each kept edge
    edges: tuple[tuple[str, str, float, float], ...] = ()

    def __post_init__(self):
        names = set(self.vertices)
        for u, v, _, _ in self.edges:
            if u == v:
                raise ValueError(f"self-loop on {u}")
            if u not in names or v not in names:
                raise ValueError(f"edge ({u}, {v}) references an unknown vertex")

    def has_edge(self, u: str, v: str) -> bool:
        return any({u, v} == {a, b} for a, b, _, _ in self.edges)

    def neighbors(self, u: str) -> set[str]:
        return {b if a == u else a for a, b, _, _ in self.edges if u in (a, b)}

    def to_dict(self) -> dict:
        return {
            "vertices": list(self.vertices),
            "edges": [{"u": u, "v": v, "g_stat": s, "p_value": p} for u, v, s, p in self.edges],
        }


def discretize(values, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Integer codes; equal-frequency bins for continuous values."""
    v = np.asarray(values)
    uniq = np.unique(v)
    if uniq.size <= bins:
        return np.searchsorted(uniq, v).astype(np.int64)
    edges = np.quantile(v.astype(float), np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, v.astype(float), side="right").astype(np.int64)


def _g_stat(x: np.ndarray, y: np.ndarray) -> tuple[float, int]:
    nx, ny = x.max() + 1, y.max() + 1
    obs = np.bincount(x * ny + y, minlength=nx * ny).reshape(nx, ny).astype(float)
    rows = obs.sum(axis=1)
    cols = obs.sum(axis=0)
    n = obs.sum()
    if n == 0:
        return 0.0, 0
    exp = np.outer(rows, cols) / n
    mask = obs > 0
    g = 2.0 * float(np.sum(obs[mask] * np.log(obs[mask] / exp[mask])))
    dof = (int((rows > 0).sum()) - 1) * (int((cols > 0).sum()) - 1)
    return max(g, 0.0), max(dof, 0)


def g_test(x, y, z=None) -> tuple[float, float]:
    """Likelihood-ratio test of X independent of Y (given Z); returns (G, p)."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if z is None:
        g, dof = _g_stat(x, y)
    else:
        z = np.asarray(z, dtype=np.int64)
        g, dof = 0.0, 0
        for level in np.unique(z):
            m = z == level
            gi, di = _g_stat(x[m], y[m])
            g += gi
            dof += di
    p = 1.0 if dof == 0 else float(chi2.sf(g, dof))
    return g, p


def skeleton(table: dict[str, np.ndarray], alpha: float, bins: int = DEFAULT_BINS) -> CausalGraph:
    """Order-<=1 PC skeleton over the columns of ``table``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    names = tuple(table)
    n = len(next(iter(table.values()))) if names else 0
    if n < MIN_SAMPLES:
        raise TooFewSamples(f"graph discovery needs >= {MIN_SAMPLES} samples, got {n}")
    codes = {k: discretize(v, bins) for k, v in table.items()}
    edges = []
    for u, v in itertools.combinations(names, 2):
        g, p = g_test(codes[u], codes[v])
        if p > alpha:
            continue
        separated = any(
            g_test(codes[u], codes[v], codes[w])[1] > alpha for w in names if w not in (u, v)
        )
        if not separated:
            edges.append((u, v, g, p))
    return CausalGraph(names, tuple(edges))


def discover_graph(d: Dataset, alpha: float = 0.01, variables=GRAPH_VARIABLES,
                   bins: int = DEFAULT_BINS) -> CausalGraph:
    return skeleton({v: np.asarray(d[v]) for v in variables}, alpha, bins)


def backdoor_score(x, y, z=None) -> float:
    """|P(Y=1 | X=1) - sum_z P(Y=1 | X=1, Z=z) P(Z=z)| from binary X, Y and coded Z."""
    x = np.asarray(x).astype(bool)
    y = np.asarray(y).astype(float)
    if not x.any():
        raise EmptyStratum(1, None)
    observational = y[x].mean()
    if z is None:
        return 0.0
    z = np.asarray(z, dtype=np.int64)
    levels, z_idx = np.unique(z, return_inverse=True)
    pz = np.bincount(z_idx, minlength=levels.size) / z.size
    n_x1 = np.bincount(z_idx[x], minlength=levels.size)
    if np.any(n_x1 == 0):
        raise EmptyStratum(1, int(levels[np.argmax(n_x1 == 0)]))
    y_x1 = np.bincount(z_idx[x], weights=y[x], minlength=levels.size)
    interventional = float(np.sum(y_x1 / n_x1 * pz))
    return abs(float(observational) - interventional)


def joint_code(d: Dataset, names, bins: int = DEFAULT_BINS) -> np.ndarray | None:
    if not names:
        return None
    code = np.zeros(len(d), dtype=np.int64)
    for name in names:
        c = discretize(d[name], bins)
        code = code * (int(c.max()) + 1) + c
    return code


def causal_score(d: Dataset, x: str = "group", y: str = "label",
                 z=("is_anomalous",), bins: int = DEFAULT_BINS) -> float:
    return backdoor_score(np.asarray(d[x]) == 1, np.asarray(d[y]) == 1, joint_code(d, z, bins))


PERMUTATION_SCHEMES = ("circular", "iid")


class _CircularShifter:
    """Permutes a per-sample column by rotating each user's series in time.

    Keeps each user's run lengths (e.g. time spent inside the urban disc)
    intact while breaking alignment with time-localized events such as
    surges, which an i.i.d. shuffle would understate.
    """

    def __init__(self, d: Dataset):
        order = np.lexsort((np.asarray(d["window"]), np.asarray(d["user_id"])))
        users = np.asarray(d["user_id"])[order]
        starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
        lengths = np.diff(np.r_[starts, users.size])
        self.order = order
        self.start = np.repeat(starts, lengths)
        self.length = np.repeat(lengths, lengths)
        self.rank = np.arange(users.size) - self.start
        self.n_users = starts.size
        self.lengths = lengths

    def __call__(self, values: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        shift = np.floor(gen.uniform(0.0, 1.0, self.n_users) * self.lengths).astype(np.int64)
        src = self.start + (self.rank + np.repeat(shift, self.lengths)) % self.length
        out = np.empty_like(values)
        out[self.order] = values[self.order][src]
        return out


def null_scores(d: Dataset, x: str = "group", y: str = "label", z=("is_anomalous",),
                n_resamples: int = 200, rng: RngStream | None = None,
                bins: int = DEFAULT_BINS, scheme: str = "circular") -> np.ndarray:
    if scheme not in PERMUTATION_SCHEMES:
        raise ValueError(f"unknown permutation scheme {scheme!r}")
    rng = rng or RngStream(0, "bootstrap")
    xv = np.asarray(d[x]) == 1
    yv = np.asarray(d[y]) == 1
    zv = joint_code(d, z, bins)
    if scheme == "iid":
        permute = lambda v, gen: gen.permutation(v)  # noqa: E731
    else:
        permute = _CircularShifter(d)
    return np.array([backdoor_score(permute(xv, rng.gen), yv, zv) for _ in range(n_resamples)])


def bootstrap_threshold(d: Dataset, x: str = "group", y: str = "label", z=("is_anomalous",),
                        n_resamples: int = 200, quantile: float = 0.95,
                        rng: RngStream | None = None, bins: int = DEFAULT_BINS,
                        scheme: str = "circular") -> float:
    """Quantile of the score under a null where X carries no link to Y or Z."""
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    if not 0.0 < quantile <= 1.0:
        raise ValueError("quantile must lie in (0, 1]")
    scores = null_scores(d, x, y, z, n_resamples, rng, bins, scheme)
    return float(np.quantile(scores, quantile, method="higher"))


@dataclass(frozen=True)
class BiasScore:
    x: str
    y: str
    z: tuple[str, ...]
    score: float
    threshold: float

    @property
    def flagged(self) -> bool:
        return self.score > self.threshold

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "z": list(self.z), "score": self.score,
                "threshold": self.threshold, "flagged": self.flagged}


@dataclass(frozen=True)
class BiasReport:
    scores: tuple[BiasScore, ...] = ()
    graph: CausalGraph = field(default_factory=lambda: CausalGraph(()))
    n_resamples: int = 0
    quantile: float = 0.0
    base_digest: str = ""

    @property
    def flagged(self) -> bool:
        return any(s.flagged for s in self.scores)

    def to_dict(self) -> dict:
        return {
            "scores": [s.to_dict() for s in self.scores],
            "graph": self.graph.to_dict(),
            "bootstrap": {"n_resamples": self.n_resamples, "quantile": self.quantile},
            "base_digest": self.base_digest,
        }

    def to_json(self) -> str:
        return canonical.dumps(self.to_dict())

    def digest(self) -> str:
        return canonical.digest(self.to_dict())

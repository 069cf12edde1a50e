"""Adversarial test suites: perturbed copies of a sampled subset."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import canonical
from ..datagen.dataset import NUMERIC_FEATURES, Dataset
from ..errors import EmptyDataset, UnknownFeature
from ..numerics import RngStream

REGULATORY_TARGETS = ("fairness", "robustness", "shift")
DISTRIBUTIONS = ("gaussian", "uniform")


@dataclass(frozen=True)
class PerturbationSpec:
    distribution: str = "gaussian"
    eta: float = 0.5
    target_features: tuple[str, ...] = ("traffic_load_pps", "snr_db")
    sample_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "target_features", tuple(self.target_features))
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "distribution": self.distribution,
            "eta": self.eta,
            "target_features": list(self.target_features),
            "sample_fraction": self.sample_fraction,
        }


@dataclass(frozen=True, eq=False)
class TestSuite:
    __test__ = False  # not a pytest class

    regulatory_target: str
    originals: np.ndarray  # sample ids in the base dataset
    perturbed: Dataset     # same sample ids, perturbed features
    spec: PerturbationSpec
    base_digest: str

    def __len__(self) -> int:
        return int(self.originals.size)

    def digest(self) -> str:
        return canonical.digest({
            "target": self.regulatory_target,
            "originals": self.originals.tolist(),
            "perturbed": self.perturbed.digest(),
            "spec": self.spec.to_dict(),
            "base_digest": self.base_digest,
        })


def build_suite(d: Dataset, target: str, spec: PerturbationSpec, rng: RngStream) -> TestSuite:
    if target not in REGULATORY_TARGETS:
        raise ValueError(f"unknown regulatory target {target!r}")
    unknown = [f for f in spec.target_features if f not in NUMERIC_FEATURES]
    if unknown:
        raise UnknownFeature(f"not numeric schema features: {unknown}")
    n = len(d)
    if n == 0:
        raise EmptyDataset("cannot build a suite from an empty dataset")
    m = math.ceil(spec.sample_fraction * n - 1e-9)
    idx = np.sort(rng.gen.choice(n, size=m, replace=False))

    shape = (m, len(spec.target_features))
    if spec.distribution == "gaussian":
        noise = rng.gen.standard_normal(shape) * spec.eta
    else:
        noise = rng.gen.uniform(-1.0, 1.0, shape) * spec.eta

    subset = d.take(idx)
    if spec.eta == 0:
        perturbed = subset
    else:
        new = {f: subset[f] + noise[:, j] for j, f in enumerate(spec.target_features)}
        perturbed = subset.replace_columns(**new)
    perturbed = perturbed.with_metadata(
        provenance_log=list(d.metadata.get("provenance_log", []))
        + [{"event": "adversarial_suite", "target": target, "spec": spec.to_dict()}]
    )
    return TestSuite(target, subset["sample_id"].copy(), perturbed, spec, d.digest())

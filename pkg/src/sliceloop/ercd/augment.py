"""Assemble the augmented dataset: base data plus suites, bias report and trail."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import canonical
from ..datagen.dataset import Dataset
from ..numerics import RngStream
from .causal import BiasReport, BiasScore, bootstrap_threshold, causal_score, discover_graph
from .fairness import fairness_resample
from .suites import PerturbationSpec, TestSuite, build_suite
from .trail import DEFAULT_MAPPINGS, AuditTrail, Metric, build_trail


@dataclass(frozen=True)
class BiasConfig:
    enabled: bool = True
    x: str = "group"
    y: str = "label"
    z: tuple[str, ...] = ("is_anomalous",)
    alpha: float = 0.01
    n_resamples: int = 200
    quantile: float = 0.95
    null_scheme: str = "circular"

    def __post_init__(self):
        object.__setattr__(self, "z", tuple(self.z))


def _default_suites() -> tuple[tuple[str, PerturbationSpec], ...]:
    return (
        ("fairness", PerturbationSpec("gaussian", 25.0, ("pos_x_m", "pos_y_m"), 0.2)),
        ("robustness", PerturbationSpec("gaussian", 0.5, ("traffic_load_pps", "snr_db"), 0.2)),
    )


@dataclass(frozen=True)
class ErcdConfig:
    suites: tuple[tuple[str, PerturbationSpec], ...] = field(default_factory=_default_suites)
    fairness_resample: bool = True
    bias: BiasConfig = field(default_factory=BiasConfig)
    mappings: tuple[tuple[str, str], ...] = DEFAULT_MAPPINGS
    balance_min_ratio: float = 0.8

    @classmethod
    def disabled(cls) -> "ErcdConfig":
        return cls(suites=(), fairness_resample=False, bias=BiasConfig(enabled=False),
                   mappings=(("dataset-inventory", "n_samples"),))

    @classmethod
    def from_dict(cls, d: dict) -> "ErcdConfig":
        d = dict(d)
        suites = tuple(
            (s["target"], PerturbationSpec(s.get("distribution", "gaussian"), s["eta"],
                                           tuple(s["target_features"]), s["sample_fraction"]))
            for s in d.pop("suites", [])
        ) if "suites" in d else _default_suites()
        bias = BiasConfig(**d.pop("bias", {}))
        mappings = tuple(tuple(m) for m in d.pop("mappings", DEFAULT_MAPPINGS))
        return cls(suites=suites, bias=bias, mappings=mappings, **d)

    def to_dict(self) -> dict:
        return {
            "suites": [{"target": t, **s.to_dict()} for t, s in self.suites],
            "fairness_resample": self.fairness_resample,
            "bias": {"enabled": self.bias.enabled, "x": self.bias.x, "y": self.bias.y,
                     "z": list(self.bias.z), "alpha": self.bias.alpha,
                     "n_resamples": self.bias.n_resamples, "quantile": self.bias.quantile,
                     "null_scheme": self.bias.null_scheme},
            "mappings": [list(m) for m in self.mappings],
            "balance_min_ratio": self.balance_min_ratio,
        }


@dataclass(frozen=True, eq=False)
class AugmentedDataset:
    base: Dataset
    suites: tuple[TestSuite, ...]
    bias: BiasReport
    trail: AuditTrail
    balanced: Dataset | None = None
    metrics: dict = field(default_factory=dict)

    @property
    def training_view(self) -> Dataset:
        return self.balanced if self.balanced is not None else self.base

    def suite(self, target: str) -> TestSuite | None:
        return next((s for s in self.suites if s.regulatory_target == target), None)

    def manifest(self) -> dict:
        return {
            "base": self.base.digest(),
            "suites": {s.regulatory_target: s.digest() for s in self.suites},
            "bias": self.bias.digest(),
            "trail": self.trail.digest(),
            "balanced": self.balanced.digest() if self.balanced is not None else None,
        }

    def digest(self) -> str:
        return canonical.digest(self.manifest())

    def serialize(self) -> bytes:
        """Canonical byte form used for sealing and sharing."""
        def table(ds: Dataset) -> dict:
            return {"columns": {k: v.tolist() for k, v in ds.columns.items()},
                    "metadata": {k: v for k, v in ds.metadata.items() if k != "created_at"}}

        return canonical.dump_bytes({
            "manifest": self.manifest(),
            "base": table(self.base),
            "suites": [{"target": s.regulatory_target, "originals": s.originals.tolist(),
                        "spec": s.spec.to_dict(), "perturbed": table(s.perturbed)}
                       for s in self.suites],
            "bias": self.bias.to_dict(),
            "trail": self.trail.content(),
        })


def group_balance_ratio(d: Dataset) -> float:
    counts = np.bincount(np.asarray(d["group"], dtype=np.int64), minlength=2)
    return float(counts.min() / counts.max()) if counts.max() else 0.0


def augment(d: Dataset, config: ErcdConfig, rng: RngStream, created_at: str = "") -> AugmentedDataset:
    base_digest = d.digest()
    suites = tuple(
        build_suite(d, target, spec, rng.child("suite", target)) for target, spec in config.suites
    )
    balanced = fairness_resample(d, rng.child("fairness")) if config.fairness_resample else None

    metrics: dict[str, Metric] = {"n_samples": Metric(float(len(d)))}
    for s in suites:
        metrics[f"suite_size_{s.regulatory_target}"] = Metric(float(len(s)))
    view = balanced if balanced is not None else d
    metrics["group_balance_ratio"] = Metric(group_balance_ratio(view), config.balance_min_ratio,
                                            lower_is_better=False)

    bc = config.bias
    if bc.enabled:
        graph = discover_graph(d, bc.alpha)
        score = causal_score(d, bc.x, bc.y, bc.z)
        threshold = bootstrap_threshold(d, bc.x, bc.y, bc.z, bc.n_resamples, bc.quantile,
                                        rng.child("bootstrap"), scheme=bc.null_scheme)
        bias = BiasReport((BiasScore(bc.x, bc.y, bc.z, score, threshold),), graph,
                          bc.n_resamples, bc.quantile, base_digest)
        metrics[f"causal_score_{bc.x}_{bc.y}"] = Metric(score, threshold)
        metrics[f"bias_threshold_{bc.x}_{bc.y}"] = Metric(threshold)
    else:
        bias = BiasReport(base_digest=base_digest)

    trail = build_trail(metrics, config.mappings, base_digest, created_at)
    return AugmentedDataset(d, suites, bias, trail, balanced, metrics)


def extend_trail(dprime: AugmentedDataset, extra: dict[str, Metric], mappings,
                 created_at: str = "") -> AuditTrail:
    """Rebuild the trail once validation metrics (FID, EO, ...) exist."""
    metrics = {**dprime.metrics, **extra}
    return build_trail(metrics, mappings, dprime.base.digest(), created_at)

"""Compliance-by-design augmentation: suites, fairness, bias scoring, audit trails."""

from .augment import AugmentedDataset, BiasConfig, ErcdConfig, augment, extend_trail
from .causal import (
    BiasReport,
    BiasScore,
    CausalGraph,
    backdoor_score,
    bootstrap_threshold,
    causal_score,
    discover_graph,
    g_test,
    skeleton,
)
from .fairness import fairness_resample
from .suites import PerturbationSpec, TestSuite, build_suite
from .trail import AuditTrail, Metric, TrailEntry, build_trail

__all__ = [
    "AugmentedDataset", "AuditTrail", "BiasConfig", "BiasReport", "BiasScore", "CausalGraph",
    "ErcdConfig", "Metric", "PerturbationSpec", "TestSuite", "TrailEntry", "augment",
    "backdoor_score", "bootstrap_threshold", "build_suite", "build_trail", "causal_score",
    "discover_graph", "extend_trail", "fairness_resample", "g_test", "skeleton",
]

"""Synthetic network-slice data generation."""

from .channel import channel_snr, fspl_db
from .dataset import (
    NUMERIC_FEATURES,
    SCHEMA,
    Dataset,
    Sample,
    read_jsonl,
    write_jsonl,
)
from .generator import MODEL_REGISTRY, generate, inject_anomaly
from .mobility import random_waypoint
from .params import (
    AnomalySpec,
    ChannelParams,
    Harmonic,
    LabelRuleParams,
    MobilityParams,
    SimulationParams,
    TrafficParams,
    from_vector,
    project,
    theta_bounds,
    theta_names,
    to_vector,
)
from .traffic import rate_at, sample_arrivals

__all__ = [
    "AnomalySpec", "ChannelParams", "Dataset", "Harmonic", "LabelRuleParams",
    "MODEL_REGISTRY", "MobilityParams", "NUMERIC_FEATURES", "SCHEMA", "Sample",
    "SimulationParams", "TrafficParams", "channel_snr", "from_vector", "fspl_db",
    "generate", "inject_anomaly", "project", "random_waypoint", "rate_at",
    "read_jsonl", "sample_arrivals", "theta_bounds", "theta_names", "to_vector",
    "write_jsonl",
]

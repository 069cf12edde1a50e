"""Regulatory audit trail: clause -> metric mapping with verdicts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .. import canonical
from ..errors import UnresolvableMetric

VERDICTS = ("pass", "fail", "info")

# Example catalog; deployments supply their own mapping file.
DEFAULT_MAPPINGS = (
    ("EU-AI-Act-Art-10", "causal_score_group_label"),
    ("EU-AI-Act-Art-15", "suite_size_robustness"),
    ("NIST-AI-RMF-MEASURE-2.11", "group_balance_ratio"),
)


@dataclass(frozen=True)
class Metric:
    """A computed value, optionally with a gate (value > threshold fails)."""

    value: float
    threshold: float | None = None
    lower_is_better: bool = True

    @property
    def verdict(self) -> str:
        if self.threshold is None:
            return "info"
        ok = self.value <= self.threshold if self.lower_is_better else self.value >= self.threshold
        return "pass" if ok else "fail"


@dataclass(frozen=True)
class TrailEntry:
    clause_id: str
    metric_name: str
    metric_value: float
    verdict: str

    def to_dict(self) -> dict:
        return {"clause_id": self.clause_id, "metric_name": self.metric_name,
                "metric_value": float(self.metric_value), "verdict": self.verdict}


@dataclass(frozen=True)
class AuditTrail:
    entries: tuple[TrailEntry, ...]
    dataset_digest: str
    created_at: str = ""

    def content(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries],
                "dataset_digest": self.dataset_digest}

    def to_json(self) -> str:
        return canonical.dumps({**self.content(), "created_at": self.created_at})

    def digest(self) -> str:
        return canonical.digest(self.content())

    @property
    def failed(self) -> list[str]:
        return [e.clause_id for e in self.entries if e.verdict == "fail"]


def build_trail(metrics: dict[str, Metric], mappings, dataset_digest: str,
                created_at: str = "") -> AuditTrail:
    seen = set()
    entries = []
    for clause_id, metric_name in mappings:
        if clause_id in seen:
            raise ValueError(f"duplicate clause id {clause_id!r}")
        seen.add(clause_id)
        if metric_name not in metrics:
            raise UnresolvableMetric(f"metric {metric_name!r} for clause {clause_id!r} is not available")
        m = metrics[metric_name]
        entries.append(TrailEntry(clause_id, metric_name, float(m.value), m.verdict))
    entries.sort(key=lambda e: e.clause_id)
    return AuditTrail(tuple(entries), dataset_digest, created_at)


def load_mappings(path) -> list[tuple[str, str]]:
    """Read a JSON list of {"clause_id": ..., "metric": ...} objects."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return [(item["clause_id"], item["metric"]) for item in raw]

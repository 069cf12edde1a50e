"""Release checks: realism (FID), equalized odds and adversarial accuracy."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import canonical
from .datagen.dataset import NUMERIC_FEATURES, Dataset
from .errors import (
    BrokenLinkage,
    CovarianceFailure,
    EmptyCell,
    IndefiniteInput,
    NoConvergence,
    ShapeMismatch,
    TooFewSamples,
)
from .numerics import mean_cov, sqrtm_psd
from .taskmodel import TASK_FEATURES, MlpModel, argmax_decision

VERDICTS = ("pass", "recalibrate")
LEDGER_COLUMNS = ("seed", "fid", "eo_gap", "eo_score", "adv_acc", "task_acc", "verdict")


def fid_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The cross term uses the symmetric form (S1^(1/2) S2 S1^(1/2))^(1/2), which
    has the same trace and stays inside symmetric PSD arithmetic.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, float)), np.atleast_2d(np.asarray(sigma2, float))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ShapeMismatch("moment shapes do not agree")
    try:
        r1 = sqrtm_psd(s1)
        cross = r1 @ s2 @ r1
        tr_cross = float(np.trace(sqrtm_psd(0.5 * (cross + cross.T))))
    except (IndefiniteInput, NoConvergence) as exc:
        raise CovarianceFailure(str(exc)) from exc
    diff = mu1 - mu2
    value = float(diff @ diff) + float(np.trace(s1) + np.trace(s2)) - 2.0 * tr_cross
    if value < -1e-8:
        raise CovarianceFailure(f"FID evaluated to {value:.3g}")
    return max(value, 0.0)


def fid(real_features, sim_features) -> float:
    """Frechet distance between the Gaussian moments of two sample matrices."""
    a = np.asarray(real_features, dtype=float)
    b = np.asarray(sim_features, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    k = a.shape[1]
    if min(a.shape[0], b.shape[0]) < k + 1:
        raise TooFewSamples(f"need at least {k + 1} samples per side")
    mu_a, s_a = mean_cov(a)
    mu_b, s_b = mean_cov(b)
    return fid_from_moments(mu_a, s_a, mu_b, s_b)


def standardized_fid(real: Dataset, sim: Dataset, features=NUMERIC_FEATURES) -> float:
    """FID after scaling both sides by the real data's per-feature mean and std."""
    r = real.features(features)
    s = sim.features(features)
    mu = r.mean(axis=0)
    sd = r.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return fid((r - mu) / sd, (s - mu) / sd)


@dataclass(frozen=True)
class FairnessResult:
    eo_gap: float
    # rates[y][a] = P(Yhat = 1 | Y = y, A = a)
    rates: tuple[tuple[float, float], tuple[float, float]]
    counts: tuple[tuple[int, int], tuple[int, int]]

    @property
    def eo_score(self) -> float:
        return 1.0 - self.eo_gap

    @property
    def tpr_gap(self) -> float:
        return abs(self.rates[1][0] - self.rates[1][1])

    @property
    def fpr_gap(self) -> float:
        return abs(self.rates[0][0] - self.rates[0][1])

    def to_dict(self) -> dict:
        return {"eo_gap": self.eo_gap, "eo_score": self.eo_score,
                "rates": [list(r) for r in self.rates], "counts": [list(c) for c in self.counts]}

    @classmethod
    def from_dict(cls, d: dict) -> "FairnessResult":
        return cls(float(d["eo_gap"]), tuple(tuple(float(v) for v in r) for r in d["rates"]),
                   tuple(tuple(int(v) for v in c) for c in d["counts"]))


def equalized_odds(preds, labels, groups) -> FairnessResult:
    """Summed TPR and FPR gaps between the two groups."""
    p = np.asarray(preds).astype(int)
    y = np.asarray(labels).astype(int)
    a = np.asarray(groups).astype(int)
    if not p.shape == y.shape == a.shape:
        raise ShapeMismatch("preds, labels and groups must have equal length")
    rates, counts = [], []
    for yy in (0, 1):
        row_r, row_c = [], []
        for aa in (0, 1):
            m = (y == yy) & (a == aa)
            n = int(m.sum())
            if n == 0:
                raise EmptyCell(yy, aa)
            row_r.append(float(p[m].mean()))
            row_c.append(n)
        rates.append(tuple(row_r))
        counts.append(tuple(row_c))
    gap = abs(rates[1][0] - rates[1][1]) + abs(rates[0][0] - rates[0][1])
    return FairnessResult(gap, tuple(rates), tuple(counts))


def _predict(model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, MlpModel):
        return model.predict(x)
    if hasattr(model, "predict_proba"):
        return argmax_decision(np.asarray(model.predict_proba(x)))
    return np.asarray(model(x)).astype(int)


def adversarial_accuracy(model, suite, originals: Dataset, features=TASK_FEATURES) -> float:
    """Share of suite pairs whose predicted class survives the perturbation."""
    if len(suite) == 0:
        raise BrokenLinkage("suite is empty")
    ids = np.asarray(originals["sample_id"])
    order = np.argsort(ids, kind="stable")
    pos = np.minimum(np.searchsorted(ids[order], suite.originals), ids.size - 1)
    found = ids[order][pos] == suite.originals
    if not np.all(found):
        missing = suite.originals[~found][:5].tolist()
        raise BrokenLinkage(f"suite references sample ids absent from the originals: {missing}")
    if not np.array_equal(np.asarray(suite.perturbed["sample_id"]), suite.originals):
        raise BrokenLinkage("perturbed rows do not line up with their originals")
    features = getattr(model, "features", features)
    base = originals.take(order[pos]).features(features)
    moved = suite.perturbed.features(features)
    return float(np.mean(_predict(model, base) == _predict(model, moved)))


@dataclass(frozen=True)
class Thresholds:
    fid_max: float = 0.1
    eo_gap_max: float = 0.05

    def to_dict(self) -> dict:
        return {"fid_max": _jsonable(self.fid_max), "eo_gap_max": _jsonable(self.eo_gap_max)}

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        return cls(float(d.get("fid_max", 0.1)), float(d.get("eo_gap_max", 0.05)))


def _jsonable(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


@dataclass(frozen=True)
class ValidationReport:
    fid: float
    fairness: FairnessResult
    adv_acc: float | None
    task_acc: float
    thresholds: Thresholds
    input_digests: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = ()

    @property
    def verdict(self) -> str:
        ok = self.fid < self.thresholds.fid_max and self.fairness.eo_gap < self.thresholds.eo_gap_max
        return "pass" if ok else "recalibrate"

    def to_dict(self) -> dict:
        return {
            "fid": self.fid,
            "fairness": self.fairness.to_dict(),
            "adv_acc": self.adv_acc,
            "task_acc": self.task_acc,
            "thresholds": self.thresholds.to_dict(),
            "verdict": self.verdict,
            "input_digests": dict(self.input_digests),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValidationReport":
        adv = d.get("adv_acc")
        return cls(float(d["fid"]), FairnessResult.from_dict(d["fairness"]),
                   None if adv is None else float(adv), float(d["task_acc"]),
                   Thresholds.from_dict(d.get("thresholds", {})), dict(d.get("input_digests", {})),
                   tuple(int(x) for x in d.get("seeds", ())))

    def to_json(self) -> str:
        return canonical.dumps(self.to_dict())

    def digest(self) -> str:
        return canonical.digest(self.to_dict())

    def ledger_row(self) -> dict:
        return {"seed": self.seeds[0] if self.seeds else "", "fid": self.fid,
                "eo_gap": self.fairness.eo_gap, "eo_score": self.fairness.eo_score,
                "adv_acc": "" if self.adv_acc is None else self.adv_acc,
                "task_acc": self.task_acc, "verdict": self.verdict}


def append_ledger(report: ValidationReport, path) -> Path:
    """Append one CSV row per report; writes the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LEDGER_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        row = report.ledger_row()
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_ledger(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def validate(dprime, real_emulated: Dataset, model, thresholds: Thresholds,
             test: Dataset | None = None, seeds=(), features=NUMERIC_FEATURES,
             suite_target: str = "robustness") -> ValidationReport:
    """Score an augmented dataset against emulated real observations.

    FID compares ``real_emulated`` with the un-resampled synthetic base. The
    task model's accuracy and equalized odds are measured on ``test``, which
    defaults to the synthetic base when no held-out set is supplied.
    """
    sim = dprime.base
    score = standardized_fid(real_emulated, sim, features)
    evaluation = test if test is not None else sim
    preds = _predict(model, evaluation.features(getattr(model, "features", TASK_FEATURES)))
    labels = np.asarray(evaluation["label"])
    fairness = equalized_odds(preds, labels, evaluation["group"])
    task_acc = float(np.mean(preds == labels))

    suite = dprime.suite(suite_target) or (dprime.suites[0] if dprime.suites else None)
    adv = adversarial_accuracy(model, suite, sim) if suite is not None else None

    digests = {"dprime": dprime.digest(), "real": real_emulated.digest()}
    if test is not None:
        digests["test"] = test.digest()
    if isinstance(model, MlpModel):
        digests["model"] = model.digest()
    return ValidationReport(score, fairness, adv, task_acc, thresholds, digests,
                            tuple(int(s) for s in seeds))

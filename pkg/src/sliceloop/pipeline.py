"""Closed-loop orchestration: generate, augment, calibrate, validate, govern.

Every stage is a function of (config, master seed, loop iteration), so running
the stages one at a time from the command line reproduces the monolithic
loop. Artifacts for one seed live in their own directory next to a
``manifest.json`` of content digests; a stage refuses to consume an artifact
whose digest no longer matches.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import canonical
from .auditval import (
    Thresholds,
    ValidationReport,
    append_ledger,
    read_ledger,
    standardized_fid,
    validate,
)
from .datagen.dataset import Dataset, now_iso, read_jsonl, write_jsonl
from .datagen.generator import generate
from .datagen.params import SimulationParams
from .ercd.augment import AugmentedDataset, ErcdConfig, augment
from .errors import ConfigError, DigestMismatch, SliceLoopError, StageFailed
from .fedcal import (
    CalibrationResult,
    FLConfig,
    calibrate_params,
    emulate_real,
    partition_clients,
    write_history,
    write_theta_trace,
)
from .governance import LifecycleRecord, transition
from .numerics import RngStream
from .taskmodel import DEFAULT_GRID, MlpModel, TrainConfig, grid_search

CONFIG_SCHEMA_VERSION = 1
ACTOR = "sliceloop"

_TOP_KEYS = {"schema_version", "theta", "theta_star", "n_samples", "n_test_samples", "ercd",
             "fl", "train", "thresholds", "max_loop_iterations", "n_seeds", "output_dir"}
_TRAIN_KEYS = {"max_epochs", "patience", "val_fraction", "grid"}


@dataclass(frozen=True)
class TrainSettings:
    max_epochs: int = 100
    patience: int = 3
    val_fraction: float = 0.2
    grid: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GRID.items()})

    def base_config(self, seed: int) -> TrainConfig:
        return TrainConfig(max_epochs=self.max_epochs, patience=self.patience, seed=seed,
                           val_fraction=self.val_fraction)

    def to_dict(self) -> dict:
        return {"max_epochs": self.max_epochs, "patience": self.patience,
                "val_fraction": self.val_fraction,
                "grid": {k: list(v) for k, v in self.grid.items()}}


@dataclass(frozen=True)
class RunConfig:
    theta: SimulationParams = field(default_factory=SimulationParams)
    # parameters the emulated real observations are generated under
    theta_star: SimulationParams | None = None
    n_samples: int = 10_000
    n_test_samples: int = 10_000
    ercd: ErcdConfig = field(default_factory=ErcdConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    thresholds: Thresholds = field(default_factory=Thresholds)
    max_loop_iterations: int = 3
    n_seeds: int = 5
    output_dir: str = "runs"

    def __post_init__(self):
        if self.max_loop_iterations < 1:
            raise ConfigError("max_loop_iterations must be >= 1")
        if self.n_seeds < 1 or self.n_samples < 1 or self.n_test_samples < 1:
            raise ConfigError("n_seeds, n_samples and n_test_samples must be >= 1")

    @property
    def real_theta(self) -> SimulationParams:
        return self.theta_star or self.theta

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "theta": self.theta.to_dict(),
            "theta_star": None if self.theta_star is None else self.theta_star.to_dict(),
            "n_samples": self.n_samples,
            "n_test_samples": self.n_test_samples,
            "ercd": self.ercd.to_dict(),
            "fl": self.fl.to_dict(),
            "train": self.train.to_dict(),
            "thresholds": self.thresholds.to_dict(),
            "max_loop_iterations": self.max_loop_iterations,
            "n_seeds": self.n_seeds,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if d.get("schema_version") != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {CONFIG_SCHEMA_VERSION}")
        train = d.get("train", {})
        if set(train) - _TRAIN_KEYS:
            raise ConfigError(f"unknown train keys: {sorted(set(train) - _TRAIN_KEYS)}")
        try:
            kwargs = {
                "theta": SimulationParams.from_dict(d["theta"]) if "theta" in d else SimulationParams(),
                "theta_star": (SimulationParams.from_dict(d["theta_star"])
                               if d.get("theta_star") is not None else None),
                "ercd": ErcdConfig.from_dict(d["ercd"]) if "ercd" in d else ErcdConfig(),
                "fl": FLConfig.from_dict(d["fl"]) if "fl" in d else FLConfig(),
                "train": TrainSettings(**train),
                "thresholds": Thresholds.from_dict(d.get("thresholds", {})),
            }
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, SliceLoopError):
                raise ConfigError(str(exc)) from exc
            raise ConfigError(f"invalid config: {exc}") from exc
        for key in ("n_samples", "n_test_samples", "max_loop_iterations", "n_seeds", "output_dir"):
            if key in d:
                kwargs[key] = d[key]
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def digest(self) -> str:
        return canonical.digest({k: v for k, v in self.to_dict().items() if k != "output_dir"})


# -- stages -------------------------------------------------------------------


def _root(seed: int) -> RngStream:
    return RngStream(seed)


def dgl_stream(seed: int) -> RngStream:
    """Stream shared by the synthetic data, the emulated observations and
    every regeneration, so the calibration loss compares like with like."""
    return _root(seed).child("dgl")


def stage_generate(cfg: RunConfig, seed: int, theta: SimulationParams | None = None) -> Dataset:
    return generate(theta or cfg.theta, cfg.n_samples, dgl_stream(seed), created_at="")


def stage_augment(cfg: RunConfig, seed: int, d: Dataset, iteration: int = 0) -> AugmentedDataset:
    return augment(d, cfg.ercd, _root(seed).child("ercd", iteration))


def stage_real(cfg: RunConfig, seed: int) -> Dataset:
    base = generate(cfg.real_theta, cfg.n_samples, dgl_stream(seed), created_at="")
    return emulate_real(base, cfg.fl.interference_fraction, _root(seed).child("emulate"),
                        cfg.fl.interference_db)


def stage_calibrate(cfg: RunConfig, seed: int, theta: SimulationParams, real: Dataset,
                    iteration: int = 0) -> tuple[SimulationParams, CalibrationResult]:
    clients = partition_clients(real, cfg.fl.n_clients, dgl_stream(seed), cfg.theta)
    return calibrate_params(theta, clients, cfg.fl, _root(seed).child("fl", iteration))


@dataclass(frozen=True, eq=False)
class Evaluation:
    dprime: AugmentedDataset
    model: MlpModel
    grid: list
    test: Dataset
    report: ValidationReport


def stage_validate(cfg: RunConfig, seed: int, theta: SimulationParams, real: Dataset,
                   iteration: int = 0) -> Evaluation:
    """Regenerate under the calibrated theta, rebuild D', train, and score."""
    d = stage_generate(cfg, seed, theta)
    dprime = stage_augment(cfg, seed, d, iteration + 1)
    model, table = grid_search(dprime.training_view, cfg.train.base_config(seed), cfg.train.grid)
    test = generate(theta, cfg.n_test_samples, _root(seed).child("test", iteration), created_at="")
    report = validate(dprime, real, model, cfg.thresholds, test=test, seeds=(seed,))
    return Evaluation(dprime, model, table, test, report)


# -- artifacts ------------------------------------------------------------------


def file_digest(path) -> str:
    return canonical.sha256_hex(Path(path).read_bytes())


class Workspace:
    """Per-seed artifact directory with a digest manifest."""

    def __init__(self, root, seed: int):
        self.dir = Path(root) / f"seed_{seed}"
        self.seed = seed

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {}
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def record(self, **digests) -> None:
        m = self.manifest()
        m.update(digests)
        self.manifest_path.write_text(canonical.dumps(m) + "\n", encoding="utf-8")

    def path(self, name: str) -> Path:
        return self.dir / name

    def check(self, name: str, digest: str) -> None:
        want = self.manifest().get(name)
        if want is None:
            raise DigestMismatch(f"{name} is not recorded in {self.manifest_path}")
        if want != digest:
            raise DigestMismatch(f"{name} digest {digest[:12]} does not match manifest {want[:12]}")

    def write_json(self, name: str, obj) -> str:
        p = self.path(name)
        p.write_text(canonical.dumps(obj) + "\n", encoding="utf-8")
        d = file_digest(p)
        self.record(**{name: d})
        return d

    def read_json(self, name: str):
        p = self.path(name)
        if not p.exists():
            raise DigestMismatch(f"missing artifact {p}")
        self.check(name, file_digest(p))
        return json.loads(p.read_text(encoding="utf-8"))

    def write_dataset(self, name: str, ds: Dataset) -> str:
        write_jsonl(ds, self.path(name))
        d = ds.digest()
        self.record(**{name: d})
        return d

    def read_dataset(self, name: str) -> Dataset:
        p = self.path(name)
        if not p.exists():
            raise DigestMismatch(f"missing artifact {p}")
        ds = read_jsonl(p)
        self.check(name, ds.digest())
        return ds

    def write_file(self, name: str, writer) -> str:
        writer(self.path(name))
        d = file_digest(self.path(name))
        self.record(**{name: d})
        return d

    def lifecycle(self) -> LifecycleRecord:
        p = self.path("lifecycle.jsonl")
        if not p.exists():
            return LifecycleRecord()
        self.check("lifecycle.jsonl", file_digest(p))
        return LifecycleRecord.read(p)

    def save_lifecycle(self, rec: LifecycleRecord) -> None:
        self.write_file("lifecycle.jsonl", rec.write)


def logical_time(rec: LifecycleRecord) -> str:
    """Deterministic timestamp for the next lifecycle entry (wall clock goes to run.json)."""
    return f"step-{len(rec.history):04d}"


def _advance(rec: LifecycleRecord, action: str, details: dict | None = None) -> LifecycleRecord:
    return transition(rec, action, ACTOR, logical_time(rec), details)


def write_dprime(ws: Workspace, dprime: AugmentedDataset, prefix: str) -> None:
    ws.write_dataset(f"{prefix}base.jsonl", dprime.base)
    if dprime.balanced is not None:
        ws.write_dataset(f"{prefix}balanced.jsonl", dprime.balanced)
    for s in dprime.suites:
        ws.write_dataset(f"{prefix}suite_{s.regulatory_target}.jsonl", s.perturbed)
    ws.write_json(f"{prefix}bias_report.json", dprime.bias.to_dict())
    ws.write_json(f"{prefix}audit_trail.json", dprime.trail.content())
    ws.write_json(f"{prefix}dprime_manifest.json", {**dprime.manifest(), "digest": dprime.digest()})


# -- per-stage entry points used by both run_loop and the CLI --------------------


def do_generate(cfg: RunConfig, ws: Workspace) -> Dataset:
    if ws.dir.exists():
        shutil.rmtree(ws.dir)
    ws.dir.mkdir(parents=True)
    ws.write_json("config.json", cfg.to_dict())
    d = stage_generate(cfg, ws.seed)
    ws.write_dataset("dataset.jsonl", d)
    ws.save_lifecycle(LifecycleRecord(dataset_digest=d.digest()))
    return d


def do_augment(cfg: RunConfig, ws: Workspace) -> AugmentedDataset:
    d = ws.read_dataset("dataset.jsonl")
    rec = ws.lifecycle()
    dprime = stage_augment(cfg, ws.seed, d, 0)
    write_dprime(ws, dprime, "dprime_")
    ws.save_lifecycle(_advance(rec, "ercd_complete", {"dprime": dprime.digest()}))
    return dprime


def _iterations_done(rec: LifecycleRecord) -> int:
    return sum(1 for e in rec.history if e.action == "metrics_computed")


def do_calibrate(cfg: RunConfig, ws: Workspace) -> SimulationParams:
    rec = ws.lifecycle()
    it = _iterations_done(rec)
    ws.read_json("dprime_dprime_manifest.json")
    if rec.state == "Rejected":
        if it >= cfg.max_loop_iterations:
            raise ConfigError(f"loop bound of {cfg.max_loop_iterations} iterations reached")
        theta = SimulationParams.from_dict(ws.read_json("theta.json")["theta"])
        rec = _advance(rec, "recalibrate", {"iteration": it})
    elif rec.state == "Augmented":
        theta = cfg.theta
    else:
        raise ConfigError(f"cannot calibrate from lifecycle state {rec.state}")

    if ws.path("real.jsonl").exists():
        real = ws.read_dataset("real.jsonl")
    else:
        real = stage_real(cfg, ws.seed)
        ws.write_dataset("real.jsonl", real)
        # realism of the uncalibrated generator, the reference for the FID gain
        ws.write_json("baseline.json",
                      {"fid": standardized_fid(real, ws.read_dataset("dataset.jsonl"))})
    theta_next, result = stage_calibrate(cfg, ws.seed, theta, real, it)
    ws.write_file(f"fl_history_{it}.jsonl", lambda p: write_history(result, p))
    ws.write_file(f"theta_trace_{it}.csv", lambda p: write_theta_trace(result, p))
    ws.write_json("theta.json", {"iteration": it, "theta": theta_next.to_dict(),
                                 "privacy_ledger": result.ledger.to_dict()})
    if cfg.fl.n_rounds == 0 and rec.state == "Augmented":
        # a zero-round pass still moves the record into Calibrated
        rec = _advance(rec, "fl_round_complete", {"iteration": it, "round": None})
    for state in result.history:
        rec = _advance(rec, "fl_round_complete",
                       {"iteration": it, "round": state.round, "mean_delta": state.mean_delta})
    ws.save_lifecycle(rec)
    return theta_next


def do_validate(cfg: RunConfig, ws: Workspace) -> ValidationReport:
    rec = ws.lifecycle()
    if rec.state != "Calibrated":
        raise ConfigError(f"cannot validate from lifecycle state {rec.state}")
    it = _iterations_done(rec)
    theta = SimulationParams.from_dict(ws.read_json("theta.json")["theta"])
    real = ws.read_dataset("real.jsonl")
    ev = stage_validate(cfg, ws.seed, theta, real, it)
    write_dprime(ws, ev.dprime, f"iter{it}_")
    ws.write_file(f"iter{it}_model.json", ev.model.save)
    ws.write_json(f"iter{it}_grid.json", ev.grid)
    ws.write_json(f"iter{it}_validation.json", ev.report.to_dict())
    ws.write_json("validation.json", ev.report.to_dict())
    rec = _advance(rec, "metrics_computed", {"iteration": it, "report": ev.report.digest()})
    ws.save_lifecycle(rec)
    return ev.report


def do_govern(cfg: RunConfig, ws: Workspace) -> LifecycleRecord:
    rec = ws.lifecycle()
    if rec.state != "Validated":
        raise ConfigError(f"cannot audit from lifecycle state {rec.state}")
    report = ValidationReport.from_dict(ws.read_json("validation.json"))
    action = "audit_pass" if report.verdict == "pass" else "audit_fail"
    rec = _advance(rec, action, {"verdict": report.verdict})
    ws.save_lifecycle(rec)
    # the seed's ledger carries the row of its latest audit
    ws.path("ledger.csv").unlink(missing_ok=True)
    ws.write_file("ledger.csv", lambda p: append_ledger(report, p))
    return rec


# -- the loop ---------------------------------------------------------------------


@dataclass(frozen=True)
class SeedResult:
    seed: int
    report: ValidationReport
    iterations: int
    final_state: str
    digests: dict
    baseline_fid: float = math.nan


STAGES = {"generate": do_generate, "augment": do_augment, "calibrate": do_calibrate,
          "validate": do_validate, "govern": do_govern}


def run_stage(name: str, cfg: RunConfig, ws: Workspace):
    """Run one stage, tagging library errors with the stage that raised them."""
    try:
        return STAGES[name](cfg, ws)
    except SliceLoopError as exc:
        raise StageFailed(name, exc) from exc


def run_seed(cfg: RunConfig, seed: int, out_dir) -> SeedResult:
    """One seed of the closed loop; artifacts stay on disk if a stage fails."""
    ws = Workspace(out_dir, seed)
    started = now_iso()
    run_stage("generate", cfg, ws)
    run_stage("augment", cfg, ws)
    while True:
        run_stage("calibrate", cfg, ws)
        report = run_stage("validate", cfg, ws)
        rec = run_stage("govern", cfg, ws)
        if rec.state == "Certified" or _iterations_done(rec) >= cfg.max_loop_iterations:
            break
    # wall-clock facts stay out of the manifest
    ws.path("run.json").write_text(json.dumps({"started": started, "finished": now_iso()}) + "\n",
                                   encoding="utf-8")
    baseline = ws.read_json("baseline.json")["fid"]
    return SeedResult(seed, report, _iterations_done(rec), rec.state, ws.manifest(), baseline)


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


SUMMARY_METRICS = ("fid", "eo_gap", "eo_score", "adv_acc", "task_acc")


def aggregate(rows: list[dict]) -> dict:
    out = {}
    for m in SUMMARY_METRICS:
        vals = [float(r[m]) for r in rows if r.get(m) not in (None, "")]
        mean, std = _mean_std(vals)
        out[m] = {"mean": mean, "std": std, "n": len(vals)}
    return out


@dataclass(frozen=True)
class RunSummary:
    results: tuple[SeedResult, ...]

    @property
    def reports(self) -> list[ValidationReport]:
        return [r.report for r in self.results]

    def rows(self) -> list[dict]:
        return [r.report.ledger_row() for r in self.results]

    def aggregates(self) -> dict:
        return aggregate(self.rows())

    @property
    def baseline_fids(self) -> list[float]:
        return [r.baseline_fid for r in self.results]

    def fid_reductions(self) -> list[float]:
        """Relative FID change per seed, (baseline - final) / baseline."""
        return [(r.baseline_fid - r.report.fid) / r.baseline_fid for r in self.results]

    def to_dict(self) -> dict:
        agg = self.aggregates()
        return {
            "seeds": [r.seed for r in self.results],
            "reports": [r.report.to_dict() for r in self.results],
            "iterations": {str(r.seed): r.iterations for r in self.results},
            "final_states": {str(r.seed): r.final_state for r in self.results},
            "baseline_fid": {str(r.seed): r.baseline_fid for r in self.results},
            "aggregate": {k: {kk: (vv if not (isinstance(vv, float) and math.isnan(vv)) else None)
                              for kk, vv in v.items()} for k, v in agg.items()},
        }

    @property
    def all_certified(self) -> bool:
        return all(r.final_state == "Certified" for r in self.results)


def run_loop(cfg: RunConfig, master_seed: int = 0, out_dir=None) -> RunSummary:
    """Run ``cfg.n_seeds`` independent seeds starting at ``master_seed``."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = tuple(run_seed(cfg, master_seed + i, out) for i in range(cfg.n_seeds))
    summary = RunSummary(results)
    (out / "summary.json").write_text(canonical.dumps(summary.to_dict()) + "\n", encoding="utf-8")
    ledger = out / "ledger.csv"
    ledger.unlink(missing_ok=True)
    for r in results:
        append_ledger(r.report, ledger)
    return summary


def format_table(agg: dict) -> str:
    lines = ["metric     mean +- std        n"]
    for m in SUMMARY_METRICS:
        a = agg[m]
        if a["n"] == 0:
            lines.append(f"{m:<10} {'n/a':<18} 0")
        else:
            lines.append(f"{m:<10} {a['mean']:.4f} +- {a['std']:.4f}  {a['n']}")
    return "\n".join(lines)


def report_rows(root) -> list[dict]:
    """Collect every per-seed ledger row below ``root``."""
    rows = []
    for p in sorted(Path(root).glob("seed_*/ledger.csv")):
        rows.extend(read_ledger(p))
    return rows

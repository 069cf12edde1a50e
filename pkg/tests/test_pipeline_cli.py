import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest

from sliceloop import canonical
from sliceloop.auditval import Thresholds, append_ledger, read_ledger
from sliceloop.cli import main
from sliceloop.datagen.params import SimulationParams
from sliceloop.errors import ConfigError, StageFailed
from sliceloop.fedcal import FLConfig
from sliceloop.governance import LifecycleRecord, SealedPackage, unseal, verify_chain
from sliceloop.pipeline import RunConfig, TrainSettings, Workspace, run_loop, run_stage

from test_auditval import _report

PASSING = Thresholds(math.inf, math.inf)
FAILING = Thresholds(0.0, 0.0)


def small_config(thresholds=PASSING, **kw):
    base = dict(theta=SimulationParams(n_users=20), n_samples=1500, n_test_samples=1000,
                fl=FLConfig(n_rounds=2), train=TrainSettings(max_epochs=4),
                thresholds=thresholds, max_loop_iterations=1, n_seeds=1)
    base.update(kw)
    return RunConfig(**base)


def write_config(path, cfg):
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def cli(*args):
    return main([str(a) for a in args])


def tree(root):
    """Relative path -> bytes for every file under ``root``, minus wall-clock records."""
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            rel = os.path.relpath(p, root)
            if f == "run.json" or f.endswith(".meta.json"):
                continue
            out[rel] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def certified_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("certified")
    return out, run_loop(small_config(), 3, out)


# configuration


def test_config_round_trip(tmp_path):
    theta = SimulationParams(n_users=20)
    star = replace(theta, channel=replace(theta.channel, shadowing_sigma_db=6.0))
    cfg = small_config(FAILING, theta_star=star)
    back = RunConfig.load(write_config(tmp_path / "c.json", cfg))
    assert back.to_dict() == cfg.to_dict()
    assert back.digest() == cfg.digest()
    assert replace(cfg, output_dir="elsewhere").digest() == cfg.digest()


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(surprise=1),
    lambda d: d.pop("schema_version"),
    lambda d: d["train"].update(dropout=0.5),
    lambda d: d.update(max_loop_iterations=0),
    lambda d: d["fl"].update(n_clients=0),
])
def test_config_rejects_bad_documents(mutate):
    d = small_config().to_dict()
    mutate(d)
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)


def test_dry_run_touches_nothing(tmp_path, capsys):
    cfg_path = write_config(tmp_path / "c.json", small_config())
    out = tmp_path / "out"
    assert cli("run-loop", "--config", cfg_path, "--output", out, "--dry-run") == 0
    assert "config valid" in capsys.readouterr().out
    assert not out.exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.json"]


# the loop


def test_vacuous_thresholds_certify_after_one_iteration(certified_run):
    out, summary = certified_run
    (r,) = summary.results
    assert (r.final_state, r.iterations, r.report.verdict) == ("Certified", 1, "pass")
    rec = LifecycleRecord.read(out / "seed_3" / "lifecycle.jsonl")
    assert rec.state == "Certified" and verify_chain(rec)
    assert [e.action for e in rec.history] == ["ercd_complete", "fl_round_complete",
                                               "fl_round_complete", "metrics_computed",
                                               "audit_pass"]
    assert [e.timestamp for e in rec.history] == [f"step-{i:04d}" for i in range(5)]
    assert len(read_ledger(out / "ledger.csv")) == 1
    assert json.loads((out / "summary.json").read_text())["final_states"] == {"3": "Certified"}


def test_loop_bound_one_iteration_rejected(tmp_path):
    summary = run_loop(small_config(FAILING), 0, tmp_path)
    (r,) = summary.results
    assert (r.final_state, r.iterations) == ("Rejected", 1)
    ws = tmp_path / "seed_0"
    assert sorted(p.name for p in ws.glob("fl_history_*.jsonl")) == ["fl_history_0.jsonl"]
    rec = LifecycleRecord.read(ws / "lifecycle.jsonl")
    assert not any(e.action == "recalibrate" for e in rec.history)


def test_recalibration_loop_runs_to_bound(tmp_path):
    summary = run_loop(small_config(FAILING, max_loop_iterations=2), 0, tmp_path)
    (r,) = summary.results
    assert (r.final_state, r.iterations) == ("Rejected", 2)
    rec = LifecycleRecord.read(tmp_path / "seed_0" / "lifecycle.jsonl")
    assert [e.action for e in rec.history].count("recalibrate") == 1
    theta = json.loads((tmp_path / "seed_0" / "theta.json").read_text())
    assert theta["iteration"] == 1
    # the second pass starts from the first pass's output
    trace = (tmp_path / "seed_0" / "theta_trace_1.csv").read_text().splitlines()
    first = (tmp_path / "seed_0" / "theta_trace_0.csv").read_text().splitlines()
    assert trace[1].split(",")[1:] == first[-1].split(",")[1:]


def test_stage_errors_are_attributed(tmp_path):
    ws = Workspace(tmp_path, 0)
    run_stage("generate", small_config(), ws)
    with pytest.raises(StageFailed) as err:
        run_stage("validate", small_config(), ws)
    assert err.value.stage == "validate"
    assert "validate stage failed" in str(err.value)


def test_run_loop_deterministic(certified_run, tmp_path):
    out, summary = certified_run
    again = run_loop(small_config(), 3, tmp_path)
    assert again.results[0].digests == summary.results[0].digests
    assert tree(tmp_path) == tree(out)


# the CLI


def test_staged_chain_equals_monolithic(certified_run, tmp_path, capsys):
    out, summary = certified_run
    cfg_path = write_config(tmp_path / "c.json", small_config())
    staged = tmp_path / "staged"
    for cmd in ("generate", "augment", "calibrate", "validate"):
        assert cli(cmd, "--config", cfg_path, "--seed", 3, "--output", staged) == 0
    assert cli("govern", "--config", cfg_path, "--seed", 3, "--output", staged) == 0
    assert "Certified" in capsys.readouterr().out
    assert Workspace(staged, 3).manifest() == summary.results[0].digests
    assert tree(staged / "seed_3") == tree(out / "seed_3")


def test_rejected_exit_code(tmp_path):
    cfg_path = write_config(tmp_path / "c.json", small_config(FAILING))
    assert cli("run-loop", "--config", cfg_path, "--output", tmp_path / "o") == 2


def test_mismatched_config_refused(tmp_path, capsys):
    a = write_config(tmp_path / "a.json", small_config())
    b = write_config(tmp_path / "b.json", small_config(n_samples=1600))
    assert cli("generate", "--config", a, "--output", tmp_path / "o") == 0
    assert cli("validate", "--config", b, "--output", tmp_path / "o") == 1
    assert "different configuration" in capsys.readouterr().err


def test_tampered_artifact_refused(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", small_config())
    out = tmp_path / "o"
    assert cli("generate", "--config", cfg, "--output", out) == 0
    assert cli("augment", "--config", cfg, "--output", out) == 0
    path = out / "seed_0" / "dataset.jsonl"
    lines = path.read_text().splitlines()
    row = json.loads(lines[7])
    row["snr_db"] += 1.0
    lines[7] = json.dumps(row)
    path.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert cli("calibrate", "--config", cfg, "--output", out) == 1
    assert "calibrate stage failed" in capsys.readouterr().err


def test_out_of_order_stage_is_error(tmp_path):
    cfg = write_config(tmp_path / "c.json", small_config())
    assert cli("generate", "--config", cfg, "--output", tmp_path) == 0
    assert cli("calibrate", "--config", cfg, "--output", tmp_path) == 1


def test_usage_and_missing_config_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli("no-such-command")
    assert exc.value.code == 1
    assert cli("generate", "--config", tmp_path / "missing.json", "--output", tmp_path) == 1
    assert "cannot read config" in capsys.readouterr().err


def test_report_aggregates_seed_ledgers(tmp_path, capsys):
    fids = [0.07, 0.09, 0.11, 0.08, 0.10]
    for seed, f in enumerate(fids):
        d = tmp_path / f"seed_{seed}"
        d.mkdir()
        append_ledger(_report(f, 0.04), d / "ledger.csv")
    assert cli("report", "--output", tmp_path, "--json") == 0
    agg = json.loads(capsys.readouterr().out)
    assert agg["fid"]["n"] == 5
    assert agg["fid"]["mean"] == pytest.approx(np.mean(fids))
    assert agg["fid"]["std"] == pytest.approx(np.std(fids, ddof=1))
    assert cli("report", "--output", tmp_path) == 0
    table = capsys.readouterr().out
    assert "fid        0.0900 +- 0.0158  5" in table
    assert cli("report", "--output", tmp_path / "empty") == 1


def test_govern_shares_sealed_package(certified_run, tmp_path, capsys):
    out, _ = certified_run
    cfg = write_config(tmp_path / "c.json", small_config())
    key = tmp_path / "key"
    key.write_bytes(bytes(range(32)))
    user = tmp_path / "user.json"
    user.write_text(json.dumps({"user_id": "bob", "roles": ["researcher"], "consents": []}))
    pols = tmp_path / "pol.json"
    pols.write_text(json.dumps([{"policy_id": "r", "kind": "role_required",
                                 "params": {"role": "researcher"}},
                                {"policy_id": "c", "kind": "certification_required"}]))
    import shutil
    shutil.copytree(out / "seed_3", tmp_path / "o" / "seed_3")
    pkg_path = tmp_path / "d.slpk"
    assert cli("govern", "--config", cfg, "--seed", 3, "--output", tmp_path / "o",
               "--key-file", key, "--user", user, "--policies", pols, "--package", pkg_path) == 0
    bundle = json.loads(unseal(SealedPackage.from_bytes(pkg_path.read_bytes()), key.read_bytes()))
    assert bundle["iteration"] == 0
    assert "iter0_base.jsonl" in bundle["files"]
    rec = LifecycleRecord.read(tmp_path / "o" / "seed_3" / "lifecycle.jsonl")
    assert rec.history[-1].action == "share" and rec.history[-1].actor == "bob"
    assert canonical.sha256_hex(canonical.dump_bytes(bundle)) == rec.history[-1].details[
        "plaintext_digest"]

    # a user without the role is denied and nothing is appended
    user.write_text(json.dumps({"user_id": "eve", "roles": [], "consents": []}))
    before = (tmp_path / "o" / "seed_3" / "lifecycle.jsonl").read_bytes()
    assert cli("govern", "--config", cfg, "--seed", 3, "--output", tmp_path / "o",
               "--key-file", key, "--user", user, "--policies", pols) == 1
    assert (tmp_path / "o" / "seed_3" / "lifecycle.jsonl").read_bytes() == before

"""Command-line entry point.

Exit codes: 0 when the dataset ends Certified (or a non-terminal stage
succeeds), 2 when it ends Rejected, 1 on any error. ``SLICELOOP_LOG_LEVEL``
sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import canonical
from .errors import ConfigError, DigestMismatch, SliceLoopError
from .governance import UserContext, load_policies, share
from .pipeline import (
    RunConfig,
    Workspace,
    aggregate,
    format_table,
    report_rows,
    run_loop,
    run_stage,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REJECTED = 2

log = logging.getLogger("sliceloop")


class _Parser(argparse.ArgumentParser):
    # usage errors map to the generic error code; 2 is reserved for Rejected
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, seed_help: str) -> None:
    p.add_argument("--config", type=Path, help="run configuration (JSON)")
    p.add_argument("--seed", type=int, default=0, help=seed_help)
    p.add_argument("--output", type=Path, help="output directory (overrides the config)")
    p.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sliceloop", description="Closed-loop synthetic slice data pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("generate", "generate the base dataset for one seed"),
                       ("augment", "build D' (suites, bias report, audit trail)"),
                       ("calibrate", "run federated calibration of theta"),
                       ("validate", "regenerate under theta', train and score")):
        _common(sub.add_parser(name, help=text), "seed whose artifacts to use")
    g = sub.add_parser("govern", help="apply the audit verdict; optionally seal and share D'")
    _common(g, "seed whose artifacts to use")
    g.add_argument("--key-file", type=Path, help="32-byte key; enables sharing")
    g.add_argument("--policies", type=Path, help="policy list (JSON)")
    g.add_argument("--user", type=Path, help="user context (JSON)")
    g.add_argument("--package", type=Path, help="sealed package path (default: <seed dir>/dprime.slpk)")
    _common(sub.add_parser("run-loop", help="run the full loop over all configured seeds"),
            "master seed; seeds run as seed, seed+1, ...")
    r = sub.add_parser("report", help="aggregate run ledgers into mean +- std")
    r.add_argument("--output", type=Path, required=True, help="run directory to scan")
    r.add_argument("--json", action="store_true", help="print JSON instead of a table")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.output) if args.output else Path(cfg.output_dir)


def _check_config(ws: Workspace, cfg: RunConfig) -> None:
    """Refuse to chain onto artifacts produced under a different configuration."""
    saved = ws.read_json("config.json")
    if RunConfig.from_dict(saved).digest() != cfg.digest():
        raise DigestMismatch(f"{ws.dir} was produced under a different configuration")


def _state_exit(state: str) -> int:
    return EXIT_REJECTED if state == "Rejected" else EXIT_OK


def _cmd_stage(args, cfg: RunConfig) -> int:
    ws = Workspace(_out_dir(args, cfg), args.seed)
    if args.command != "generate":
        _check_config(ws, cfg)
    if args.dry_run:
        print(f"{args.command}: config valid; would write to {ws.dir}")
        return EXIT_OK
    result = run_stage(args.command, cfg, ws)
    if args.command == "validate":
        print(result.to_json())
    elif args.command == "calibrate":
        print(canonical.dumps(result.to_dict()))
    print(f"{args.command}: seed {args.seed} -> {ws.lifecycle().state} ({ws.dir})")
    return _state_exit(ws.lifecycle().state)


def _cmd_govern(args, cfg: RunConfig) -> int:
    ws = Workspace(_out_dir(args, cfg), args.seed)
    _check_config(ws, cfg)
    if args.dry_run:
        print(f"govern: config valid; would update {ws.dir}")
        return EXIT_OK
    rec = ws.lifecycle()
    if rec.state == "Validated":
        rec = run_stage("govern", cfg, ws)
    print(f"govern: seed {args.seed} -> {rec.state}")
    if args.key_file is None:
        return _state_exit(rec.state)

    if args.user is None:
        raise ConfigError("--user is required when sharing")
    payload = _final_dprime_bundle(ws)
    user = UserContext(**json.loads(args.user.read_text(encoding="utf-8")))
    policies = load_policies(args.policies) if args.policies else []
    key = args.key_file.read_bytes()
    meta = {"lifecycle_state": rec.state, **ws.read_json("validation.json")}
    step = f"step-{len(rec.history):04d}"
    pkg, rec = share(payload, rec, user, policies, key, step, meta=meta)
    target = args.package or ws.path("dprime.slpk")
    pkg.write(target)
    ws.save_lifecycle(rec)
    print(f"govern: sealed D' for {user.user_id} -> {target}")
    return EXIT_OK


def _final_dprime_bundle(ws: Workspace) -> bytes:
    """Canonical bundle of the certified iteration's D' files, each digest-checked."""
    rec = ws.lifecycle()
    it = sum(1 for e in rec.history if e.action == "metrics_computed") - 1
    prefix = f"iter{it}_"
    names = sorted(n for n in ws.manifest()
                   if n.startswith(prefix) and not n.endswith(("model.json", "grid.json",
                                                                "validation.json")))
    files = {}
    for name in names:
        if name.endswith(".jsonl"):
            ws.read_dataset(name)
        else:
            ws.check(name, canonical.sha256_hex(ws.path(name).read_bytes()))
        files[name] = ws.path(name).read_text(encoding="utf-8")
    return canonical.dump_bytes({"seed": ws.seed, "iteration": it, "files": files})


def _cmd_run_loop(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    if args.dry_run:
        seeds = list(range(args.seed, args.seed + cfg.n_seeds))
        print(f"run-loop: config valid (digest {cfg.digest()[:12]}); "
              f"seeds {seeds}; would write to {out}")
        return EXIT_OK
    summary = run_loop(cfg, args.seed, out)
    print(format_table(summary.aggregates()))
    for r in summary.results:
        print(f"seed {r.seed}: {r.final_state} after {r.iterations} iteration(s)")
    return EXIT_OK if summary.all_certified else EXIT_REJECTED


def _cmd_report(args) -> int:
    rows = report_rows(args.output)
    if not rows:
        raise ConfigError(f"no seed ledgers found under {args.output}")
    agg = aggregate(rows)
    if args.json:
        print(json.dumps(agg, sort_keys=True))
    else:
        print(format_table(agg))
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SLICELOOP_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return _cmd_report(args)
        cfg = _load_config(args)
        if args.command == "run-loop":
            return _cmd_run_loop(args, cfg)
        if args.command == "govern":
            return _cmd_govern(args, cfg)
        return _cmd_stage(args, cfg)
    except (SliceLoopError, OSError) as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

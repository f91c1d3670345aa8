"""Command-line entry point: ``corpnlab {train,ablate,gradcheck,rerun}``.

Every command that writes files also writes ``manifest.txt`` into its output
directory. ``corpnlab rerun MANIFEST`` replays it from the resolved config
recorded there and reproduces the CSV outputs byte for byte.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

from . import harness
from .checkpoint import save_checkpoint
from .config import ConfigError, LabConfig, from_resolved, load_config
from .gradcheck import run_gradcheck
from .train import write_loss_csv

log = logging.getLogger("corpnlab")

MANIFEST_FORMAT = "corpn-manifest 1"


# ----------------------------------------------------------------------------
# manifest


def write_manifest(path, command: list, cfg: LabConfig, artifacts: list, wall_clock: float) -> None:
    lines = [MANIFEST_FORMAT, f"command = {' '.join(command)}", f"config_hash = {cfg.hash()}"]
    lines += [f"config.{k} = {v}" for k, v in cfg.resolved().items()]
    lines += [f"artifact = {a}" for a in artifacts]
    lines.append(f"wall_clock_s = {wall_clock:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[list, LabConfig, str]:
    """``(command words, config, recorded hash)``; the hash is re-verified."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_FORMAT:
        raise ConfigError(f"{path}: not a {MANIFEST_FORMAT} file")
    command, recorded, resolved = None, None, {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        if key == "command":
            command = value.split()
        elif key == "config_hash":
            recorded = value
        elif key.startswith("config."):
            resolved[key[len("config."):]] = value
    if command is None or recorded is None:
        raise ConfigError(f"{path}: manifest lacks command or config_hash")
    cfg = from_resolved(resolved)
    if cfg.hash() != recorded:
        raise ConfigError(f"{path}: config hash mismatch (manifest edited?)")
    return command, cfg, recorded


# ----------------------------------------------------------------------------
# commands


def cmd_train(cfg: LabConfig, out: Path, jobs: int) -> list:
    """One seed (``experiment.seed``) through phase 1 and, if enabled, phase 2."""
    spec = cfg.spec(seeds=(cfg.experiment.seed,))
    seed = cfg.experiment.seed
    res = harness.run_pipeline(spec, seed, phase2=cfg.experiment.phase2)
    arts = ["checkpoint.txt", "loss.csv"]
    save_checkpoint(res.state, out / "checkpoint.txt", cfg.hash())
    write_loss_csv(res.history, out / "loss.csv")
    if res.metrics is not None:
        harness.write_csv(out / "metrics.csv", [(spec, [harness.SeedResult(seed, res.metrics)])])
        arts.append("metrics.csv")
        m = res.metrics
        print(f"seed {seed}: novel_ap50={m.novel_ap50:.4f} base_ap50={m.base_ap50:.4f} "
              f"avg_fn={m.avg_fn:.3f} avg_fg={m.avg_fg:.3f} recall={m.proposal_recall:.3f}")
    return arts


def _write_sweep(out: Path, name: str, sweep: harness.Sweep) -> list:
    harness.write_csv(out / f"{name}.csv", sweep.runs)
    harness.write_summary_csv(out / f"{name}_summary.csv", sweep)
    for row in sweep.rows:
        v = row.value if isinstance(row.value, str) else f"{row.value:g}"
        print(f"{sweep.parameter}={v}: n={row.n} "
              + " ".join(f"{k}={row.mean[k]:.4f}±{row.stderr[k]:.4f}"
                         for k in ("novel_ap50", "base_ap50", "avg_fn", "avg_fg")))
    if sweep.shape:
        print(f"shape: {sweep.shape}")
    return [f"{name}.csv", f"{name}_summary.csv"]


def cmd_ablate(kind: str, cfg: LabConfig, out: Path, jobs: int) -> list:
    base = cfg.spec()
    if kind == "phi":
        sweep = harness.sweep_phi(base, cfg.ablate.phis, jobs)
    elif kind == "nrpn":
        sweep = harness.sweep_n_rpns(base, cfg.ablate.ns, jobs)
    elif kind == "methods":
        sweep = harness.compare_methods(base, cfg.ablate.methods, jobs)
    else:
        raise ConfigError(f"unknown ablation {kind!r}")
    return _write_sweep(out, kind, sweep)


def _execute(command: list, cfg: LabConfig, out: Path, jobs: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if command[0] == "train":
        arts = cmd_train(cfg, out, jobs)
    elif command[0] == "ablate":
        arts = cmd_ablate(command[1], cfg, out, jobs)
    else:
        raise ConfigError(f"cannot replay command {' '.join(command)!r}")
    write_manifest(out / "manifest.txt", command, cfg, arts, time.perf_counter() - t0)
    print(f"wrote {', '.join(arts)} and manifest.txt to {out}")


# ----------------------------------------------------------------------------
# argument parsing


def _common(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="root seed (experiment.seed)")
    p.add_argument("--jobs", type=int, default=None, help="parallel seeds (default: available cores)")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. loss.phi=0.5 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corpnlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train one seed and write a checkpoint")
    _common(p)
    p = sub.add_parser("ablate", help="run an ablation sweep")
    p.add_argument("kind", choices=("phi", "nrpn", "methods"))
    _common(p)
    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("rerun", help="replay a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None)
    return parser


def _fail(kind: str, message: str, **extra) -> int:
    print(json.dumps({"status": "error", "kind": kind, "message": message, **extra}), file=sys.stderr)
    return 1 if kind != "usage" else 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", UserWarning)
    jobs = getattr(args, "jobs", None) or os.cpu_count() or 1
    try:
        if args.command == "gradcheck":
            report = run_gradcheck(args.instances, args.seed, args.tol)
            print(report.format())
            if not report.ok:
                return _fail("gradcheck", "gradient check failed",
                             failures=[{"term": t.term, "instance_seed": f"{args.seed}:{t.worst_seed}",
                                        "max_rel_err": t.max_rel_err} for t in report.failures()])
            return 0
        if args.command == "rerun":
            command, cfg, _ = read_manifest(args.manifest)
            _execute(command, cfg, Path(args.out), jobs)
            return 0
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"experiment.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        command = ["train"] if args.command == "train" else ["ablate", args.kind]
        _execute(command, cfg, Path(args.out), jobs)
        return 0
    except ConfigError as exc:
        return _fail("config", str(exc))
    except harness.ExperimentFailed as exc:
        return _fail("experiment", str(exc))
    except (ValueError, FloatingPointError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())

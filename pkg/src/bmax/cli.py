"""Command-line entry point.

    bmax explore   --config c.json --out runs/r1 [--seed 7] [--backend laplace] [--utility ...]
    bmax evaluate  --out runs/r1
    bmax calibrate --out runs/r1 [--split 0.9]
    bmax bench     --out runs/r1
    bmax report    runs/r1

Exit codes: 0 success, 1 invalid configuration (the message names the key),
2 runtime fault (a resumable checkpoint is noted when one was written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import config as config_mod
from .buffer import ReplayBuffer
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("bmax")

EXIT_OK, EXIT_CONFIG, EXIT_FAULT = 0, 1, 2


class LockError(RuntimeError):
    pass


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive per-directory lock; a second writer fails fast."""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / ".lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{run_dir} is locked by another process ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def _limit_threads():
    n = os.environ.get("BMAX_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bmax", description="Bayesian model-based active exploration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_config: bool):
        sp.add_argument("--config", required=need_config,
                        help="experiment config JSON (default: <out>/config.json)")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--backend", help="ensemble | mc_dropout | laplace")
        sp.add_argument("--utility", help="jensen_renyi2 | entropy_samples | entropy_laplace")

    sp = sub.add_parser("explore", help="collect an exploration buffer")
    common(sp, True)
    sp.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    sp = sub.add_parser("evaluate", help="evaluate task rewards on buffer snapshots")
    common(sp, False)
    sp.add_argument("--snapshots", type=int, nargs="*", help="prefix lengths (default: all)")
    sp = sub.add_parser("calibrate", help="AUSE of the configured backend on the buffer")
    common(sp, False)
    sp.add_argument("--split", type=float, default=0.9)
    sp = sub.add_parser("bench", help="fit/inference timing of all backends")
    common(sp, False)
    sp = sub.add_parser("report", help="render CSV and SVG reports")
    sp.add_argument("run_dir")
    return p


def resolve_config(args) -> ExperimentConfig:
    """Flags > file > defaults."""
    path = Path(args.config) if args.config else Path(args.out) / "config.json"
    if not path.exists():
        raise ConfigError("--config", f"config file {path} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("<file>", "top level must be an object")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.backend:
        overrides["backend.kind"] = args.backend
    if args.utility:
        overrides["utility.kind"] = args.utility
    return config_mod.from_dict(data, overrides)


def _write_resolved(cfg: ExperimentConfig, run_dir: Path) -> None:
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    path = run_dir / "config.json"
    if path.exists() and path.read_text() == text:
        return
    path.write_text(text)


def cmd_explore(cfg, run_dir: Path, args) -> int:
    from .pipeline import ExplorationFault, explore

    try:
        res = explore(cfg.make_env(), cfg, run_dir, resume=args.resume)
    except ExplorationFault as exc:
        print(f"runtime fault: {exc}; resumable checkpoint at {exc.checkpoint}", file=sys.stderr)
        return EXIT_FAULT
    print(f"explore: {len(res.buffer)} transitions, snapshots {res.snapshots}")
    return EXIT_OK


def _buffer(run_dir: Path) -> ReplayBuffer:
    path = run_dir / "buffer.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run explore first")
    return ReplayBuffer.from_csv(path)


def cmd_evaluate(cfg, run_dir: Path, args) -> int:
    from .pipeline import CountingEnv, evaluate

    buf = _buffer(run_dir)
    tasks = cfg.tasks or sorted(cfg.make_env().tasks)
    snaps = args.snapshots or list(range(cfg.counters.n_eval, len(buf) + 1, cfg.counters.n_eval))
    snaps = snaps or [len(buf)]
    raw = run_dir / "reports" / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    env = CountingEnv(cfg.make_env())
    for n in snaps:
        table = evaluate(env, buf.prefix(n), tasks, cfg)
        (raw / f"eval_{n:08d}.json").write_text(json.dumps(table.to_dict(), sort_keys=True) + "\n")
        print(f"evaluate @ {n}: " + ", ".join(f"{t}={table.mean(t):.6g}" for t in tasks))
    return EXIT_OK


def cmd_calibrate(cfg, run_dir: Path, args) -> int:
    from .metrics import calibration_run

    rec = calibration_run(_buffer(run_dir), args.split, cfg.backend, cfg.utility, cfg.train)
    raw = run_dir / "reports" / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    (raw / f"calibration_{cfg.backend.kind}_{cfg.utility.kind}.json").write_text(
        json.dumps(rec, sort_keys=True) + "\n")
    print(f"calibrate: AUSE {rec['ause']:.6g} ({rec['backend']}, {rec['utility']})")
    return EXIT_OK


def cmd_bench(cfg, run_dir: Path, args) -> int:
    from .metrics import bench

    rec = bench(_buffer(run_dir), cfg.backend, cfg.train)
    raw = run_dir / "reports" / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    (raw / "timing.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    for r in rec["rows"]:
        print(f"bench {r['backend']:>10}: fit {r['fit_s']:.6g} s "
              f"(x{r['fit_ratio_vs_single']:.3g} single)")
    return EXIT_OK


COMMANDS = {"explore": cmd_explore, "evaluate": cmd_evaluate, "calibrate": cmd_calibrate,
            "bench": cmd_bench}


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    if args.command == "report":
        from .metrics import MissingArtifacts, report

        try:
            with run_lock(Path(args.run_dir)):
                files = report(args.run_dir)
        except MissingArtifacts as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAULT
        except ConfigError as exc:
            print(f"invalid configuration: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except LockError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAULT
        print(f"report: {len(files)} files in {Path(args.run_dir) / 'reports'}")
        return EXIT_OK
    run_dir = Path(args.out)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with run_lock(run_dir):
            _write_resolved(cfg, run_dir)
            return COMMANDS[args.command](cfg, run_dir, args)
    except LockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except Exception as exc:  # runtime fault
        log.debug("fault", exc_info=True)
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

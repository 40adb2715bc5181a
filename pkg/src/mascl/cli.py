"""Command line entry point.

    mascl run [CONFIG] [--preset NAME] [--data-dir DIR] [--out-dir DIR] [--parallel N]
    mascl validate CONFIG [--preset NAME]
    mascl presets

Exit status: 0 on success, 2 for an invalid config, 3 for missing or malformed
data files, 1 for any other failure. Accuracy never affects the status.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .analysis import aggregate
from .errors import ConfigError, ParseError
from .experiments import PRESETS, load_config, read_config, run_experiment, validate, write_outputs

EXIT_CONFIG = 2
EXIT_DATA = 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mascl", description="Importance-regularized continual learning experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (method, lambda, seed) cell of a config")
    run.add_argument("config", nargs="?", help="JSON config file (optional with --preset)")
    run.add_argument("--preset", choices=sorted(PRESETS), help="built-in config; file fields override it")
    run.add_argument("--data-dir", help="directory with MNIST IDX files")
    run.add_argument("--out-dir", help="where to write reports (default: out/<name>)")
    run.add_argument("--parallel", type=int, default=1, metavar="N",
                     help="run up to N cells concurrently (default 1: serial)")
    run.add_argument("-v", "--verbose", action="store_true")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    val.add_argument("--preset", choices=sorted(PRESETS))

    sub.add_parser("presets", help="list built-in presets")
    return ap


def _load_raw(path: str | None) -> dict:
    return {} if path is None else read_config(path)


def cmd_validate(args) -> int:
    try:
        raw = _load_raw(args.config)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    errs = validate(raw, args.preset)
    for e in errs:
        print(e)
    if not errs:
        print("ok")
    return EXIT_CONFIG if errs else 0


def cmd_run(args) -> int:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.config is None and args.preset is None:
        print("run needs a config file or --preset", file=sys.stderr)
        return EXIT_CONFIG
    if args.parallel < 1:
        print("--parallel must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(_load_raw(args.config), args.preset, args.data_dir, args.out_dir)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    out_dir = cfg.out_dir or f"out/{cfg.name}"
    try:
        results = run_experiment(cfg, args.parallel)
    except (FileNotFoundError, ParseError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    write_outputs(cfg, results, out_dir)
    for row in aggregate([r.report for r in results]):
        print(f"{row['method']:<12} lam={row['lam']:<6g} seeds={row['n_seeds']}  "
              f"avg_acc {row['avg_acc_mean']:.4f} +- {row['avg_acc_std']:.4f}  "
              f"avg_forgetting {row['avg_forgetting_mean']:.4f} +- {row['avg_forgetting_std']:.4f}")
    print(f"reports written to {out_dir}")
    return 0


def cmd_presets(args) -> int:
    for name in sorted(PRESETS):
        print(name)
        print(json.dumps(PRESETS[name], indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    return {"run": cmd_run, "validate": cmd_validate, "presets": cmd_presets}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``lab <experiment> [--config FILE] [overrides]``.

Exit status: 0 on success, 2 when the experiment's acceptance property
fails, 1 on any error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .experiments import EXPERIMENTS, ConfigError, ExperimentConfig, run_experiment


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lab", description="Run a deep-GCN experiment and write CSV results.")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", help="plain-text key=value config file")
    ap.add_argument("--seed", type=int, help="run a single seed")
    ap.add_argument("--depth", type=int, help="run a single depth")
    ap.add_argument("--arch", help="run a single architecture")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--workers", type=int, help="parallel worker processes")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override any config key (repeatable)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            base = ExperimentConfig.from_text(fh.read())
        raw = {k: v for k, v in (ln.split("=", 1) for ln in base.to_text().splitlines())}
    raw["experiment"] = args.experiment
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v
    if args.seed is not None:
        raw["seeds"] = str(args.seed)
    if args.depth is not None:
        raw["depths"] = str(args.depth)
    if args.arch is not None:
        raw["archs"] = args.arch
    if args.out is not None:
        raw["out"] = args.out
    if args.workers is not None:
        raw["workers"] = str(args.workers)
    return ExperimentConfig.from_dict(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        result = run_experiment(cfg)
    except (ConfigError, ValueError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"lab: error: {exc}", file=sys.stderr)
        return 1
    print(f"{cfg.experiment} config_hash={cfg.config_hash()}")
    for name, path in result.files.items():
        print(f"  {name}: {path}")
    for msg in result.messages:
        print(f"  {msg}")
    if result.passed is False:
        print("  acceptance property: FAIL")
        return 2
    if result.passed is True:
        print("  acceptance property: PASS")
    return 0


if __name__ == "__main__":
    sys.exit(main())

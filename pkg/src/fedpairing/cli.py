"""Command-line entry point."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import harness


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpairing", description="Client-pairing split federated learning simulator")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "train one algorithm on one seed"),
        ("compare-pairing", "analytic round time of each pairing strategy over many seeds"),
        ("compare-algorithms", "round-time table and accuracy curves for all algorithms"),
        ("validate-config", "parse and validate a config file"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, default=None, help="JSON config (defaults used if omitted)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", type=Path, default=None, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig().validate()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=str(args.out))
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        if args.command == "validate-config":
            print(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True))
            return 0
        if args.command == "run":
            paths = harness.run_experiment(cfg)
            summary = json.loads(paths["summary"].read_text())
            print(f"{cfg.algorithm} seed={cfg.seed} final_accuracy={summary['final_accuracy']:.4f}")
            print(f"wrote {paths['csv']} and {paths['summary']}")
        elif args.command == "compare-pairing":
            means = harness.compare_pairing_mechanisms(cfg)
            for k, v in means.items():
                print(f"{k:10s} {v:14.3f} s")
        else:
            summary = harness.compare_algorithms(cfg)
            for a, t in summary["round_time_s"].items():
                print(f"{a:12s} {t:14.3f} s")
            for part, accs in summary["final_accuracy"].items():
                print(part + ": " + ", ".join(f"{a}={v:.4f}" for a, v in accs.items()))
        return 0
    except (harness.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

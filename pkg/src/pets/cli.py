"""Command-line entry point.

    pets run --config exp.json
    pets ablate --config exp.json
    pets sweep-horizon --config exp.json --horizons 5,15,25,50,100
    pets export --run-dir runs/abc123
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import harness


def _load(args) -> harness.ExperimentConfig:
    config = harness.ExperimentConfig.from_json(args.config)
    if args.output_dir:
        config = config.replace(output_dir=args.output_dir)
    if harness.resolve_output_dir(config) is None:
        config = config.replace(output_dir=os.path.join("runs", config.config_hash()))
    return config


def _all_complete(logs) -> bool:
    return all(tl.complete for tl in logs.values())


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pets", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "ablate", "sweep-horizon"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--output-dir", help=f"overrides config output_dir and ${harness.OUTPUT_ROOT_ENV}")
        if name == "sweep-horizon":
            p.add_argument("--horizons", help="comma-separated planning horizons")
    p = sub.add_parser("export")
    p.add_argument("--run-dir", required=True)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    if args.command == "export":
        band = harness.export_curves(args.run_dir, args.run_dir)
        return 0 if band else 1
    config = _load(args)
    out = harness.resolve_output_dir(config)
    if args.command == "run":
        ok = _all_complete(harness.run_experiment(config))
    elif args.command == "ablate":
        result = harness.run_ablation(config)
        ok = all(r["complete"] for r in result["summary"])
        for r in result["summary"]:
            print(f"{r['cell']:>10s}  mean {r['mean_final']:9.3f}  median {r['median_final']:9.3f}")
    else:
        horizons = ([int(h) for h in args.horizons.split(",")] if args.horizons
                    else list(config.horizons))
        if not horizons:
            parser.error("no horizons given")
        ok = all(_all_complete(logs) for logs in harness.run_horizon_sweep(config, horizons).values())
    print(f"output: {out}", file=sys.stderr)
    return 0 if ok else 1

"""Command line entry point: ``qsd run|validate|probe|stats``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, validate_config
from .dataio import load_mnist_split
from .errors import ConfigError, QSDError
from .labstats import REGIMES, activation_summary
from .netcore import load_snapshot
from .runner import PROBE_STREAM, collect_results, run_experiment
from .stochastics import RngStream


def _cmd_run(args) -> int:
    config = validate_config(args.config).with_preset(args.preset)
    if args.output:
        config = dataclasses.replace(config, output_dir=Path(args.output))
    return run_experiment(config, jobs=args.jobs, resume=args.resume)


def _cmd_validate(args) -> int:
    config = validate_config(args.config).with_preset(args.preset)
    sys.stdout.write(config.to_ini())
    return 0


def _cmd_probe(args) -> int:
    model, meta = load_snapshot(args.snapshot)
    dataset = load_mnist_split(args.dataset, args.split).subset(args.limit)
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    stream = None if args.regime == "masks_off" else RngStream(seed, PROBE_STREAM)
    summary = activation_summary(model, dataset, args.regime, stream)
    rows = summary.to_rows()
    if args.units:
        for row, layer in zip(rows, summary.layers):
            row["unit_means"] = layer.unit_means.tolist()
    json.dump(rows, sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def _cmd_stats(args) -> int:
    results = Path(args.results_dir)
    config = validate_config(results / "effective_config.ini")
    config = dataclasses.replace(config, output_dir=results)
    summary = collect_results(config)
    for label, entry in summary["conditions"].items():
        tc = entry["test_cost"]
        if "median" in tc:
            print(f"{label:>16}  test cost median {tc['median']:.4f}  IQR [{tc['q1']:.4f}, {tc['q3']:.4f}]  n={len(tc['per_seed'])}")
        else:
            print(f"{label:>16}  no completed runs")
    for comp in summary["comparisons"]:
        if comp["metric"] == "test_cost":
            print(f"{comp['a']} vs {comp['b']}: Z={comp['z']:.2f} P={comp['p']:.4f}")
    for failed in summary["failed_runs"]:
        print(f"diverged: {failed['condition']} seed {failed['seed']} at epoch {failed['diverged_at']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsd", description="Quantal synaptic dilution experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every condition and seed of a config")
    p.add_argument("config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--jobs", type=int, help="parallel runs (default: config value)")
    p.add_argument("--resume", action="store_true", help="skip runs that already completed")
    p.add_argument("--output", help="override the configured output directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate", help="print the effective config or the list of problems")
    p.add_argument("config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("probe", help="hidden-layer activation statistics of a snapshot")
    p.add_argument("snapshot")
    p.add_argument("dataset", help="directory with the MNIST IDX files")
    p.add_argument("--regime", choices=REGIMES, default="masks_off")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int, help="probe seed (default: the snapshot's run seed)")
    p.add_argument("--units", action="store_true", help="include per-unit means")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("stats", help="rebuild summary.json from a results directory")
    p.add_argument("results_dir")
    p.set_defaults(func=_cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except QSDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``ibq <subcommand> ...``.

Exit codes:
  0  success
  1  unexpected failure
  2  usage error (bad subcommand or flags)
  3  unknown preset
  4  unreadable or invalid config
  5  I/O failure
  6  retry budget exhausted
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import data, harness, render

DEFAULT_SEED = 0

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_UNKNOWN_PRESET = 3
EXIT_BAD_CONFIG = 4
EXIT_IO = 5
EXIT_RETRIES = 6


def _workers_arg(p):
    p.add_argument("--workers", type=int, default=None,
                   help="parallel repetitions (default: $IBQ_WORKERS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibq", description="Exact information-plane analysis of quantized networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="write the synthetic 12-bit dataset as text")
    p.add_argument("--out", required=True, help="output file (one '<bits> <label>' line per sample)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"label seed (default {DEFAULT_SEED})")

    p = sub.add_parser("run", help="run an experiment from a JSON config file")
    p.add_argument("config", help="path to a JSON ExperimentConfig")
    p.add_argument("--out", required=True, help="output directory for logs and figures")
    p.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    _workers_arg(p)

    p = sub.add_parser("reproduce", help="run a named preset and write logs and figures")
    p.add_argument("preset", help="preset name (see list-presets)")
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.add_argument("--scale", type=float, default=1.0, help="desk-scale factor in (0, 1] for repetitions and epochs")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"master seed (default {DEFAULT_SEED})")
    p.add_argument("--mnist-dir", default=None, help="directory holding the four MNIST IDX files")
    p.add_argument("--stride", type=int, default=None, help="measure MI every N epochs")
    p.add_argument("--save-config", default=None, help="also write the resolved config to this path")
    _workers_arg(p)

    p = sub.add_parser("plot", help="regenerate figures from logs written by run/reproduce")
    p.add_argument("--in", dest="indir", required=True, help="directory containing runs.csv and metadata.json")
    p.add_argument("--out", required=True, help="directory for the SVG figures")

    sub.add_parser("list-presets", help="print the preset catalog")
    return parser


def _execute(config, out, workers, verbose):
    progress = None
    if verbose:
        progress = lambda r, n: logging.getLogger("ibq").info("repetition %d/%d done", r + 1, n)
    artifacts = harness.run_experiment(config, workers=workers, progress=progress)
    render.write_logs(artifacts, out)
    # figures are drawn from the logs just written, exactly as `plot` does
    render.render_figures(render.load_logs(out), out)
    return artifacts


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            data.save_synthetic(data.gen_synthetic(args.seed), args.out)
        elif args.command == "list-presets":
            for name in harness.preset_names():
                cfg = harness.preset(name)
                print(f"{name:22s} reps={cfg.repetitions:<3d} epochs={cfg.epochs:<5d} "
                      f"bits={cfg.quant_bits} mi={cfg.mi_mode}{'' if cfg.bins is None else f'({cfg.bins})'}"
                      f"{f' prefit={cfg.prefit_epochs}' if cfg.prefit_epochs else ''}")
        elif args.command == "run":
            try:
                config = harness.load_config(args.config)
            except (OSError, json.JSONDecodeError, harness.ConfigError) as e:
                print(f"ibq: unreadable config {args.config}: {e}", file=sys.stderr)
                return EXIT_BAD_CONFIG
            if args.seed is not None:
                config = replace(config, master_seed=args.seed)
            _execute(config, args.out, args.workers, args.verbose)
        elif args.command == "reproduce":
            if args.mnist_dir:
                os.environ["IBQ_MNIST_DIR"] = args.mnist_dir
            config = harness.preset(args.preset)
            config = replace(harness.desk_scale(config, args.scale), master_seed=args.seed)
            if args.stride:
                config = replace(config, mi_stride=args.stride)
            if args.save_config:
                harness.save_config(config, args.save_config)
            _execute(config, args.out, args.workers, args.verbose)
        elif args.command == "plot":
            render.render_figures(render.load_logs(args.indir), args.out)
    except harness.UnknownPresetError as e:
        print(f"ibq: {e}", file=sys.stderr)
        return EXIT_UNKNOWN_PRESET
    except harness.ConfigError as e:
        print(f"ibq: invalid configuration: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except harness.RetryBudgetExhausted as e:
        print(f"ibq: {e}", file=sys.stderr)
        return EXIT_RETRIES
    except OSError as e:
        print(f"ibq: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

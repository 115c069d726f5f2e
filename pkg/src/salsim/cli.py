"""Command-line front end: run one simulation, sweep a grid, plot a CSV.

Exit codes: 0 on success, 1 for configuration or content errors, 2 for
I/O errors (missing or unwritable files).
"""

import argparse
import dataclasses
import sys

from .engine import ConfigError, run, sweep
from .metrics import ParseError, PlotSpec, load_config, render_plot, write_csv


def build_parser():
    parser = argparse.ArgumentParser(
        prog="salsim",
        description=(
            "Slotted simulator of networked control loops publishing over a "
            "lossy uplink through a semantic aggregation layer."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one seeded run, write a one-row CSV")
    p_run.add_argument("--config", required=True, help="path to a key=value config file")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default="results.csv", help="output CSV path")

    p_sweep = sub.add_parser("sweep", help="run a loop-count by strategy grid")
    p_sweep.add_argument("--config", required=True, help="path to a key=value config file")
    p_sweep.add_argument("--n", required=True, help="comma-separated loop counts, e.g. 5,10,15,20")
    p_sweep.add_argument(
        "--strategies", required=True, help="comma-separated strategy tokens, e.g. UC,FC,UA,FA"
    )
    p_sweep.add_argument("--tis", action="store_true", help="upgrade FA to FA+TIS")
    p_sweep.add_argument("--jobs", type=int, default=1, help="worker processes")
    p_sweep.add_argument("--out", default="sweep.csv", help="output CSV path")

    p_plot = sub.add_parser("plot", help="plot a sweep CSV as a standalone SVG")
    p_plot.add_argument("--in", dest="infile", required=True, help="input CSV path")
    p_plot.add_argument("--metric", required=True, choices=("aoi", "lqg"))
    p_plot.add_argument("--out", default="fig.svg", help="output SVG path")
    return parser


def _parse_sizes(text):
    try:
        sizes = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"loop counts must be integers, got {text!r}") from None
    if not sizes:
        raise ConfigError(f"no loop counts in {text!r}")
    return sizes


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = load_config(args.config)
            if args.seed is not None:
                config = dataclasses.replace(config, seed=args.seed)
            write_csv([run(config)], args.out)
            print(f"wrote {args.out}")
        elif args.command == "sweep":
            config = load_config(args.config)
            if args.tis:
                config = dataclasses.replace(config, tis=True)
            tokens = [tok for tok in args.strategies.split(",") if tok.strip()]
            results = sweep(config, _parse_sizes(args.n), tokens, jobs=args.jobs)
            write_csv(results, args.out)
            print(f"wrote {args.out} ({len(results)} rows)")
        else:
            render_plot(args.infile, PlotSpec(metric=args.metric), args.out)
            print(f"wrote {args.out}")
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    return 0


def entry():
    raise SystemExit(main())
